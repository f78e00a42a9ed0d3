"""Fitness evaluation, sampling and dataset preparation."""

import math

import numpy as np
import pytest

import fitness_evaluator
from amg_solver import SolverConfig
from fitness_evaluator import (Budget, Dataset, DatasetStage, FitnessMode, FitnessResult, FitnessSample, balance,
                               calibrate_budget, dataset_stats, evaluate, evaluate_config, evaluate_many,
                               load_dataset, parse_mode, sample_dataset, save_dataset, split, unbalance,
                               upper_quartile)
from param_space import ParameterVector, encode, fingerprint
from tuner_errors import ConfigError, DatasetError, FingerprintMismatchError


def make_dataset(values, stage=DatasetStage.RAW, fp="f" * 64):
    samples = [FitnessSample(ParameterVector((i % 3, i)),
                             FitnessResult(value=v, converged=math.isfinite(v), mode=FitnessMode.WORK_UNITS))
               for i, v in enumerate(values)]
    return Dataset(fingerprint=fp, samples=samples, stage=stage, parameter_names=['a', 'b'])


def fake_fitness(vectors):
    return [FitnessResult(value=float(sum(v.indices) + 1), converged=True, mode=FitnessMode.WORK_UNITS)
            for v in vectors]


class TestEvaluation:
    def test_work_units_are_deterministic(self, cube10, tiny_space, work_budget):
        v = encode(tiny_space, SolverConfig())
        first = evaluate(cube10, tiny_space, v, work_budget)
        second = evaluate(cube10, tiny_space, v, work_budget)
        assert first.converged
        assert first.value == second.value
        assert first.value > 0

    def test_non_convergence_is_infinite(self, cube10, tiny_space):
        result = evaluate(cube10, tiny_space, encode(tiny_space, SolverConfig()), Budget(outer_max_iters=0))
        assert not result.converged
        assert result.value == math.inf
        assert result.reason == "iteration budget exhausted"

    def test_invalid_vector_is_infinite(self, cube6, tiny_space, work_budget):
        result = evaluate(cube6, tiny_space, ParameterVector((9, 0, 0, 0, 0, 0, 0)), work_budget)
        assert result.value == math.inf
        assert result.reason.startswith("invalid configuration")

    def test_calibrated_budget_caps_work(self, cube10):
        reference = evaluate_config(cube10, SolverConfig(), Budget())
        budget = calibrate_budget(cube10, FitnessMode.WORK_UNITS)
        assert budget.max_work_units == pytest.approx(20.0 * reference.value)
        assert budget.timeout is None

    def test_wall_time_budget_uses_seconds(self, cube6):
        budget = calibrate_budget(cube6, FitnessMode.WALL_TIME, timeout_factor=5.0, repeats=2)
        assert budget.timeout >= 5.0 * 1e-3
        assert budget.max_work_units is None
        assert budget.repeats == 2

    def test_serial_batch_keeps_order(self, cube6, small_space, work_budget):
        vectors = [ParameterVector((0, 0, 0)), ParameterVector((1, 3, 2))]
        results = evaluate_many(cube6, small_space, vectors, work_budget)
        assert [r.value for r in results] == [evaluate(cube6, small_space, v, work_budget).value for v in vectors]


class TestQuartileAndBalancing:
    def test_upper_quartile_interpolates(self):
        assert upper_quartile(np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(3.25)

    def test_balance(self):
        d = balance(make_dataset([1, 2, 3, 4, 5, math.inf, 100, 6]))
        assert d.stage == DatasetStage.BALANCED
        assert d.q3 == pytest.approx(5.5)
        assert d.values().tolist() == pytest.approx([1, 2, 3, 4, 5, 5.5, 5.5, 5.5])

    def test_unbalance_replaces_only_infinities(self):
        d = unbalance(make_dataset([1, 2, 3, 4, 5, math.inf, 100, 6]))
        assert d.stage == DatasetStage.UNBALANCED
        assert d.values().tolist() == pytest.approx([1, 2, 3, 4, 5, 5.5, 100, 6])
        assert not d.samples[5].fitness.converged

    def test_balance_is_idempotent(self):
        once = balance(make_dataset([3, 1, math.inf, 7, 2, 9]))
        twice = balance(once)
        assert twice.values().tolist() == once.values().tolist()
        assert twice.q3 == once.q3

    def test_balancing_an_unbalanced_dataset_keeps_its_quartile(self):
        raw = make_dataset([1, 2, 3, 4, 5, math.inf, 100, 6])
        assert balance(unbalance(raw)).values().tolist() == balance(raw).values().tolist()

    def test_original_is_untouched(self):
        raw = make_dataset([1, 2, 3, 4, math.inf])
        balance(raw)
        assert raw.values()[-1] == math.inf
        assert raw.stage == DatasetStage.RAW

    def test_too_few_finite_values(self):
        with pytest.raises(DatasetError):
            balance(make_dataset([1, 2, 3, math.inf, math.inf]))

    def test_unbalance_needs_raw(self):
        with pytest.raises(DatasetError):
            unbalance(balance(make_dataset([1, 2, 3, 4])))

    def test_stats(self):
        stats = dataset_stats(make_dataset([1, 2, 3, 4, math.inf]))
        assert stats['samples'] == 5
        assert stats['non_converged_percent'] == pytest.approx(20.0)
        assert stats['flagged_non_converged'] == 1
        assert stats['q3'] == pytest.approx(3.25)
        assert stats['min'] == 1.0 and stats['max'] == 4.0


class TestSplit:
    def test_partition(self, rng):
        d = make_dataset([float(i) for i in range(10)])
        train, val = split(d, 0.3, rng)
        assert len(train) == 7 and len(val) == 3
        assert sorted(train.values().tolist() + val.values().tolist()) == list(range(10))

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5, 0.01])
    def test_bad_fractions(self, rng, fraction):
        with pytest.raises(DatasetError):
            split(make_dataset([float(i) for i in range(10)]), fraction, rng)


class TestFiles:
    def test_save_and_load(self, tmp_path):
        d = unbalance(make_dataset([1.5, math.inf, 2.25, 4.0, 8.0]))
        d.samples[1] = FitnessSample(d.samples[1].vector,
                                     FitnessResult(value=math.inf, converged=False, mode=FitnessMode.WORK_UNITS))
        path = str(tmp_path / "sub" / "d.csv")
        save_dataset(d, path)
        loaded = load_dataset(path)
        assert loaded.fingerprint == d.fingerprint
        assert loaded.stage == DatasetStage.UNBALANCED
        assert loaded.q3 == d.q3
        assert loaded.parameter_names == ['a', 'b']
        assert loaded.vectors() == d.vectors()
        assert loaded.values().tolist() == d.values().tolist()
        assert [s.fitness.converged for s in loaded.samples] == [True, False, True, True, True]

    def test_fingerprint_checked(self, tmp_path, small_space, tiny_space):
        path = str(tmp_path / "d.csv")
        save_dataset(make_dataset([1.0, 2.0], fp=fingerprint(small_space)), path)
        assert len(load_dataset(path, small_space)) == 2
        with pytest.raises(FingerprintMismatchError):
            load_dataset(path, tiny_space)

    def test_not_a_dataset(self, write_file):
        with pytest.raises(DatasetError):
            load_dataset(write_file("x.csv", "a,b,c\n"))

    def test_ragged_rows(self, write_file):
        text = "# hes-dataset v1\n# fingerprint: abc\n0,1,2.0,1\n0,2.0,1\n"
        with pytest.raises(DatasetError):
            load_dataset(write_file("x.csv", text))

    def test_bad_stage(self, write_file):
        text = "# hes-dataset v1\n# fingerprint: abc\n# stage: cooked\n0,2.0,1\n"
        with pytest.raises(DatasetError):
            load_dataset(write_file("x.csv", text))


class TestSampling:
    def test_resume_after_interruption(self, monkeypatch, tmp_path, cube6, small_space, work_budget):
        path = str(tmp_path / "raw.csv.part")
        calls = []

        def failing(problem, space, vectors, budget, jobs=1):
            if len(calls) == 2:
                raise KeyboardInterrupt
            calls.append(list(vectors))
            return fake_fitness(vectors)

        monkeypatch.setattr(fitness_evaluator, "evaluate_many", failing)
        with pytest.raises(KeyboardInterrupt):
            sample_dataset(cube6, small_space, 10, np.random.default_rng(5), work_budget,
                           checkpoint_path=path, chunk_size=4)
        assert len(load_dataset(path)) == 8

        resumed_calls = []

        def counting(problem, space, vectors, budget, jobs=1):
            resumed_calls.append(list(vectors))
            return fake_fitness(vectors)

        monkeypatch.setattr(fitness_evaluator, "evaluate_many", counting)
        resumed = sample_dataset(cube6, small_space, 10, np.random.default_rng(5), work_budget,
                                 checkpoint_path=path, chunk_size=4)
        assert [len(chunk) for chunk in resumed_calls] == [2]

        fresh = sample_dataset(cube6, small_space, 10, np.random.default_rng(5), work_budget, chunk_size=4)
        assert resumed.vectors() == fresh.vectors()
        assert resumed.values().tolist() == fresh.values().tolist()

    def test_resume_with_other_seed_fails(self, monkeypatch, tmp_path, cube6, small_space, work_budget):
        monkeypatch.setattr(fitness_evaluator, "evaluate_many",
                            lambda problem, space, vectors, budget, jobs=1: fake_fitness(vectors))
        path = str(tmp_path / "raw.csv.part")
        sample_dataset(cube6, small_space, 8, np.random.default_rng(1), work_budget, checkpoint_path=path)
        with pytest.raises(DatasetError):
            sample_dataset(cube6, small_space, 8, np.random.default_rng(2), work_budget, checkpoint_path=path)

    def test_real_sampling(self, cube6, small_space, work_budget, rng):
        d = sample_dataset(cube6, small_space, 5, rng, work_budget)
        assert len(d) == 5
        assert d.stage == DatasetStage.RAW
        assert d.fingerprint == fingerprint(small_space)
        assert d.parameter_names == small_space.names

    def test_count_must_be_positive(self, cube6, small_space, work_budget, rng):
        with pytest.raises(DatasetError):
            sample_dataset(cube6, small_space, 0, rng, work_budget)


@pytest.mark.parametrize("text,mode", [("wall-time", FitnessMode.WALL_TIME), ("Work_Units", FitnessMode.WORK_UNITS),
                                       ("work-units", FitnessMode.WORK_UNITS)])
def test_parse_mode(text, mode):
    assert parse_mode(text) == mode


def test_parse_mode_rejects_unknown():
    with pytest.raises(ConfigError):
        parse_mode("speed")
