"""
End-to-end tuning checks on real solves over the tiny grid.

Every configuration is solved at most once per problem; the optimizer reads
fitness values from that table.
"""

from dataclasses import replace

import numpy as np
import pytest

import fitness_evaluator
import hes_optimizer
from amg_solver import SolverConfig
from fitness_evaluator import FitnessMode, balance, calibrate_budget, evaluate_many, sample_dataset, split
from hes_optimizer import EsConfig, run
from param_space import encode, enumerate_vectors
from sparse_core import load_problem, parse_problem_spec
from surrogate_net import TrainConfig, train

pytestmark = pytest.mark.slow


class FitnessTable:
    """Memoized evaluate_many for one problem."""

    def __init__(self, problem, space):
        self.problem = problem
        self.space = space
        self.budget = calibrate_budget(problem, FitnessMode.WORK_UNITS)
        self.cache = {}

    def __call__(self, problem, space, vectors, budget, jobs=1):
        missing = list(dict.fromkeys(v for v in vectors if v not in self.cache))
        for v, result in zip(missing, evaluate_many(self.problem, self.space, missing, self.budget)):
            self.cache[v] = result
        return [self.cache[v] for v in vectors]

    def fill(self):
        self(self.problem, self.space, list(enumerate_vectors(self.space)), self.budget)
        return self


@pytest.fixture(scope="module")
def cube16_table(tiny_space):
    return FitnessTable(load_problem(parse_problem_spec("cube:16")), tiny_space).fill()


@pytest.fixture(scope="module")
def jumps16_table(tiny_space):
    return FitnessTable(load_problem(parse_problem_spec("jumps:16")), tiny_space)


@pytest.fixture(scope="module")
def cube16_model(cube16_table, tiny_space):
    """Surrogate trained on 1500 balanced samples read from the table."""
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(fitness_evaluator, "evaluate_many", cube16_table)
        raw = sample_dataset(cube16_table.problem, tiny_space, 1500, np.random.default_rng(0), cube16_table.budget)
    train_set, _ = split(balance(raw), 0.1, np.random.default_rng(0))
    return train(train_set, tiny_space, TrainConfig(seed=0))


def tuned_fitness(table, space, es_cfg, trials=20):
    """Final best fitness of `trials` seeded runs read from `table`."""
    best = []
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(hes_optimizer, "evaluate_many", table)
        for trial in range(trials):
            _, trace = run(table.problem, space, replace(es_cfg, seed=trial), table.budget)
            best.append(trace.best[1].value)
    return np.array(best)


def test_exhaustive_table_has_a_feasible_optimum(cube16_table):
    values = np.array([r.value for r in cube16_table.cache.values()])
    assert len(values) == 1152
    assert np.isfinite(values).any()


def test_filtered_search_reaches_the_global_optimum(cube16_table, cube16_model, tiny_space):
    optimum = min(r.value for r in cube16_table.cache.values())
    best, evaluations = [], []
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(hes_optimizer, "evaluate_many", cube16_table)
        for trial in range(20):
            es_cfg = EsConfig(lambda_s=5, lambda_r=5, use_nn_filter=True, model=cube16_model, seed=trial)
            _, trace = run(cube16_table.problem, tiny_space, es_cfg, cube16_table.budget)
            best.append(trace.best[1].value)
            evaluations.append(trace.total_evaluations)

    within = sum(1 for value in best if value <= 1.1 * optimum)
    assert within >= 16
    assert np.median(evaluations) <= 300


def test_filter_lowers_mean_and_spread(cube16_table, cube16_model, tiny_space):
    plain = tuned_fitness(cube16_table, tiny_space, EsConfig(lambda_s=5, lambda_r=5))
    filtered = tuned_fitness(cube16_table, tiny_space,
                             EsConfig(lambda_s=5, lambda_r=5, use_nn_filter=True, model=cube16_model))
    assert np.isfinite(plain).all() and np.isfinite(filtered).all()
    # equal samples may sum in a different order
    slack = 1e-12 * plain.mean()
    assert filtered.mean() <= plain.mean() + slack
    assert filtered.std(ddof=1) <= plain.std(ddof=1) + slack


def test_smaller_alpha_tunes_at_least_as_well(cube16_table, cube16_model, tiny_space):
    narrow, wide = (tuned_fitness(cube16_table, tiny_space,
                                  EsConfig(lambda_s=5, lambda_r=5, alpha=alpha, trial_pool=5000,
                                           use_nn_filter=True, model=cube16_model))
                    for alpha in (0.002, 0.2))
    assert np.isfinite(narrow).all() and np.isfinite(wide).all()
    assert narrow.mean() <= wide.mean() * (1 + 1e-12)


@pytest.mark.parametrize("table_name", ["cube16_table", "jumps16_table"])
def test_best_fitness_never_worsens(request, table_name, tiny_space):
    table = request.getfixturevalue(table_name)
    default_vector = encode(tiny_space, SolverConfig())
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(hes_optimizer, "evaluate_many", table)
        for seed in range(25):
            _, trace = run(table.problem, tiny_space, EsConfig(seed=seed), table.budget)
            history = trace.best_history()
            assert all(later <= earlier for earlier, later in zip(history, history[1:]))
            assert trace.best[1].value <= table.cache[default_vector].value
