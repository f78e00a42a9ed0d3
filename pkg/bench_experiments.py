#!/usr/bin/env python3
"""
Benchmark experiments
Desk-scale studies of surrogate quality and of the tuner: F_alpha reliability,
dataset balancing, NN filtering, mutation ratios, alpha and training size.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fitness_evaluator import (Budget, Dataset, FitnessMode, FitnessResult, FitnessSample, balance,
                               calibrate_budget, load_dataset, sample_dataset, split, unbalance)
from hes_optimizer import EsConfig, run
from param_space import SearchSpace, fingerprint, load_space, normalize_many, random_vector
from sparse_core import Problem, load_problem, parse_problem_spec
from surrogate_net import (MlpModel, TrainConfig, evaluate_predictions, f_alpha, predict, r_squared, train)
from tuner_errors import ConfigError, InfeasibleError

logger = logging.getLogger(__name__)


@dataclass
class BenchContext:
    """Inputs shared by all experiments; sizes are desk-scale defaults."""
    out_dir: str = os.path.join("artifacts", "bench")
    problem_spec: str = "cube:16"
    space_path: str = os.path.join("configs", "space7.space")
    mode: FitnessMode = FitnessMode.WORK_UNITS
    seed: int = 0
    jobs: int = 1
    trials: int = 20
    samples: int = 1500
    validation_fraction: float = 0.1
    epochs: Optional[int] = None
    trial_pool: int = 5000
    dataset_path: Optional[str] = None
    ssmc_resolver: Optional[Callable[[str, str], str]] = None
    _cache: Dict[str, Any] = field(default_factory=dict, repr=False)

    def space(self) -> SearchSpace:
        if 'space' not in self._cache:
            self._cache['space'] = load_space(self.space_path)
        return self._cache['space']

    def problem(self) -> Problem:
        if 'problem' not in self._cache:
            self._cache['problem'] = load_problem(parse_problem_spec(self.problem_spec), seed=self.seed,
                                                  ssmc_resolver=self.ssmc_resolver)
        return self._cache['problem']

    def budget(self) -> Budget:
        if 'budget' not in self._cache:
            self._cache['budget'] = calibrate_budget(self.problem(), self.mode)
        return self._cache['budget']

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(seed=self.seed + seed_offset, epochs=self.epochs)


@dataclass
class BenchReport:
    """Tabular result of one experiment."""
    name: str
    columns: List[str]
    rows: List[List[Any]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def as_text(self) -> str:
        cells = [self.columns] + [[_cell(v) for v in row] for row in self.rows]
        widths = [max(len(str(row[i])) for row in cells) for i in range(len(self.columns))]
        lines = [f"== {self.name} =="]
        for index, row in enumerate(cells):
            lines.append("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
            if index == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines += [f"# {note}" for note in self.notes]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str) -> Tuple[str, str]:
        """Write <name>.csv and <name>.txt into out_dir."""
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{self.name}.csv")
        txt_path = os.path.join(out_dir, f"{self.name}.txt")
        with open(csv_path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        with open(txt_path, 'w') as f:
            f.write(self.as_text())
        return csv_path, txt_path


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


class ExperimentRegistry:
    """Name -> experiment function."""

    def __init__(self):
        self._experiments: Dict[str, Tuple[Callable[[BenchContext], BenchReport], str]] = {}

    def experiment(self, name: str, description: str = ""):
        def decorator(func: Callable[[BenchContext], BenchReport]):
            self._experiments[name] = (func, description or (func.__doc__ or "").strip().splitlines()[0])
            return func
        return decorator

    def names(self) -> List[str]:
        return sorted(self._experiments)

    def describe(self) -> Dict[str, str]:
        return {name: self._experiments[name][1] for name in self.names()}

    def run(self, name: str, ctx: BenchContext) -> BenchReport:
        if name not in self._experiments:
            raise ConfigError(f"Unknown experiment '{name}', expected one of: {', '.join(self.names())}")
        logger.info(f"🔬 Running experiment {name}")
        return self._experiments[name][0](ctx)


# SYNTHETIC DATA

def noisy_ranking_pair(n: int, rng: np.random.Generator, noise: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Log-normal truths and predictions perturbed by multiplicative log-normal noise."""
    truth = rng.lognormal(mean=0.0, sigma=1.0, size=n)
    pred = truth * np.exp(noise * rng.standard_normal(n))
    return truth, pred


def heavy_tailed_dataset(space: SearchSpace, count: int, rng: np.random.Generator,
                         heavy_fraction: float = 0.2) -> Dataset:
    """
    Raw dataset with a smooth fitness landscape for most samples and, for
    `heavy_fraction` of them, huge or infinite values unrelated to the parameters.
    """
    vectors = [random_vector(space, rng) for _ in range(count)]
    X = normalize_many(space, vectors)
    centre = rng.random(space.dimension)
    weights = 0.5 + rng.random(space.dimension)
    values = 1.0 + ((X - centre) ** 2) @ weights
    heavy = rng.random(count) < heavy_fraction
    infinite = heavy & (rng.random(count) < 0.5)
    values = np.where(heavy, values * (100.0 + 900.0 * rng.random(count)), values)
    values = np.where(infinite, np.inf, values)
    samples = [FitnessSample(v, FitnessResult(value=float(value), converged=bool(np.isfinite(value)),
                                              mode=FitnessMode.WORK_UNITS))
               for v, value in zip(vectors, values)]
    return Dataset(fingerprint=fingerprint(space), samples=samples, parameter_names=space.names)


def _solver_dataset(ctx: BenchContext) -> Dataset:
    if 'dataset' not in ctx._cache:
        if ctx.dataset_path:
            ctx._cache['dataset'] = load_dataset(ctx.dataset_path, ctx.space())
        else:
            rng = np.random.default_rng(ctx.seed)
            checkpoint = os.path.join(ctx.out_dir, "bench_samples.csv.part")
            os.makedirs(ctx.out_dir, exist_ok=True)
            ctx._cache['dataset'] = sample_dataset(ctx.problem(), ctx.space(), ctx.samples, rng, ctx.budget(),
                                                   checkpoint_path=checkpoint, jobs=ctx.jobs)
    return ctx._cache['dataset']


def _trained_surrogate(ctx: BenchContext) -> MlpModel:
    if 'model' not in ctx._cache:
        balanced = balance(_solver_dataset(ctx))
        train_set, _ = split(balanced, ctx.validation_fraction, np.random.default_rng(ctx.seed))
        ctx._cache['model'] = train(train_set, ctx.space(), ctx.train_config())
    return ctx._cache['model']


def _tuning_trials(ctx: BenchContext, es_cfg: EsConfig) -> List[Tuple[float, int]]:
    """(best fitness, evaluations) for ctx.trials seeded runs."""
    results = []
    for trial in range(ctx.trials):
        cfg = replace(es_cfg, seed=ctx.seed + trial)
        try:
            _, trace = run(ctx.problem(), ctx.space(), cfg, ctx.budget(), jobs=ctx.jobs)
            results.append((trace.best[1].value, trace.total_evaluations))
        except InfeasibleError as e:
            logger.warning(f"⚠️ Trial {trial} found no feasible configuration: {e}")
            results.append((math.inf, e.trace.total_evaluations if e.trace else 0))
    return results


def _summary_row(label: str, results: Sequence[Tuple[float, int]]) -> List[Any]:
    values = np.array([r[0] for r in results])
    finite = values[np.isfinite(values)]
    evaluations = np.array([r[1] for r in results])
    std = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
    return [label, len(results), float(finite.mean()) if len(finite) else math.inf, std,
            float(finite.min()) if len(finite) else math.inf, float(np.median(evaluations))]


SUMMARY_COLUMNS = ['variant', 'trials', 'mean_fitness', 'std_fitness', 'best_fitness', 'median_evaluations']


def create_bench_experiments(registry: ExperimentRegistry):
    """Register every experiment on `registry`."""

    @registry.experiment("f-alpha-vs-nv")
    def f_alpha_vs_validation_size(ctx: BenchContext) -> BenchReport:
        """Spread of F_0.05 over 5 re-splits as the validation set grows (synthetic noisy ranking)."""
        rng = np.random.default_rng(ctx.seed)
        truth, pred = noisy_ranking_pair(20000, rng)
        report = BenchReport("f-alpha-vs-nv", ['n_validation', 'mean_f_alpha', 'std_f_alpha'])
        for n_valid in (100, 200, 500, 1000, 2000, 5000):
            scores = []
            for _ in range(5):
                chosen = rng.choice(len(truth), size=n_valid, replace=False)
                scores.append(f_alpha(truth[chosen], pred[chosen], 0.05))
            report.rows.append([n_valid, float(np.mean(scores)), float(np.std(scores, ddof=1))])
        report.notes.append("alpha = 0.05, 5 random validation subsets per size")
        return report

    @registry.experiment("balancing")
    def balancing_comparison(ctx: BenchContext) -> BenchReport:
        """Surrogate quality trained on unbalanced vs balanced data (heavy-tailed synthetic by default)."""
        space = ctx.space()
        rng = np.random.default_rng(ctx.seed)
        raw = load_dataset(ctx.dataset_path, space) if ctx.dataset_path else heavy_tailed_dataset(space, 3000, rng)
        train_raw, valid_raw = split(raw, ctx.validation_fraction, rng)
        raw_truth = valid_raw.values()

        report = BenchReport("balancing", ['dataset', 'r_squared', 'f_0.05', 'f_improvement_percent'])
        scores = {}
        for stage, prepare in (("unbalanced", unbalance), ("balanced", balance)):
            train_set = prepare(train_raw)
            model = train(train_set, space, ctx.train_config(), allow_unbalanced=True)
            pred = predict(model, space, valid_raw.vectors())
            stage_truth = prepare(valid_raw).values()
            scores[stage] = f_alpha(raw_truth, pred, 0.05)
            report.rows.append([stage, r_squared(stage_truth, pred), scores[stage], 0.0])
        if scores["unbalanced"] > 0:
            report.rows[1][3] = 100.0 * (scores["balanced"] - scores["unbalanced"]) / scores["unbalanced"]
        report.notes.append("F_0.05 ranks against the raw validation values; R2 against the same-stage values")
        return report

    @registry.experiment("nn-filter")
    def nn_filter_effect(ctx: BenchContext) -> BenchReport:
        """Optimized fitness with and without the surrogate filter on random mutation."""
        model = _trained_surrogate(ctx)
        base = EsConfig(lambda_s=5, lambda_r=10, alpha=0.05, trial_pool=ctx.trial_pool)
        report = BenchReport("nn-filter", SUMMARY_COLUMNS)
        report.rows.append(_summary_row("without-filter", _tuning_trials(ctx, base)))
        filtered = replace(base, use_nn_filter=True, model=model)
        report.rows.append(_summary_row("with-filter", _tuning_trials(ctx, filtered)))
        report.notes.append(f"{base.label()}, alpha = {base.alpha}, problem {ctx.problem_spec}, {ctx.mode.value}")
        return report

    @registry.experiment("mutation-ratio")
    def mutation_ratio(ctx: BenchContext) -> BenchReport:
        """Soft/random mutation ratios with the surrogate filter."""
        model = _trained_surrogate(ctx)
        report = BenchReport("mutation-ratio", SUMMARY_COLUMNS)
        for lambda_s, lambda_r in ((5, 5), (5, 10), (10, 5), (10, 10)):
            es_cfg = EsConfig(lambda_s=lambda_s, lambda_r=lambda_r, alpha=0.05, trial_pool=ctx.trial_pool,
                              use_nn_filter=True, model=model)
            report.rows.append(_summary_row(es_cfg.label(), _tuning_trials(ctx, es_cfg)))
        report.notes.append(f"alpha = 0.05, problem {ctx.problem_spec}, {ctx.mode.value}")
        return report

    @registry.experiment("alpha-sweep")
    def alpha_sweep(ctx: BenchContext) -> BenchReport:
        """Optimized fitness for decreasing alpha (S5/R5)."""
        model = _trained_surrogate(ctx)
        report = BenchReport("alpha-sweep", SUMMARY_COLUMNS)
        for alpha in (0.2, 0.05, 0.01, 0.002):
            es_cfg = EsConfig(lambda_s=5, lambda_r=5, alpha=alpha, trial_pool=ctx.trial_pool,
                              use_nn_filter=True, model=model)
            report.rows.append(_summary_row(f"alpha={alpha}", _tuning_trials(ctx, es_cfg)))
        report.notes.append(f"S5/R5, trial pool {ctx.trial_pool}, problem {ctx.problem_spec}")
        return report

    @registry.experiment("training-size")
    def training_size(ctx: BenchContext) -> BenchReport:
        """Hold-out R2 and F_0.05 against the number of training samples."""
        space = ctx.space()
        balanced = balance(_solver_dataset(ctx))
        train_full, valid = split(balanced, ctx.validation_fraction, np.random.default_rng(ctx.seed))
        report = BenchReport("training-size", ['n_train', 'epochs', 'r_squared', 'f_0.05'])
        sizes = sorted({n for n in (250, 500, 1000, 2000, 5000, 10000, 20000, 45000) if n < len(train_full)}
                       | {len(train_full)})
        for n_train in sizes:
            subset = train_full.subset(range(n_train))
            model = train(subset, space, ctx.train_config())
            metrics = evaluate_predictions(valid.values(), predict(model, space, valid.vectors()), (0.05,))
            report.rows.append([n_train, model.info['epochs'], metrics.r_squared, metrics.f_alpha.get(0.05, 0.0)])
        report.notes.append(f"{len(valid)} hold-out samples from {ctx.problem_spec}")
        return report


REGISTRY = ExperimentRegistry()
create_bench_experiments(REGISTRY)


def run_experiment(name: str, ctx: BenchContext) -> BenchReport:
    return REGISTRY.run(name, ctx)
