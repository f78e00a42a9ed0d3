#!/usr/bin/env python3
"""
Hybrid evolution strategy
(1+lambda)-ES with plus selection. Offspring come from soft mutation of the
parent and from random mutation, optionally pre-filtered by a surrogate network.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from amg_solver import SolverConfig
from fitness_evaluator import Budget, FitnessResult, evaluate_many
from param_space import (ParameterVector, SearchSpace, cardinality, decode, fingerprint, random_vector,
                         soft_mutate, try_encode)
from sparse_core import Problem
from surrogate_net import MlpModel, predict
from tuner_errors import ConfigError, FingerprintMismatchError, InfeasibleError

logger = logging.getLogger(__name__)

Predictor = Callable[[List[ParameterVector]], np.ndarray]


class StopReason(Enum):
    STALL = "stall"
    MAX_GENERATIONS = "max_generations"


@dataclass
class EsConfig:
    """
    Strategy settings. `predictor` may replace `model` as the ranking used by
    the random-mutation filter (any callable mapping vectors to scores).
    """
    lambda_s: int = 5
    lambda_r: int = 5
    alpha: float = 0.002
    trial_pool: int = 5000
    use_nn_filter: bool = False
    model: Optional[MlpModel] = None
    predictor: Optional[Predictor] = None
    stall_window: int = 5
    max_generations: int = 50
    seed: int = 0
    stay_probability: float = 0.5
    inject_default: bool = True
    max_restarts: int = 3
    stall_tolerance: float = 1e-12

    @property
    def lam(self) -> int:
        return self.lambda_s + self.lambda_r

    @property
    def filtered_pool(self) -> int:
        """L_alpha = ceil(alpha * L)."""
        return int(math.ceil(self.alpha * self.trial_pool - 1e-9))

    def validate(self) -> "EsConfig":
        problems = []
        if self.lambda_s < 0 or self.lambda_r < 0 or self.lam < 1:
            problems.append(f"need lambda_s, lambda_r >= 0 and lambda >= 1 (S{self.lambda_s}/R{self.lambda_r})")
        has_ranking = self.model is not None or self.predictor is not None
        if self.use_nn_filter and not has_ranking:
            problems.append("use_nn_filter needs a model")
        if not self.use_nn_filter and self.model is not None:
            problems.append("a model was given but use_nn_filter is off")
        if self.use_nn_filter:
            if not 0.0 < self.alpha <= 1.0:
                problems.append(f"alpha={self.alpha} not in (0, 1]")
            elif self.lambda_r > self.filtered_pool:
                problems.append(f"lambda_r={self.lambda_r} exceeds the filtered pool "
                                f"ceil(alpha * L) = {self.filtered_pool}")
        if self.stall_window < 1 or self.max_generations < 1:
            problems.append("stall_window and max_generations must be at least 1")
        if not 0.0 <= self.stay_probability <= 1.0:
            problems.append(f"stay_probability={self.stay_probability} not in [0, 1]")
        if problems:
            raise ConfigError("Invalid strategy configuration: " + "; ".join(problems))
        return self

    def label(self) -> str:
        return f"S{self.lambda_s}/R{self.lambda_r}"


@dataclass
class Generation:
    index: int
    individuals: List[Tuple[ParameterVector, FitnessResult]]
    best: Tuple[ParameterVector, FitnessResult]
    evaluations: int

    @property
    def best_fitness(self) -> float:
        return self.best[1].value


@dataclass
class OptimizationTrace:
    generations: List[Generation] = field(default_factory=list)
    total_evaluations: int = 0
    stop_reason: Optional[StopReason] = None
    elapsed: float = 0.0

    def best_history(self) -> List[float]:
        return [g.best_fitness for g in self.generations]

    @property
    def best(self) -> Optional[Tuple[ParameterVector, FitnessResult]]:
        return self.generations[-1].best if self.generations else None


# OPERATORS

def soft_offspring(space: SearchSpace, parent: ParameterVector, rng: np.random.Generator,
                   stay_probability: float = 0.5) -> ParameterVector:
    return soft_mutate(space, parent, rng, stay_probability)


def _ranking(space: SearchSpace, es_cfg: EsConfig) -> Predictor:
    if es_cfg.predictor is not None:
        return es_cfg.predictor
    return lambda vectors: predict(es_cfg.model, space, vectors)


def random_mutation(space: SearchSpace, es_cfg: EsConfig, rng: np.random.Generator) -> List[ParameterVector]:
    """
    lambda_r random vectors. With the filter on, L random trial vectors are
    ranked by the surrogate, the ceil(alpha * L) least predicted are kept and
    lambda_r of them are drawn without replacement.
    """
    if not es_cfg.use_nn_filter:
        return [random_vector(space, rng) for _ in range(es_cfg.lambda_r)]

    pool = [random_vector(space, rng) for _ in range(es_cfg.trial_pool)]
    scores = np.asarray(_ranking(space, es_cfg)(pool), dtype=np.float64)
    best = np.argsort(scores, kind='stable')[:es_cfg.filtered_pool]
    chosen = rng.choice(len(best), size=es_cfg.lambda_r, replace=False)
    return [pool[int(best[i])] for i in chosen]


def stopping(trace: Union[OptimizationTrace, Sequence[float]], stall_window: int = 5, max_generations: int = 50,
             tolerance: float = 1e-12) -> Optional[StopReason]:
    """
    STALL when the best fitness did not strictly decrease over the last
    `stall_window` generations; MAX_GENERATIONS once that many generations exist.
    """
    history = trace.best_history() if isinstance(trace, OptimizationTrace) else list(trace)
    if not history:
        raise ValueError("stopping needs at least one generation")
    if len(history) > stall_window:
        old, new = history[-1 - stall_window], history[-1]
        if not _improved(old, new, tolerance):
            return StopReason.STALL
    if len(history) >= max_generations:
        return StopReason.MAX_GENERATIONS
    return None


def _improved(old: float, new: float, tolerance: float) -> bool:
    if math.isinf(old):
        return not math.isinf(new)
    return old - new > tolerance * abs(old)


def _select(candidates: List[Tuple[ParameterVector, FitnessResult]]) -> Tuple[ParameterVector, FitnessResult]:
    """Lowest fitness; the earliest candidate wins ties."""
    best = candidates[0]
    for candidate in candidates[1:]:
        if candidate[1].value < best[1].value:
            best = candidate
    return best


class _CachedEvaluator:
    def __init__(self, problem: Problem, space: SearchSpace, budget: Budget, jobs: int):
        self.problem = problem
        self.space = space
        self.budget = budget
        self.jobs = jobs
        self.cache: Dict[ParameterVector, FitnessResult] = {}
        self.evaluations = 0

    def __call__(self, vectors: Sequence[ParameterVector]) -> Tuple[List[Tuple[ParameterVector, FitnessResult]], int]:
        fresh = list(dict.fromkeys(v for v in vectors if v not in self.cache))
        if fresh:
            for v, result in zip(fresh, evaluate_many(self.problem, self.space, fresh, self.budget, self.jobs)):
                self.cache[v] = result
        self.evaluations += len(fresh)
        return [(v, self.cache[v]) for v in vectors], len(fresh)


def run(problem: Problem, space: SearchSpace, es_cfg: EsConfig, budget: Budget, jobs: int = 1,
        default_cfg: Optional[SolverConfig] = None) -> Tuple[SolverConfig, OptimizationTrace]:
    """
    Tune the solver configuration for `problem`.

    Args:
        problem: Linear system to tune for
        space: Search space
        es_cfg: Strategy settings
        budget: Per-evaluation budget (also selects the fitness mode)
        jobs: Worker processes for work_units evaluations
        default_cfg: Configuration injected into generation 0 when it is on the grid

    Returns:
        (best configuration, trace)

    Raises:
        InfeasibleError: no configuration converged
    """
    es_cfg.validate()
    if es_cfg.model is not None and es_cfg.model.fingerprint != fingerprint(space):
        raise FingerprintMismatchError("surrogate model was trained on a different search space")

    start = time.perf_counter()
    rng = np.random.default_rng(es_cfg.seed)
    evaluator = _CachedEvaluator(problem, space, budget, jobs)
    trace = OptimizationTrace()

    default_vector = None
    if es_cfg.inject_default:
        default_vector = try_encode(space, default_cfg or SolverConfig())
        if default_vector is None:
            logger.warning("⚠️ Default configuration is not on the search grid; starting from random vectors only")

    generation = None
    for attempt in range(es_cfg.max_restarts + 1):
        seeds = [default_vector] if default_vector is not None else []
        seeds += [random_vector(space, rng) for _ in range(es_cfg.lam + 1 - len(seeds))]
        individuals, evaluations = evaluator(seeds)
        generation = Generation(0, individuals, _select(individuals), evaluations)
        if math.isfinite(generation.best_fitness):
            break
        logger.warning(f"⚠️ Generation 0 has no converging configuration (attempt {attempt + 1})")
    trace.generations.append(generation)
    logger.info(f"Generation 0: best fitness {generation.best_fitness:.6g}")

    if not math.isfinite(generation.best_fitness):
        trace.total_evaluations = evaluator.evaluations
        trace.elapsed = time.perf_counter() - start
        raise InfeasibleError("no feasible configuration found", trace)

    if cardinality(space) == 1:
        trace.stop_reason = StopReason.STALL
    else:
        trace.stop_reason = stopping(trace, es_cfg.stall_window, es_cfg.max_generations, es_cfg.stall_tolerance)

    while trace.stop_reason is None:
        parent = trace.generations[-1].best
        offspring = [soft_offspring(space, parent[0], rng, es_cfg.stay_probability) for _ in range(es_cfg.lambda_s)]
        offspring += random_mutation(space, es_cfg, rng)
        individuals, evaluations = evaluator(offspring)
        index = len(trace.generations)
        best = _select([parent] + individuals)
        trace.generations.append(Generation(index, individuals, best, evaluations))
        logger.debug(f"Generation {index}: best fitness {best[1].value:.6g}, {evaluations} new evaluations")
        trace.stop_reason = stopping(trace, es_cfg.stall_window, es_cfg.max_generations, es_cfg.stall_tolerance)

    trace.total_evaluations = evaluator.evaluations
    trace.elapsed = time.perf_counter() - start
    best_vector, best_fitness = trace.best
    logger.info(f"✅ {es_cfg.label()} stopped ({trace.stop_reason.value}) after {len(trace.generations)} generations, "
                f"{trace.total_evaluations} evaluations, best fitness {best_fitness.value:.6g}")
    return decode(space, best_vector), trace


def write_trace(trace: OptimizationTrace, path: str):
    """One CSV row per generation: index, best fitness, cumulative evaluations."""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['generation', 'best_fitness', 'evaluations'])
        total = 0
        for generation in trace.generations:
            total += generation.evaluations
            writer.writerow([generation.index, repr(generation.best_fitness), total])
