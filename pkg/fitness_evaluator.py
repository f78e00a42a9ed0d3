#!/usr/bin/env python3
"""
Fitness evaluator
Measures solver fitness for parameter vectors, samples random datasets and
prepares them (Q3 balancing, splitting) for surrogate training.
"""

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from amg_solver import SolveOutcome, SolverConfig, bicgstab_solve, build_hierarchy
from param_space import ParameterVector, SearchSpace, decode, fingerprint, random_vector
from sparse_core import Problem
from tuner_errors import ConfigError, DatasetError, FingerprintMismatchError, HesTunerError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "hes-dataset v1"
DEFAULT_REPEATS = 3
DEFAULT_TIMEOUT_FACTOR = 20.0
INFINITE_FITNESS = math.inf


class FitnessMode(Enum):
    """What the fitness value measures."""
    WALL_TIME = "wall_time"
    WORK_UNITS = "work_units"


class DatasetStage(Enum):
    """Preparation stage of a dataset."""
    RAW = "raw"
    UNBALANCED = "unbalanced"
    BALANCED = "balanced"


@dataclass(frozen=True)
class Budget:
    """Limits applied to one fitness evaluation."""
    mode: FitnessMode = FitnessMode.WORK_UNITS
    outer_max_iters: Optional[int] = None
    timeout: Optional[float] = None
    max_work_units: Optional[float] = None
    repeats: int = DEFAULT_REPEATS


@dataclass
class FitnessResult:
    """Fitness of one configuration; non-converged results carry the infinite sentinel."""
    value: float
    converged: bool
    mode: FitnessMode
    outcome: Optional[SolveOutcome] = field(default=None, repr=False)
    reason: str = ""

    @classmethod
    def infeasible(cls, mode: FitnessMode, reason: str, outcome: Optional[SolveOutcome] = None) -> "FitnessResult":
        return cls(value=INFINITE_FITNESS, converged=False, mode=mode, outcome=outcome, reason=reason)


@dataclass(frozen=True)
class FitnessSample:
    vector: ParameterVector
    fitness: FitnessResult


@dataclass
class Dataset:
    """Fitness samples of one search space."""
    fingerprint: str
    samples: List[FitnessSample]
    stage: DatasetStage = DatasetStage.RAW
    q3: Optional[float] = None
    mode: FitnessMode = FitnessMode.WORK_UNITS
    parameter_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def values(self) -> np.ndarray:
        return np.array([s.fitness.value for s in self.samples], dtype=np.float64)

    def vectors(self) -> List[ParameterVector]:
        return [s.vector for s in self.samples]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in indices])

    def non_converged_fraction(self) -> float:
        if not self.samples:
            return 0.0
        return 1.0 - float(np.isfinite(self.values()).sum()) / len(self.samples)


# EVALUATION

def evaluate(problem: Problem, space: SearchSpace, v: ParameterVector, budget: Budget) -> FitnessResult:
    """
    Fitness of vector `v` on `problem`. Setup failures, breakdowns, timeouts and
    non-convergence all yield the infinite sentinel; nothing is raised.
    """
    try:
        cfg = decode(space, v)
        if budget.outer_max_iters is not None:
            cfg = replace(cfg, outer_max_iters=budget.outer_max_iters)
        return evaluate_config(problem, cfg, budget)
    except HesTunerError as e:
        return FitnessResult.infeasible(budget.mode, f"invalid configuration: {e}")


def evaluate_config(problem: Problem, cfg: SolverConfig, budget: Budget) -> FitnessResult:
    with np.errstate(all='ignore'):
        try:
            hierarchy = build_hierarchy(problem.matrix, cfg)
        except (HesTunerError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            logger.debug(f"Setup failed: {e}")
            return FitnessResult.infeasible(budget.mode, f"setup failed: {e}")

        repeats = budget.repeats if budget.mode == FitnessMode.WALL_TIME else 1
        times = []
        outcome = None
        for _ in range(max(1, repeats)):
            deadline = time.perf_counter() + budget.timeout if budget.timeout is not None else None
            try:
                outcome = bicgstab_solve(problem.matrix, problem.rhs, hierarchy, cfg,
                                         max_work_units=budget.max_work_units, deadline=deadline)
            except (HesTunerError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
                return FitnessResult.infeasible(budget.mode, f"solve failed: {e}")
            if not outcome.converged:
                return FitnessResult.infeasible(budget.mode, outcome.reason, outcome)
            times.append(outcome.wall_time)

    if budget.mode == FitnessMode.WALL_TIME:
        value = float(np.median(times))
    else:
        value = float(outcome.work_units)
    return FitnessResult(value=value, converged=True, mode=budget.mode, outcome=outcome, reason="converged")


def calibrate_budget(problem: Problem, mode: FitnessMode, default_cfg: Optional[SolverConfig] = None,
                     timeout_factor: float = DEFAULT_TIMEOUT_FACTOR, repeats: int = DEFAULT_REPEATS) -> Budget:
    """
    Budget capped at `timeout_factor` times the cost of the default configuration:
    wall-clock seconds in wall_time mode, work units in work_units mode.
    """
    cfg = default_cfg or SolverConfig()
    reference = evaluate_config(problem, cfg, Budget(mode=mode, repeats=1))
    if not reference.converged or reference.outcome is None:
        logger.warning(f"Default configuration does not converge on {problem.name} ({reference.reason}); "
                       f"no cost cap applied")
        return Budget(mode=mode, repeats=repeats)
    if mode == FitnessMode.WALL_TIME:
        return Budget(mode=mode, repeats=repeats,
                      timeout=timeout_factor * max(reference.outcome.wall_time, 1e-3))
    return Budget(mode=mode, repeats=repeats, max_work_units=timeout_factor * reference.outcome.work_units)


_WORKER_STATE: Dict[str, Any] = {}


def _init_worker(problem: Problem, space: SearchSpace, budget: Budget):
    _WORKER_STATE['args'] = (problem, space, budget)


def _worker_evaluate(indices: Tuple[int, ...]) -> Tuple[float, bool, str]:
    problem, space, budget = _WORKER_STATE['args']
    result = evaluate(problem, space, ParameterVector(indices), budget)
    return result.value, result.converged, result.reason


def evaluate_many(problem: Problem, space: SearchSpace, vectors: Sequence[ParameterVector], budget: Budget,
                  jobs: int = 1) -> List[FitnessResult]:
    """
    Evaluate vectors in order. work_units mode may use a process pool; wall_time
    mode always runs serially so timings do not contend.
    """
    if jobs <= 1 or budget.mode == FitnessMode.WALL_TIME or len(vectors) < 2:
        return [evaluate(problem, space, v, budget) for v in vectors]

    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(problem, space, budget)) as pool:
        raw = list(pool.map(_worker_evaluate, [v.indices for v in vectors]))
    return [FitnessResult(value=value, converged=converged, mode=budget.mode, reason=reason)
            for value, converged, reason in raw]


def sample_dataset(problem: Problem, space: SearchSpace, count: int, rng: np.random.Generator, budget: Budget,
                   checkpoint_path: Optional[str] = None, jobs: int = 1, chunk_size: int = 32) -> Dataset:
    """
    Evaluate `count` uniform random vectors.

    All vectors are drawn up front, so a run resumed from `checkpoint_path`
    continues with exactly the vectors an uninterrupted run would use.

    Returns:
        Raw dataset in draw order
    """
    if count < 1:
        raise DatasetError(f"sample count must be at least 1, got {count}")
    space_fp = fingerprint(space)
    vectors = [random_vector(space, rng) for _ in range(count)]
    dataset = Dataset(fingerprint=space_fp, samples=[], mode=budget.mode, parameter_names=space.names)

    if checkpoint_path and os.path.exists(checkpoint_path):
        previous = load_dataset(checkpoint_path)
        if previous.fingerprint != space_fp:
            raise FingerprintMismatchError(f"checkpoint {checkpoint_path} belongs to a different search space")
        done = previous.samples[:count]
        if [s.vector for s in done] != vectors[:len(done)]:
            raise DatasetError(f"checkpoint {checkpoint_path} was sampled with a different seed or count")
        dataset.samples.extend(done)
        logger.info(f"📂 Resuming from checkpoint with {len(done)}/{count} samples")
    elif checkpoint_path:
        save_dataset(dataset, checkpoint_path)

    step = max(chunk_size, jobs)
    while len(dataset.samples) < count:
        chunk = vectors[len(dataset.samples):len(dataset.samples) + step]
        results = evaluate_many(problem, space, chunk, budget, jobs=jobs)
        new_samples = [FitnessSample(v, r) for v, r in zip(chunk, results)]
        dataset.samples.extend(new_samples)
        if checkpoint_path:
            _append_samples(checkpoint_path, new_samples)
        logger.debug(f"Sampled {len(dataset.samples)}/{count}")

    logger.info(f"✅ Sampled {count} configurations, {100.0 * dataset.non_converged_fraction():.1f}% non-converged")
    return dataset


# DATASET PREPARATION

def upper_quartile(values: np.ndarray) -> float:
    """Linear-interpolation (type 7) 0.75 quantile."""
    return float(np.quantile(values, 0.75))


def _finite_q3(d: Dataset) -> float:
    values = d.values()
    finite = values[np.isfinite(values)]
    if len(finite) < 4:
        raise DatasetError(f"at least 4 finite samples are needed for the upper quartile, found {len(finite)}")
    return upper_quartile(finite)


def _with_values(d: Dataset, values: np.ndarray, stage: DatasetStage, q3: float) -> Dataset:
    samples = [FitnessSample(s.vector, replace(s.fitness, value=float(value), outcome=None))
               for s, value in zip(d.samples, values)]
    return replace(d, samples=samples, stage=stage, q3=q3)


def unbalance(d: Dataset) -> Dataset:
    """Replace only the non-converged (infinite) values with Q3 of the finite ones."""
    if d.stage != DatasetStage.RAW:
        raise DatasetError(f"unbalance expects a raw dataset, got {d.stage.value}")
    q3 = _finite_q3(d)
    values = d.values()
    values[~np.isfinite(values)] = q3
    return _with_values(d, values, DatasetStage.UNBALANCED, q3)


def balance(d: Dataset) -> Dataset:
    """
    Replace every value above Q3, and every infinite value, by Q3 of the finite values.
    Values at or below Q3 are untouched. Balanced datasets are returned as they are.
    """
    if d.stage == DatasetStage.BALANCED:
        return replace(d, samples=list(d.samples))
    q3 = d.q3 if d.stage == DatasetStage.UNBALANCED else _finite_q3(d)
    values = d.values()
    values[~np.isfinite(values) | (values > q3)] = q3
    return _with_values(d, values, DatasetStage.BALANCED, q3)


def split(d: Dataset, validation_fraction: float, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Random hold-out split into (train, validation)."""
    if not 0.0 < validation_fraction < 1.0:
        raise DatasetError(f"validation fraction must be in (0, 1), got {validation_fraction}")
    n = len(d)
    n_val = int(round(validation_fraction * n))
    if n_val == 0 or n_val == n:
        raise DatasetError(f"validation fraction {validation_fraction} leaves an empty side for {n} samples")
    order = rng.permutation(n)
    return d.subset(order[n_val:].tolist()), d.subset(order[:n_val].tolist())


def dataset_stats(d: Dataset) -> Dict[str, Any]:
    """Summary numbers reported by the `stats` command."""
    values = d.values()
    finite = values[np.isfinite(values)]
    stats = {
        'samples': len(d),
        'stage': d.stage.value,
        'mode': d.mode.value,
        'non_converged_percent': 100.0 * d.non_converged_fraction(),
        'flagged_non_converged': sum(1 for s in d.samples if not s.fitness.converged),
        'q3': d.q3 if d.q3 is not None else (upper_quartile(finite) if len(finite) >= 4 else None),
        'min': float(finite.min()) if len(finite) else None,
        'median': float(np.median(finite)) if len(finite) else None,
        'max': float(finite.max()) if len(finite) else None,
    }
    return stats


# FILE FORMAT

def _header_lines(d: Dataset) -> List[str]:
    lines = [DATASET_FORMAT, f"fingerprint: {d.fingerprint}", f"stage: {d.stage.value}", f"mode: {d.mode.value}"]
    if d.q3 is not None:
        lines.append(f"q3: {d.q3!r}")
    if d.parameter_names:
        lines.append("parameters: " + " ".join(d.parameter_names))
    return [f"# {line}\n" for line in lines]


def _row(sample: FitnessSample) -> List[str]:
    return [str(i) for i in sample.vector.indices] + [repr(float(sample.fitness.value)),
                                                     "1" if sample.fitness.converged else "0"]


def save_dataset(d: Dataset, path: str):
    """Write the header and every sample (indices, fitness, converged flag) as CSV rows."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        f.writelines(_header_lines(d))
        writer = csv.writer(f)
        for sample in d.samples:
            writer.writerow(_row(sample))


def _append_samples(path: str, samples: Sequence[FitnessSample]):
    with open(path, 'a', newline='') as f:
        writer = csv.writer(f)
        for sample in samples:
            writer.writerow(_row(sample))


def load_dataset(path: str, space: Optional[SearchSpace] = None) -> Dataset:
    """
    Read a dataset file. When `space` is given its fingerprint must match the header.
    """
    header: Dict[str, str] = {}
    rows: List[List[str]] = []
    with open(path, 'r', newline='') as f:
        first = f.readline().strip()
        if first != f"# {DATASET_FORMAT}":
            raise DatasetError(f"{path}: not a dataset file (expected '# {DATASET_FORMAT}')")
        body = []
        for line in f:
            if line.startswith('#'):
                key, _, value = line[1:].partition(':')
                header[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
        rows = list(csv.reader(body))

    if 'fingerprint' not in header:
        raise DatasetError(f"{path}: header has no fingerprint")
    try:
        stage = DatasetStage(header.get('stage', 'raw'))
        mode = FitnessMode(header.get('mode', 'work_units'))
        q3 = float(header['q3']) if 'q3' in header else None
    except ValueError as e:
        raise DatasetError(f"{path}: bad header value: {e}")

    samples = []
    width = None
    for row_no, row in enumerate(rows, start=1):
        if width is None:
            width = len(row)
        if len(row) != width or len(row) < 2:
            raise DatasetError(f"{path}: sample {row_no} has {len(row)} fields, expected {width}")
        try:
            indices = tuple(int(x) for x in row[:-2])
            value = float(row[-2])
            converged = row[-1].strip() == "1"
        except ValueError:
            raise DatasetError(f"{path}: sample {row_no} is malformed")
        samples.append(FitnessSample(ParameterVector(indices),
                                     FitnessResult(value=value, converged=converged, mode=mode)))

    names = header.get('parameters', '').split()
    dataset = Dataset(fingerprint=header['fingerprint'], samples=samples, stage=stage, q3=q3, mode=mode,
                      parameter_names=names)
    if space is not None:
        check_fingerprint(dataset, space, path)
    return dataset


def check_fingerprint(d: Dataset, space: SearchSpace, source: str = "dataset"):
    expected = fingerprint(space)
    if d.fingerprint != expected:
        raise FingerprintMismatchError(
            f"{source} was built for search space {d.fingerprint[:12]}, not {expected[:12]}")


def parse_mode(text: str) -> FitnessMode:
    try:
        return FitnessMode(text.strip().lower().replace('-', '_'))
    except ValueError:
        raise ConfigError(f"Unknown fitness mode '{text}', expected wall-time or work-units")
