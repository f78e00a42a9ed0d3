#!/usr/bin/env python3
"""
AMG solver
BiCGStab outer iteration with a classical algebraic multigrid preconditioner,
Chebyshev polynomial smoothing and a dense LU solve on the coarsest level.

Every operation counts work units: the nnz of each operator applied in a
spmv-equivalent step. This gives a deterministic cost next to wall time.
"""

import heapq
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from sparse_core import CsrMatrix, DenseVector
from tuner_errors import ConfigError, DimensionMismatchError, HierarchyError

logger = logging.getLogger(__name__)

BREAKDOWN_TOL = 1e-30
POWER_ITERATIONS = 10
STALL_RATIO = 0.9
MAX_LEVELS = 25
MAX_DENSE_COARSE = 5000


class CycleType(Enum):
    """Multigrid cycle shapes."""
    V = "V"
    W = "W"
    F = "F"


class Coarsening(Enum):
    """Coarse/fine splitting algorithms."""
    CLASSICAL_RS = "classical_rs"
    PMIS_LIKE = "pmis_like"


class Interpolation(Enum):
    """Interpolation operator families."""
    DIRECT = "direct"
    CLASSICAL = "classical"


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of the BiCGStab + AMG + Chebyshev stack."""
    cycle: CycleType = CycleType.V
    precond_iters: int = 1
    max_row_sum: float = 1.0
    coarse_matrix_size: int = 500
    coarsening: Coarsening = Coarsening.CLASSICAL_RS
    interpolation: Interpolation = Interpolation.CLASSICAL
    strength_threshold: float = 0.25
    trunc_factor: float = 0.5
    p_max_elements: int = 4
    pre_cheby_order: int = 2
    pre_spectrum_fraction: float = 0.3
    post_cheby_order: int = 2
    post_spectrum_fraction: float = 0.3
    outer_max_iters: int = 50
    outer_rel_tol: float = 1e-8

    def validate(self) -> "SolverConfig":
        """Raise ConfigError listing every field outside its domain."""
        problems = []
        if self.precond_iters not in (1, 2, 3):
            problems.append(f"precond_iters={self.precond_iters} not in {{1, 2, 3}}")
        if not 0.0 < self.max_row_sum <= 1.0:
            problems.append(f"max_row_sum={self.max_row_sum} not in (0, 1]")
        if self.coarse_matrix_size < 1:
            problems.append(f"coarse_matrix_size={self.coarse_matrix_size} < 1")
        if not 0.0 <= self.strength_threshold <= 0.9:
            problems.append(f"strength_threshold={self.strength_threshold} not in [0, 0.9]")
        if not 0.0 <= self.trunc_factor <= 0.9:
            problems.append(f"trunc_factor={self.trunc_factor} not in [0, 0.9]")
        if not 0 <= self.p_max_elements <= 10:
            problems.append(f"p_max_elements={self.p_max_elements} not in [0, 10]")
        for prefix in ('pre', 'post'):
            order = getattr(self, f"{prefix}_cheby_order")
            fraction = getattr(self, f"{prefix}_spectrum_fraction")
            if not 1 <= order <= 4:
                problems.append(f"{prefix}_cheby_order={order} not in [1, 4]")
            if not 0.0 < fraction <= 0.9:
                problems.append(f"{prefix}_spectrum_fraction={fraction} not in (0, 0.9]")
        if self.outer_max_iters < 0:
            problems.append(f"outer_max_iters={self.outer_max_iters} < 0")
        if not self.outer_rel_tol > 0.0:
            problems.append(f"outer_rel_tol={self.outer_rel_tol} must be positive")
        if problems:
            raise ConfigError("Invalid solver configuration: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Enum):
                data[key] = value.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SolverConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        unknown = [key for key in data if key not in known]
        if unknown:
            raise ConfigError(f"Unknown solver config keys: {', '.join(sorted(unknown))}")
        for key, value in data.items():
            kwargs[key] = coerce_field(key, value)
        return cls(**kwargs).validate()


_ENUM_FIELDS = {'cycle': CycleType, 'coarsening': Coarsening, 'interpolation': Interpolation}
_INT_FIELDS = {'precond_iters', 'coarse_matrix_size', 'p_max_elements', 'pre_cheby_order',
               'post_cheby_order', 'outer_max_iters'}


def coerce_field(name: str, value: Any) -> Any:
    """Convert a raw value (usually text) to the type of a SolverConfig field."""
    try:
        if name in _ENUM_FIELDS:
            if isinstance(value, _ENUM_FIELDS[name]):
                return value
            return _ENUM_FIELDS[name](str(value).strip())
        if name in _INT_FIELDS:
            number = float(value)
            if number != int(number):
                raise ValueError(value)
            return int(number)
        return float(value)
    except ValueError:
        raise ConfigError(f"Invalid value {value!r} for solver config field '{name}'")


def format_solver_config(cfg: SolverConfig) -> str:
    """Flat 'name = value' text, one field per line."""
    lines = [f"{key} = {value}" for key, value in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def parse_solver_config(text: str, base: Optional[SolverConfig] = None) -> SolverConfig:
    """
    Parse the flat key-value format. Keys missing from the text keep the
    values of `base` (the defaults when None).
    """
    data = (base or SolverConfig()).to_dict()
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        if '=' not in stripped:
            raise ConfigError(f"line {line_no}: expected 'name = value', found '{line.strip()}'")
        key, value = (part.strip() for part in stripped.split('=', 1))
        if key not in data:
            raise ConfigError(f"line {line_no}: unknown solver config key '{key}'")
        data[key] = value
    return SolverConfig.from_dict(data)


def load_solver_config(path: str) -> SolverConfig:
    with open(path, 'r') as f:
        return parse_solver_config(f.read())


def save_solver_config(cfg: SolverConfig, path: str, header: Optional[str] = None):
    with open(path, 'w') as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        f.write(format_solver_config(cfg))


# HIERARCHY

@dataclass(frozen=True, eq=False)
class AmgLevel:
    """One multigrid level: operator, interpolation to it from the next level, smoother data."""
    A: CsrMatrix
    P: Optional[CsrMatrix]
    diag_inv: np.ndarray = field(repr=False)
    lambda_max: float
    pre_bounds: Tuple[float, float]
    post_bounds: Tuple[float, float]

    @property
    def size(self) -> int:
        return self.A.n_rows

    @property
    def smoother_bounds(self) -> Tuple[float, float]:
        return self.pre_bounds


@dataclass(frozen=True, eq=False)
class AmgHierarchy:
    """Levels from finest to coarsest plus the dense LU of the coarsest operator."""
    levels: List[AmgLevel]
    coarse_factorization: Any = field(repr=False)
    setup_time: float = 0.0

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> List[int]:
        return [level.size for level in self.levels]

    def operator_complexity(self) -> float:
        return sum(level.A.nnz for level in self.levels) / self.levels[0].A.nnz


class WorkCounter:
    """Accumulates work units and coarse-solve visits."""

    def __init__(self):
        self.work_units = 0.0
        self.coarse_solves = 0

    def add(self, amount: float):
        self.work_units += amount


def strength_graph(A: sp.csr_matrix, threshold: float, max_row_sum: float) -> sp.csr_matrix:
    """
    Classical strength of connection: i depends strongly on j when
    -sign(a_ii) a_ij >= threshold * max_k(-sign(a_ii) a_ik). Rows whose scaled
    row sum |sum_j a_ij| / |a_ii| exceeds max_row_sum keep no strong connection.
    """
    n = A.shape[0]
    indptr, indices, data = A.indptr, A.indices, A.data
    row_idx = np.repeat(np.arange(n), np.diff(indptr))
    diag = A.diagonal()
    off = indices != row_idx

    sign = np.where(diag[row_idx] < 0, -1.0, 1.0)
    s_vals = -sign * data
    row_max = np.zeros(n)
    np.maximum.at(row_max, row_idx[off], s_vals[off])

    with np.errstate(divide='ignore', invalid='ignore'):
        scaled_sum = np.abs(np.asarray(A.sum(axis=1)).ravel()) / np.abs(diag)
    weak_rows = ~(scaled_sum <= max_row_sum)

    strong = (off & (s_vals > 0) & (row_max[row_idx] > 0)
              & (s_vals >= threshold * row_max[row_idx]) & ~weak_rows[row_idx])
    S = sp.csr_matrix((np.ones(int(strong.sum())), (row_idx[strong], indices[strong])), shape=(n, n))
    S.sort_indices()
    return S


def _row_hash(n: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random numbers in [0, 1) keyed by row index."""
    with np.errstate(over='ignore'):
        z = np.arange(n, dtype=np.uint64) + np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def rs_coarsening(S: sp.csr_matrix) -> np.ndarray:
    """
    Ruge-Stueben first pass. Returns a boolean array, True for C points.

    The point with the largest number of strong dependants becomes C, its
    undecided dependants become F, and the measures of their undecided strong
    neighbours grow. Ties go to the lowest index.
    """
    n = S.shape[0]
    ST = S.T.tocsr()
    s_ptr, s_idx = S.indptr.tolist(), S.indices.tolist()
    t_ptr, t_idx = ST.indptr.tolist(), ST.indices.tolist()

    UNDECIDED, COARSE, FINE = 0, 1, 2
    state = [UNDECIDED] * n
    measure = [t_ptr[i + 1] - t_ptr[i] for i in range(n)]
    for i in range(n):
        # no strong connections either way: nothing to interpolate from or to
        if measure[i] == 0 and s_ptr[i + 1] == s_ptr[i]:
            state[i] = FINE

    heap = [(-measure[i], i) for i in range(n) if state[i] == UNDECIDED]
    heapq.heapify(heap)
    while heap:
        neg_m, i = heapq.heappop(heap)
        if state[i] != UNDECIDED or -neg_m != measure[i]:
            continue
        if measure[i] == 0:
            break
        state[i] = COARSE
        for p in range(t_ptr[i], t_ptr[i + 1]):
            j = t_idx[p]
            if state[j] != UNDECIDED:
                continue
            state[j] = FINE
            for q in range(s_ptr[j], s_ptr[j + 1]):
                k = s_idx[q]
                if state[k] == UNDECIDED:
                    measure[k] += 1
                    heapq.heappush(heap, (-measure[k], k))
        for p in range(s_ptr[i], s_ptr[i + 1]):
            k = s_idx[p]
            if state[k] == UNDECIDED and measure[k] > 0:
                measure[k] -= 1
                heapq.heappush(heap, (-measure[k], k))

    for i in range(n):
        if state[i] != UNDECIDED:
            continue
        has_c = any(state[s_idx[p]] == COARSE for p in range(s_ptr[i], s_ptr[i + 1]))
        state[i] = FINE if has_c or s_ptr[i + 1] == s_ptr[i] else COARSE

    return np.asarray(state) == COARSE


def pmis_coarsening(S: sp.csr_matrix, seed: int = 0) -> np.ndarray:
    """
    Independent-set coarsening. Weights are the number of strong dependants
    plus a seeded hash of the row index; local maxima among undecided
    neighbours become C, their undecided dependants become F.
    """
    n = S.shape[0]
    ST = S.T.tocsr()
    G = (S + ST).tocoo()
    gi, gj = G.row, G.col
    weight = np.diff(ST.indptr).astype(float) + _row_hash(n, seed)

    UNDECIDED, COARSE, FINE = 0, 1, 2
    state = np.zeros(n, dtype=np.int8)
    connected = np.zeros(n, dtype=bool)
    connected[gi] = True
    state[~connected] = FINE

    while np.any(state == UNDECIDED):
        undecided = state == UNDECIDED
        live = undecided[gi] & undecided[gj]
        neighbour_max = np.full(n, -np.inf)
        np.maximum.at(neighbour_max, gi[live], weight[gj[live]])
        new_c = undecided & (weight > neighbour_max)
        if not new_c.any():
            candidates = np.flatnonzero(undecided)
            new_c[candidates[np.argmax(weight[candidates])]] = True
        state[new_c] = COARSE
        # rows i with a strong dependency on a new C point become F
        depends_on_c = np.asarray(S @ new_c.astype(float)).ravel() > 0
        state[(state == UNDECIDED) & depends_on_c] = FINE

    return state == COARSE


def _direct_weights(i, row_cols, row_vals, strong_c, a_ii):
    neg_all = sum(v for j, v in zip(row_cols, row_vals) if j != i and v < 0)
    pos_all = sum(v for j, v in zip(row_cols, row_vals) if j != i and v > 0)
    neg_c = sum(v for _, v in strong_c if v < 0)
    pos_c = sum(v for _, v in strong_c if v > 0)
    diag = a_ii + (pos_all if pos_c == 0 else 0.0)
    if diag == 0:
        return {}
    alpha = neg_all / neg_c if neg_c != 0 else 0.0
    beta = pos_all / pos_c if pos_c != 0 else 0.0
    return {j: -(alpha if v < 0 else beta) * v / diag for j, v in strong_c}


def build_interpolation(A: sp.csr_matrix, S: sp.csr_matrix, is_c: np.ndarray, kind: Interpolation) -> sp.csr_matrix:
    """
    Interpolation from the C points to all points. C rows are injections;
    F rows use direct or classical (Ruge-Stueben) weights over strong C neighbours.
    """
    n = A.shape[0]
    coarse_index = np.cumsum(is_c) - 1
    nc = int(is_c.sum())
    a_ptr, a_idx, a_val = A.indptr.tolist(), A.indices.tolist(), A.data.tolist()
    s_ptr, s_idx = S.indptr.tolist(), S.indices.tolist()
    is_c_list = is_c.tolist()
    cidx = coarse_index.tolist()

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for i in range(n):
        if is_c_list[i]:
            rows.append(i)
            cols.append(cidx[i])
            vals.append(1.0)
            continue

        strong = set(s_idx[s_ptr[i]:s_ptr[i + 1]])
        row_cols = a_idx[a_ptr[i]:a_ptr[i + 1]]
        row_vals = a_val[a_ptr[i]:a_ptr[i + 1]]
        a_ii = 0.0
        strong_c = []
        strong_f = []
        weak_sum = 0.0
        for j, v in zip(row_cols, row_vals):
            if j == i:
                a_ii = v
            elif j in strong:
                (strong_c if is_c_list[j] else strong_f).append((j, v))
            else:
                weak_sum += v
        if not strong_c:
            continue

        if kind == Interpolation.DIRECT:
            weights = _direct_weights(i, row_cols, row_vals, strong_c, a_ii)
        else:
            c_set = {j for j, _ in strong_c}
            numer = {j: v for j, v in strong_c}
            denom = a_ii + weak_sum
            for k, a_ik in strong_f:
                k_cols = a_idx[a_ptr[k]:a_ptr[k + 1]]
                k_vals = a_val[a_ptr[k]:a_ptr[k + 1]]
                a_kk = next((v for m, v in zip(k_cols, k_vals) if m == k), 0.0)
                shared = [(m, v) for m, v in zip(k_cols, k_vals) if m in c_set and v * a_kk < 0]
                total = sum(v for _, v in shared)
                if total == 0:
                    denom += a_ik
                    continue
                for m, v in shared:
                    numer[m] += a_ik * v / total
            weights = {j: -numer[j] / denom for j in numer} if denom != 0 else {}

        for j, w in weights.items():
            if w != 0:
                rows.append(i)
                cols.append(cidx[j])
                vals.append(w)

    P = sp.coo_matrix((vals, (rows, cols)), shape=(n, nc)).tocsr()
    P.sort_indices()
    return P


def truncate_interpolation(P: sp.csr_matrix, trunc_factor: float, p_max_elements: int) -> sp.csr_matrix:
    """
    Drop weights below trunc_factor * max|w| in their row, keep at most
    p_max_elements largest entries (0 keeps all), then rescale each row so
    its sum is unchanged.
    """
    if trunc_factor <= 0 and p_max_elements <= 0:
        return P
    n = P.shape[0]
    coo = P.tocoo()
    rows, cols, vals = coo.row, coo.col, coo.data
    magnitude = np.abs(vals)

    keep = np.ones(len(vals), dtype=bool)
    if trunc_factor > 0:
        row_max = np.zeros(n)
        np.maximum.at(row_max, rows, magnitude)
        keep &= magnitude >= trunc_factor * row_max[rows]
    if p_max_elements > 0:
        order = np.lexsort((cols, -magnitude, rows))
        sorted_rows = rows[order]
        # rank among the survivors of the threshold test
        survivors = keep[order]
        kept_rank = np.empty(len(vals), dtype=np.int64)
        cumulative = np.cumsum(survivors) - survivors
        row_base = np.zeros(n + 1, dtype=np.int64)
        first_of_row = np.ones(len(order), dtype=bool)
        first_of_row[1:] = sorted_rows[1:] != sorted_rows[:-1]
        row_base[sorted_rows[first_of_row]] = cumulative[first_of_row]
        kept_rank[order] = cumulative - row_base[sorted_rows]
        keep &= kept_rank < p_max_elements

    old_sum = np.bincount(rows, weights=vals, minlength=n)
    new_sum = np.bincount(rows[keep], weights=vals[keep], minlength=n)
    with np.errstate(divide='ignore', invalid='ignore'):
        scale = np.where(new_sum != 0, old_sum / new_sum, 1.0)
    new_vals = vals[keep] * scale[rows[keep]]

    T = sp.coo_matrix((new_vals, (rows[keep], cols[keep])), shape=P.shape).tocsr()
    T.sort_indices()
    return T


def galerkin_product(A: sp.csr_matrix, P: sp.csr_matrix) -> sp.csr_matrix:
    """Coarse operator P^T A P, evaluated left to right as written."""
    coarse = (P.T @ A @ P).tocsr()
    coarse.sort_indices()
    return coarse


def estimate_lambda_max(A: sp.csr_matrix, diag_inv: np.ndarray) -> float:
    """Largest eigenvalue of D^-1 A from ten power iterations on the all-ones vector."""
    v = np.ones(A.shape[0])
    estimate = 0.0
    for _ in range(POWER_ITERATIONS):
        w = diag_inv * (A @ v)
        norm_w, norm_v = np.linalg.norm(w), np.linalg.norm(v)
        if norm_w == 0 or not np.isfinite(norm_w):
            break
        estimate = float(norm_w / norm_v)
        v = w / norm_w
    return estimate


def _make_level(A: CsrMatrix, P: Optional[CsrMatrix], cfg: SolverConfig, level: int) -> AmgLevel:
    diag = A.diagonal()
    if np.any(diag == 0) or not np.all(np.isfinite(diag)):
        raise HierarchyError("zero or non-finite diagonal entry", level)
    diag_inv = 1.0 / diag
    lambda_max = estimate_lambda_max(A.scipy_view(), diag_inv)
    if lambda_max <= 0:
        raise HierarchyError("power iteration found no positive eigenvalue estimate", level)
    return AmgLevel(
        A=A, P=P, diag_inv=diag_inv, lambda_max=lambda_max,
        pre_bounds=(cfg.pre_spectrum_fraction * lambda_max, lambda_max),
        post_bounds=(cfg.post_spectrum_fraction * lambda_max, lambda_max),
    )


def build_hierarchy(A: CsrMatrix, cfg: SolverConfig) -> AmgHierarchy:
    """
    Build the AMG hierarchy.

    Args:
        A: Square system matrix
        cfg: Solver configuration (coarsening, interpolation and smoother fields are used)

    Returns:
        AmgHierarchy with Galerkin coarse operators and a dense LU of the coarsest one
    """
    if not A.is_square():
        raise DimensionMismatchError(f"build_hierarchy: matrix is {A.shape}, expected square")
    start = time.perf_counter()

    operators: List[CsrMatrix] = [A]
    interpolations: List[CsrMatrix] = []
    current = A.scipy_view()
    while current.shape[0] > cfg.coarse_matrix_size and len(operators) < MAX_LEVELS:
        S = strength_graph(current, cfg.strength_threshold, cfg.max_row_sum)
        if cfg.coarsening == Coarsening.CLASSICAL_RS:
            is_c = rs_coarsening(S)
        else:
            is_c = pmis_coarsening(S)
        nc = int(is_c.sum())
        if nc == 0 or nc > STALL_RATIO * current.shape[0]:
            logger.debug(f"Coarsening stalled at level {len(operators) - 1}: {current.shape[0]} -> {nc}")
            break
        P = build_interpolation(current, S, is_c, cfg.interpolation)
        P = truncate_interpolation(P, cfg.trunc_factor, cfg.p_max_elements)
        coarse = galerkin_product(current, P)
        interpolations.append(CsrMatrix.from_scipy(P))
        operators.append(CsrMatrix.from_scipy(coarse))
        current = operators[-1].scipy_view()

    levels = []
    for index, op in enumerate(operators):
        P = interpolations[index] if index < len(interpolations) else None
        levels.append(_make_level(op, P, cfg, index))

    coarsest = operators[-1]
    last = len(operators) - 1
    if coarsest.n_rows > MAX_DENSE_COARSE:
        raise HierarchyError(f"coarsest operator has {coarsest.n_rows} rows, too large for the dense solve", last)
    dense = coarsest.scipy_view().toarray()
    if np.any(~dense.any(axis=1)) or np.any(~dense.any(axis=0)):
        raise HierarchyError("coarsest operator is structurally singular (empty row or column)", last)
    try:
        lu, piv = scipy.linalg.lu_factor(dense, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise HierarchyError(f"coarsest operator factorization failed: {e}", last)
    if np.any(np.diag(lu) == 0):
        raise HierarchyError("coarsest operator is singular", last)

    setup_time = time.perf_counter() - start
    hierarchy = AmgHierarchy(levels=levels, coarse_factorization=(lu, piv), setup_time=setup_time)
    logger.debug(f"Built hierarchy with sizes {hierarchy.sizes} in {setup_time:.3f}s")
    return hierarchy


# SMOOTHING AND CYCLES

def chebyshev_smooth(A: CsrMatrix, bounds: Tuple[float, float], order: int, x: DenseVector, b: DenseVector,
                     diag_inv: Optional[np.ndarray] = None, counter: Optional[WorkCounter] = None) -> DenseVector:
    """
    Chebyshev polynomial smoothing of degree `order` on D^-1 A over [lambda_min, lambda_max].

    Args:
        A: Level operator
        bounds: (lambda_min, lambda_max) of the diagonally scaled operator
        order: Polynomial degree, 1 to 4
        x: Initial guess (not modified)
        b: Right-hand side

    Returns:
        Smoothed iterate
    """
    lam_min, lam_max = bounds
    if lam_max <= 0:
        raise HierarchyError(f"lambda_max={lam_max} is not positive, operator is not SPD-scaled")
    if not 0 < lam_min < lam_max:
        raise ValueError(f"invalid Chebyshev bounds ({lam_min}, {lam_max})")
    if not 1 <= order <= 4:
        raise ValueError(f"Chebyshev order {order} not in [1, 4]")
    if diag_inv is None:
        diag_inv = 1.0 / A.diagonal()

    op = A.scipy_view()
    theta = 0.5 * (lam_max + lam_min)
    delta = 0.5 * (lam_max - lam_min)
    sigma = theta / delta
    rho = 1.0 / sigma

    x = np.array(x, dtype=np.float64, copy=True)
    r = diag_inv * (b - op @ x)
    d = r / theta
    if counter is not None:
        counter.add(order * A.nnz)
    for k in range(order):
        x += d
        if k == order - 1:
            break
        r = r - diag_inv * (op @ d)
        rho_next = 1.0 / (2.0 * sigma - rho)
        d = rho_next * rho * d + (2.0 * rho_next / delta) * r
        rho = rho_next
    return x


def _coarse_solve(h: AmgHierarchy, b: DenseVector, counter: WorkCounter) -> DenseVector:
    counter.coarse_solves += 1
    counter.add(h.levels[-1].size ** 2)
    return scipy.linalg.lu_solve(h.coarse_factorization, b, check_finite=False)


def _cycle(h: AmgHierarchy, cfg: SolverConfig, level: int, b: DenseVector, kind: CycleType,
           counter: WorkCounter) -> DenseVector:
    last = h.n_levels - 1
    if level == last:
        return _coarse_solve(h, b, counter)

    lvl = h.levels[level]
    op = lvl.A.scipy_view()
    x = chebyshev_smooth(lvl.A, lvl.pre_bounds, cfg.pre_cheby_order, np.zeros_like(b), b,
                         lvl.diag_inv, counter)
    r = b - op @ x
    counter.add(lvl.A.nnz)
    P = lvl.P.scipy_view()
    rc = P.T @ r
    counter.add(lvl.P.nnz)

    coarse_op = h.levels[level + 1].A
    # the coarsest level is solved exactly, so it is visited once whatever the cycle
    if kind == CycleType.V or level + 1 == last:
        ec = _cycle(h, cfg, level + 1, rc, kind, counter)
    elif kind == CycleType.W:
        ec = _cycle(h, cfg, level + 1, rc, CycleType.W, counter)
        ec = ec + _cycle(h, cfg, level + 1, rc - coarse_op.scipy_view() @ ec, CycleType.W, counter)
        counter.add(coarse_op.nnz)
    else:
        ec = _cycle(h, cfg, level + 1, rc, CycleType.F, counter)
        ec = ec + _cycle(h, cfg, level + 1, rc - coarse_op.scipy_view() @ ec, CycleType.V, counter)
        counter.add(coarse_op.nnz)

    x = x + P @ ec
    counter.add(lvl.P.nnz)
    return chebyshev_smooth(lvl.A, lvl.post_bounds, cfg.post_cheby_order, x, b, lvl.diag_inv, counter)


def apply_preconditioner(h: AmgHierarchy, cfg: SolverConfig, r: DenseVector,
                         counter: Optional[WorkCounter] = None) -> DenseVector:
    """
    Apply precond_iters multigrid cycles to A z = r starting from z = 0.

    Returns:
        Approximate solution z
    """
    if len(r) != h.levels[0].size:
        raise DimensionMismatchError(f"preconditioner of size {h.levels[0].size} applied to vector of {len(r)}")
    counter = counter if counter is not None else WorkCounter()
    r = np.asarray(r, dtype=np.float64)
    if h.n_levels == 1:
        return _coarse_solve(h, r, counter)

    A = h.levels[0].A.scipy_view()
    z = _cycle(h, cfg, 0, r, cfg.cycle, counter)
    for _ in range(cfg.precond_iters - 1):
        residual = r - A @ z
        counter.add(h.levels[0].A.nnz)
        z = z + _cycle(h, cfg, 0, residual, cfg.cycle, counter)
    return z


# OUTER SOLVER

@dataclass
class SolveOutcome:
    """Result of one preconditioned BiCGStab solve."""
    converged: bool
    iterations: int
    final_relative_residual: float
    wall_time: float
    work_units: float
    setup_time: float
    reason: str = ""
    solution: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('solution')
        return data


def bicgstab_solve(A: CsrMatrix, b: DenseVector, h: AmgHierarchy, cfg: SolverConfig,
                   max_work_units: Optional[float] = None, deadline: Optional[float] = None) -> SolveOutcome:
    """
    Right-preconditioned BiCGStab from x0 = 0.

    Args:
        A: System matrix
        b: Right-hand side
        h: Hierarchy built for A
        cfg: Solver configuration
        max_work_units: Abort (not converged) once this much work is spent
        deadline: Abort (not converged) after this time.perf_counter() value

    Returns:
        SolveOutcome; converged outcomes satisfy ||b - Ax|| <= 2 tol ||b|| when recomputed
    """
    if len(b) != A.n_rows or h.levels[0].size != A.n_rows:
        raise DimensionMismatchError("bicgstab_solve: matrix, right-hand side and hierarchy sizes differ")
    start = time.perf_counter()
    counter = WorkCounter()
    op = A.scipy_view()
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    tol = cfg.outer_rel_tol

    def outcome(converged: bool, iterations: int, residual_norm: float, reason: str) -> SolveOutcome:
        relative = residual_norm / b_norm if b_norm > 0 else residual_norm
        return SolveOutcome(converged=converged, iterations=iterations, final_relative_residual=relative,
                            wall_time=time.perf_counter() - start, work_units=counter.work_units,
                            setup_time=h.setup_time, reason=reason, solution=x)

    if b_norm == 0:
        return outcome(True, 0, 0.0, "zero right-hand side")

    r = b.copy()
    r_norm = b_norm
    if cfg.outer_max_iters == 0:
        return outcome(False, 0, r_norm, "iteration budget exhausted")

    r_hat = r.copy()
    rho_old = alpha = omega = 1.0
    p = np.zeros_like(b)
    v = np.zeros_like(b)
    iteration = 0
    restart = True

    while iteration < cfg.outer_max_iters:
        iteration += 1
        rho = float(np.dot(r_hat, r))
        if abs(rho) < BREAKDOWN_TOL:
            return outcome(False, iteration, r_norm, "breakdown: rho")
        if restart:
            p = r.copy()
            restart = False
        else:
            beta = (rho / rho_old) * (alpha / omega)
            p = r + beta * (p - omega * v)

        p_hat = apply_preconditioner(h, cfg, p, counter)
        v = op @ p_hat
        counter.add(A.nnz)
        denom = float(np.dot(r_hat, v))
        if abs(denom) < BREAKDOWN_TOL or not np.isfinite(denom):
            return outcome(False, iteration, r_norm, "breakdown: r_hat . v")
        alpha = rho / denom
        s = r - alpha * v
        s_norm = float(np.linalg.norm(s))

        if s_norm <= tol * b_norm:
            x = x + alpha * p_hat
            r = s
            r_norm = s_norm
        else:
            s_hat = apply_preconditioner(h, cfg, s, counter)
            t = op @ s_hat
            counter.add(A.nnz)
            tt = float(np.dot(t, t))
            if tt < BREAKDOWN_TOL or not np.isfinite(tt):
                return outcome(False, iteration, r_norm, "breakdown: t . t")
            omega = float(np.dot(t, s)) / tt
            x = x + alpha * p_hat + omega * s_hat
            r = s - omega * t
            r_norm = float(np.linalg.norm(r))

        if not np.all(np.isfinite(x)) or not math.isfinite(r_norm):
            return outcome(False, iteration, float('inf'), "non-finite iterate")

        if r_norm <= tol * b_norm:
            true_r = b - op @ x
            counter.add(A.nnz)
            true_norm = float(np.linalg.norm(true_r))
            if true_norm <= 2.0 * tol * b_norm:
                return outcome(True, iteration, true_norm, "converged")
            # recurrence drifted: restart from the true residual
            r, r_norm = true_r, true_norm
            r_hat = r.copy()
            restart = True
        elif abs(omega) < BREAKDOWN_TOL:
            return outcome(False, iteration, r_norm, "breakdown: omega")

        rho_old = rho
        if max_work_units is not None and counter.work_units > max_work_units:
            return outcome(False, iteration, r_norm, "work budget exceeded")
        if deadline is not None and time.perf_counter() > deadline:
            return outcome(False, iteration, r_norm, "timeout")

    return outcome(False, iteration, r_norm, "iteration budget exhausted")


def solve(A: CsrMatrix, b: DenseVector, cfg: SolverConfig) -> SolveOutcome:
    """Build the hierarchy and solve; setup failures become a non-converged outcome."""
    try:
        h = build_hierarchy(A, cfg.validate())
    except HierarchyError as e:
        return SolveOutcome(converged=False, iterations=0, final_relative_residual=float('inf'),
                            wall_time=0.0, work_units=0.0, setup_time=0.0, reason=f"setup failed: {e}")
    return bicgstab_solve(A, b, h, cfg)
