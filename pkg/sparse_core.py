#!/usr/bin/env python3
"""
Sparse core
CSR storage, Matrix Market ingestion, the cube/jumps diffusion test problems
and the dense-vector kernels used by the solver stack.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from tuner_errors import ConfigError, DimensionMismatchError, MatrixFormatError, SizingError

logger = logging.getLogger(__name__)

DenseVector = np.ndarray

# Index arrays are int32 in scipy CSR for anything below this size
MAX_INDEX = np.iinfo(np.int32).max
MAX_PROBLEM_BYTES = 16 * 1024 ** 3


class CsrMatrix:
    """
    Immutable compressed sparse row matrix.

    Rows are stored with strictly increasing column indices and no duplicates.
    The arrays handed out by the properties are read-only views.
    """

    def __init__(self, n_rows: int, n_cols: int, row_offsets, col_indices, values, validate: bool = True):
        row_offsets = np.asarray(row_offsets, dtype=np.int64)
        col_indices = np.asarray(col_indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if validate:
            _check_csr(n_rows, n_cols, row_offsets, col_indices, values)

        csr = sp.csr_matrix((values.copy(), col_indices.copy(), row_offsets.copy()), shape=(n_rows, n_cols))
        csr.has_sorted_indices = True
        csr.has_canonical_format = True
        self._csr = csr

    @classmethod
    def from_scipy(cls, matrix) -> "CsrMatrix":
        """Build from any scipy sparse matrix: duplicates summed, rows sorted."""
        csr = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data, validate=False)

    @property
    def n_rows(self) -> int:
        return self._csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self._csr.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._csr.shape

    @property
    def nnz(self) -> int:
        return int(self._csr.nnz)

    @property
    def row_offsets(self) -> np.ndarray:
        return _readonly(self._csr.indptr)

    @property
    def col_indices(self) -> np.ndarray:
        return _readonly(self._csr.indices)

    @property
    def values(self) -> np.ndarray:
        return _readonly(self._csr.data)

    def to_scipy(self) -> sp.csr_matrix:
        """Return a private copy as a scipy CSR matrix."""
        return self._csr.copy()

    def scipy_view(self) -> sp.csr_matrix:
        """Return the underlying scipy matrix; callers must not modify it."""
        return self._csr

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self._csr.T)

    def is_square(self) -> bool:
        return self.n_rows == self.n_cols

    def is_symmetric(self) -> bool:
        if not self.is_square():
            return False
        diff = self._csr - self._csr.T
        return diff.count_nonzero() == 0

    def equals(self, other: "CsrMatrix") -> bool:
        """Bit-exact comparison of structure and values."""
        return (self.shape == other.shape
                and np.array_equal(self._csr.indptr, other._csr.indptr)
                and np.array_equal(self._csr.indices, other._csr.indices)
                and np.array_equal(self._csr.data, other._csr.data))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.asarray(self.shape, dtype=np.int64).tobytes())
        digest.update(np.asarray(self._csr.indptr, dtype=np.int64).tobytes())
        digest.update(np.asarray(self._csr.indices, dtype=np.int64).tobytes())
        digest.update(np.asarray(self._csr.data, dtype=np.float64).tobytes())
        return digest.hexdigest()

    def __repr__(self) -> str:
        return f"CsrMatrix(n_rows={self.n_rows}, n_cols={self.n_cols}, nnz={self.nnz})"


def _readonly(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


def _check_csr(n_rows: int, n_cols: int, row_offsets: np.ndarray, col_indices: np.ndarray, values: np.ndarray):
    if n_rows < 0 or n_cols < 0:
        raise ValueError("matrix dimensions must be non-negative")
    if len(row_offsets) != n_rows + 1:
        raise ValueError(f"row_offsets has length {len(row_offsets)}, expected {n_rows + 1}")
    if row_offsets[0] != 0 or row_offsets[-1] != len(values):
        raise ValueError("row_offsets must start at 0 and end at the number of stored values")
    if len(col_indices) != len(values):
        raise ValueError("col_indices and values must have the same length")
    if np.any(np.diff(row_offsets) < 0):
        raise ValueError("row_offsets must be non-decreasing")
    if len(col_indices) and (col_indices.min() < 0 or col_indices.max() >= n_cols):
        raise ValueError("column index out of range")
    # strictly increasing inside every row: a non-positive step is only allowed at a row start
    steps = np.diff(col_indices)
    row_starts = np.zeros(len(col_indices), dtype=bool)
    row_starts[row_offsets[1:-1][row_offsets[1:-1] < len(col_indices)]] = True
    if np.any((steps <= 0) & ~row_starts[1:]):
        raise ValueError("column indices must be strictly increasing within each row")


# VECTOR KERNELS

def spmv(A: CsrMatrix, x: DenseVector) -> DenseVector:
    """Sparse matrix-vector product A x."""
    if A.n_cols != len(x):
        raise DimensionMismatchError(f"spmv: matrix has {A.n_cols} columns, vector has {len(x)} entries")
    return A.scipy_view() @ np.asarray(x, dtype=np.float64)


def dot(x: DenseVector, y: DenseVector) -> float:
    if len(x) != len(y):
        raise DimensionMismatchError(f"dot: lengths {len(x)} and {len(y)} differ")
    return float(np.dot(x, y))


def norm2(x: DenseVector) -> float:
    return float(np.linalg.norm(x))


def axpy(a: float, x: DenseVector, y: DenseVector) -> DenseVector:
    """Return a*x + y as a new vector."""
    if len(x) != len(y):
        raise DimensionMismatchError(f"axpy: lengths {len(x)} and {len(y)} differ")
    return a * np.asarray(x, dtype=np.float64) + np.asarray(y, dtype=np.float64)


# MATRIX MARKET

def parse_matrix_market(path: str) -> CsrMatrix:
    """
    Read a coordinate-format Matrix Market file.

    Args:
        path: File path (real or integer field, general or symmetric)

    Returns:
        CsrMatrix with symmetric storage expanded, rows sorted and duplicates summed
    """
    with open(path, 'r') as f:
        lines = f.readlines()

    if not lines:
        raise MatrixFormatError("empty file", 1)

    header = lines[0].strip().split()
    if len(header) != 5 or header[0].lower() != '%%matrixmarket':
        raise MatrixFormatError("missing '%%MatrixMarket' header", 1)
    obj, fmt, field_type, symmetry = (token.lower() for token in header[1:])
    if obj != 'matrix':
        raise MatrixFormatError(f"unsupported object '{obj}'", 1)
    if fmt != 'coordinate':
        raise MatrixFormatError(f"unsupported format '{fmt}', only 'coordinate' is accepted", 1)
    if field_type not in ('real', 'integer'):
        raise MatrixFormatError(f"unsupported field '{field_type}', only real and integer are accepted", 1)
    if symmetry not in ('general', 'symmetric'):
        raise MatrixFormatError(f"unsupported symmetry '{symmetry}'", 1)

    line_no = 1
    size_line = None
    for line_no in range(2, len(lines) + 1):
        text = lines[line_no - 1].strip()
        if text and not text.startswith('%'):
            size_line = text
            break
    if size_line is None:
        raise MatrixFormatError("missing size line", line_no)

    try:
        n_rows, n_cols, declared = (int(token) for token in size_line.split())
    except ValueError:
        raise MatrixFormatError(f"malformed size line '{size_line}'", line_no)
    if n_rows < 0 or n_cols < 0 or declared < 0:
        raise MatrixFormatError("negative size in size line", line_no)

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    last_line = line_no
    for line_no in range(line_no + 1, len(lines) + 1):
        text = lines[line_no - 1].strip()
        if not text or text.startswith('%'):
            continue
        if len(vals) == declared:
            raise MatrixFormatError(f"more entries than the {declared} declared in the size line", line_no)
        tokens = text.split()
        if len(tokens) != 3:
            raise MatrixFormatError(f"expected 'row col value', found '{text}'", line_no)
        try:
            i, j = int(tokens[0]), int(tokens[1])
            value = float(tokens[2])
        except ValueError:
            raise MatrixFormatError(f"malformed entry '{text}'", line_no)
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise MatrixFormatError(f"index ({i}, {j}) outside declared bounds {n_rows}x{n_cols}", line_no)
        if symmetry == 'symmetric' and j > i:
            raise MatrixFormatError(f"symmetric file stores upper-triangle entry ({i}, {j})", line_no)
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(value)
        last_line = line_no

    if len(vals) < declared:
        raise MatrixFormatError(
            f"truncated body: size line declares {declared} entries but only {len(vals)} were found",
            last_line)

    rows_arr = np.asarray(rows, dtype=np.int64)
    cols_arr = np.asarray(cols, dtype=np.int64)
    vals_arr = np.asarray(vals, dtype=np.float64)
    if symmetry == 'symmetric':
        off = rows_arr != cols_arr
        rows_arr, cols_arr = np.concatenate([rows_arr, cols_arr[off]]), np.concatenate([cols_arr, rows_arr[off]])
        vals_arr = np.concatenate([vals_arr, vals_arr[off]])

    matrix = sp.coo_matrix((vals_arr, (rows_arr, cols_arr)), shape=(n_rows, n_cols))
    result = CsrMatrix.from_scipy(matrix)
    logger.debug(f"Parsed {path}: {result}")
    return result


def write_matrix_market(A: CsrMatrix, path: str, comment: Optional[str] = None):
    """Write A in general coordinate format with round-trip exact values."""
    coo = A.scipy_view().tocoo()
    with open(path, 'w') as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for line in comment.splitlines():
                f.write(f"% {line}\n")
        f.write(f"{A.n_rows} {A.n_cols} {A.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def write_vector(b: DenseVector, path: str):
    """Write a dense vector in Matrix Market array format."""
    with open(path, 'w') as f:
        f.write("%%MatrixMarket matrix array real general\n")
        f.write(f"{len(b)} 1\n")
        for v in b:
            f.write(f"{float(v)!r}\n")


def read_vector(path: str) -> DenseVector:
    """Read a vector in Matrix Market array format or as one value per line."""
    with open(path, 'r') as f:
        lines = f.readlines()

    is_array = bool(lines) and lines[0].lower().startswith('%%matrixmarket')
    expected = None
    values: List[float] = []
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith('%'):
            continue
        if is_array and expected is None:
            tokens = text.split()
            try:
                expected = int(tokens[0]) * int(tokens[1])
            except (ValueError, IndexError):
                raise MatrixFormatError(f"malformed array size line '{text}'", line_no)
            continue
        try:
            values.append(float(text))
        except ValueError:
            raise MatrixFormatError(f"malformed vector entry '{text}'", line_no)

    if expected is not None and len(values) != expected:
        raise MatrixFormatError(f"vector declares {expected} entries but {len(values)} were found")
    return np.asarray(values, dtype=np.float64)


# TEST PROBLEMS

def _check_size(grid_n: int, nnz_per_row: int = 7):
    n = grid_n ** 3
    nnz = nnz_per_row * n
    # data + indices + (row offsets, rhs, a handful of work vectors)
    estimated = nnz * 12 + n * 8 * 10
    if nnz > MAX_INDEX or estimated > MAX_PROBLEM_BYTES:
        raise SizingError(
            f"grid_n={grid_n} gives n={n} unknowns and ~{estimated / 1024 ** 3:.1f} GiB, "
            f"beyond the {MAX_PROBLEM_BYTES / 1024 ** 3:.0f} GiB limit")


def build_cube(grid_n: int) -> Tuple[CsrMatrix, DenseVector]:
    """
    7-point Laplacian on a grid_n^3 interior grid with Dirichlet boundaries
    eliminated. The stencil is unscaled (diagonal 6, neighbours -1).

    Returns:
        (A, b) with b = 1
    """
    if grid_n < 2:
        raise ConfigError(f"cube requires grid_n >= 2, got {grid_n}")
    _check_size(grid_n)

    T = sp.diags([-np.ones(grid_n - 1), 2.0 * np.ones(grid_n), -np.ones(grid_n - 1)], [-1, 0, 1], format='csr')
    I = sp.identity(grid_n, format='csr')
    A = sp.kron(sp.kron(T, I), I) + sp.kron(sp.kron(I, T), I) + sp.kron(sp.kron(I, I), T)
    A = sp.csr_matrix(A)
    A.eliminate_zeros()

    matrix = CsrMatrix.from_scipy(A)
    logger.debug(f"Built cube:{grid_n} {matrix}")
    return matrix, np.ones(matrix.n_rows)


def jumps_coefficient(x, y, z):
    """Stepwise diffusion coefficient of the jumps problem, evaluated pointwise."""
    x, y, z = np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(z, dtype=float)

    def inner(t):
        return (t >= 0.1) & (t <= 0.9)

    def corner_band(t):
        return (t <= 0.1) | (t >= 0.9)

    in_inner = inner(x) & inner(y) & inner(z)
    in_corner = corner_band(x) & corner_band(y) & corner_band(z)
    return np.where(in_inner, 1000.0, np.where(in_corner, 0.1, 1.0))


def build_jumps(grid_n: int) -> Tuple[CsrMatrix, DenseVector]:
    """
    Cell-centred 7-point flux discretization of -div(K grad u) = 1 on the unit
    cube with the stepwise coefficient K. Interior face weights are harmonic
    means of the adjacent cell coefficients; a boundary face contributes the
    cell coefficient to the diagonal, so a constant K = 1 reproduces build_cube.

    Returns:
        (A, b) with b = 1
    """
    if grid_n < 10:
        raise ConfigError(f"jumps requires grid_n >= 10 so the corner cubes contain a cell, got {grid_n}")
    _check_size(grid_n)

    n = grid_n
    centers = (np.arange(n) + 0.5) / n
    X, Y, Z = np.meshgrid(centers, centers, centers, indexing='ij')
    K = jumps_coefficient(X, Y, Z)
    index = np.arange(n ** 3).reshape(n, n, n)

    rows, cols, vals = [], [], []
    diag = np.zeros((n, n, n))
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        k_lo, k_hi = K[tuple(lo)], K[tuple(hi)]
        weight = 2.0 * k_lo * k_hi / (k_lo + k_hi)
        i_lo, i_hi = index[tuple(lo)].ravel(), index[tuple(hi)].ravel()
        w = weight.ravel()
        rows.extend([i_lo, i_hi])
        cols.extend([i_hi, i_lo])
        vals.extend([-w, -w])
        diag[tuple(lo)] += weight
        diag[tuple(hi)] += weight

        first = [slice(None)] * 3
        last = [slice(None)] * 3
        first[axis] = 0
        last[axis] = n - 1
        diag[tuple(first)] += K[tuple(first)]
        diag[tuple(last)] += K[tuple(last)]

    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diag.ravel())

    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n ** 3, n ** 3))
    matrix = CsrMatrix.from_scipy(A)
    logger.debug(f"Built jumps:{grid_n} {matrix}")
    return matrix, np.ones(matrix.n_rows)


# PROBLEM SPECS

class ProblemKind(Enum):
    """Origin of a linear system."""
    CUBE = "cube"
    JUMPS = "jumps"
    MATRIX_MARKET = "mm"
    SSMC = "ssmc"


class RhsKind(Enum):
    """Right-hand side choices."""
    ONES = "ones"
    DIVERGENCE_FREE_RANDOM = "random"
    FILE = "file"


@dataclass(frozen=True)
class ProblemSpec:
    """Parsed problem spec string such as 'cube:40' or 'mm:path.mtx@random'."""
    kind: ProblemKind
    grid_n: Optional[int] = None
    path: Optional[str] = None
    rhs: RhsKind = RhsKind.ONES
    rhs_path: Optional[str] = None

    @property
    def label(self) -> str:
        if self.kind in (ProblemKind.CUBE, ProblemKind.JUMPS):
            base = f"{self.kind.value}:{self.grid_n}"
        else:
            base = f"{self.kind.value}:{self.path}"
        if self.rhs == RhsKind.FILE:
            return f"{base}@{self.rhs_path}"
        if self.rhs == RhsKind.DIVERGENCE_FREE_RANDOM:
            return f"{base}@random"
        return base


@dataclass(frozen=True, eq=False)
class Problem:
    """A linear system A x = b ready for solving."""
    spec: ProblemSpec
    matrix: CsrMatrix
    rhs: DenseVector = field(repr=False)

    @property
    def name(self) -> str:
        return self.spec.label

    @property
    def n(self) -> int:
        return self.matrix.n_rows

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.matrix.fingerprint().encode())
        digest.update(np.asarray(self.rhs, dtype=np.float64).tobytes())
        return digest.hexdigest()


def parse_problem_spec(text: str) -> ProblemSpec:
    """
    Parse 'cube:N', 'jumps:N', 'mm:path', 'ssmc:Group/Name' with an optional
    '@ones', '@random' or '@<vector file>' suffix.
    """
    base, rhs, rhs_path = text.strip(), RhsKind.ONES, None
    if '@' in base:
        base, suffix = base.rsplit('@', 1)
        if suffix == 'ones':
            rhs = RhsKind.ONES
        elif suffix == 'random':
            rhs = RhsKind.DIVERGENCE_FREE_RANDOM
        elif suffix:
            rhs, rhs_path = RhsKind.FILE, suffix
        else:
            raise ConfigError(f"Empty right-hand side suffix in problem spec '{text}'")

    if ':' not in base:
        raise ConfigError(f"Problem spec '{text}' must look like cube:N, jumps:N, mm:path or ssmc:Group/Name")
    kind_text, arg = base.split(':', 1)
    try:
        kind = ProblemKind(kind_text.lower())
    except ValueError:
        raise ConfigError(f"Unknown problem kind '{kind_text}' in '{text}'")

    if kind in (ProblemKind.CUBE, ProblemKind.JUMPS):
        try:
            grid_n = int(arg)
        except ValueError:
            raise ConfigError(f"Grid size '{arg}' in '{text}' is not an integer")
        minimum = 2 if kind == ProblemKind.CUBE else 10
        if grid_n < minimum:
            raise ConfigError(f"{kind.value} requires grid_n >= {minimum}, got {grid_n}")
        return ProblemSpec(kind=kind, grid_n=grid_n, rhs=rhs, rhs_path=rhs_path)

    if not arg:
        raise ConfigError(f"Missing path in problem spec '{text}'")
    if kind == ProblemKind.SSMC and arg.count('/') != 1:
        raise ConfigError(f"SuiteSparse spec must be ssmc:Group/Name, got '{text}'")
    return ProblemSpec(kind=kind, path=arg, rhs=rhs, rhs_path=rhs_path)


def build_rhs(kind: RhsKind, n: int, seed: int = 0, path: Optional[str] = None) -> DenseVector:
    """Right-hand side of length n."""
    if kind == RhsKind.ONES:
        return np.ones(n)
    if kind == RhsKind.DIVERGENCE_FREE_RANDOM:
        rng = np.random.default_rng(seed)
        b = rng.standard_normal(n)
        return b - b.mean()
    b = read_vector(path)
    if len(b) != n:
        raise DimensionMismatchError(f"right-hand side {path} has {len(b)} entries, system has {n}")
    return b


def load_problem(spec: ProblemSpec, seed: int = 0,
                 ssmc_resolver: Optional[Callable[[str, str], str]] = None) -> Problem:
    """
    Materialize a problem spec.

    Args:
        spec: Parsed problem spec
        seed: Seed for the random right-hand side
        ssmc_resolver: Callable (group, name) -> local .mtx path, required for ssmc specs

    Returns:
        Problem with matrix and right-hand side
    """
    if spec.kind == ProblemKind.CUBE:
        matrix, _ = build_cube(spec.grid_n)
    elif spec.kind == ProblemKind.JUMPS:
        matrix, _ = build_jumps(spec.grid_n)
    elif spec.kind == ProblemKind.MATRIX_MARKET:
        matrix = parse_matrix_market(spec.path)
    else:
        if ssmc_resolver is None:
            raise ConfigError("ssmc problems need a SuiteSparse client to resolve the matrix")
        group, name = spec.path.split('/')
        matrix = parse_matrix_market(ssmc_resolver(group, name))

    if not matrix.is_square():
        raise ConfigError(f"Problem {spec.label} is not square: {matrix.shape}")
    rhs = build_rhs(spec.rhs, matrix.n_rows, seed=seed, path=spec.rhs_path)
    return Problem(spec=spec, matrix=matrix, rhs=rhs)
