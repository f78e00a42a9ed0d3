#!/usr/bin/env python3
"""
Parameter search space
Discrete grids over SolverConfig fields, index-vector encoding and the soft mutation neighbourhood.
"""

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from amg_solver import SolverConfig, coerce_field
from tuner_errors import ConfigError, OffGridError, SearchSpaceError

logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-9
EPSILON_VALUE = 1e-10


class ParameterKind(Enum):
    """How a parameter grid is declared."""
    CONTINUOUS_RANGE = "range"
    DISCRETE_RANGE = "ints"
    DISCRETE_LIST = "list"


@dataclass(frozen=True)
class ParameterSpec:
    """
    One tunable parameter and its grid.

    `range(lo, hi, step)` yields lo, lo+step, ... up to hi; `ints(lo, hi)` yields
    every integer in [lo, hi]; `list(...)` yields the values as written.
    """
    name: str
    kind: ParameterKind
    lo: Optional[float] = None
    hi: Optional[float] = None
    step: Optional[float] = None
    values: Tuple[Any, ...] = ()

    @cached_property
    def _grid(self) -> Tuple[Any, ...]:
        if self.kind == ParameterKind.CONTINUOUS_RANGE:
            count = int(math.floor((self.hi - self.lo) / self.step + GRID_TOLERANCE)) + 1
            raw = [round(self.lo + k * self.step, 12) for k in range(count)]
        elif self.kind == ParameterKind.DISCRETE_RANGE:
            raw = list(range(int(self.lo), int(self.hi) + 1))
        else:
            raw = list(self.values)
        return tuple(coerce_field(self.name, value) for value in raw)

    def grid(self) -> List[Any]:
        return list(self._grid)

    @property
    def size(self) -> int:
        return len(self._grid)

    def index_of(self, value: Any) -> int:
        """Grid index of `value`; OffGridError when it is not a grid point."""
        if self._grid and isinstance(self._grid[0], Enum):
            try:
                target = coerce_field(self.name, value.value if isinstance(value, Enum) else value)
            except ConfigError:
                raise OffGridError(self.name, value)
            if target in self._grid:
                return self._grid.index(target)
            raise OffGridError(self.name, value)
        for index, point in enumerate(self._grid):
            if abs(float(point) - float(value)) <= GRID_TOLERANCE * max(1.0, abs(float(point))):
                return index
        raise OffGridError(self.name, value)

    def describe(self) -> str:
        if self.kind == ParameterKind.CONTINUOUS_RANGE:
            return f"range({_fmt(self.lo)}, {_fmt(self.hi)}, {_fmt(self.step)})"
        if self.kind == ParameterKind.DISCRETE_RANGE:
            return f"ints({int(self.lo)}, {int(self.hi)})"
        return "list(" + ", ".join(_fmt(v) for v in self.values) + ")"


@dataclass(frozen=True)
class ParameterVector:
    """Grid indices, one per parameter of the owning space."""
    indices: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def as_list(self) -> List[int]:
        return list(self.indices)


@dataclass(frozen=True)
class SearchSpace:
    """Ordered tunable parameters plus the frozen values of every other SolverConfig field."""
    specs: Tuple[ParameterSpec, ...]
    frozen: Dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        names = [spec.name for spec in self.specs]
        known = set(SolverConfig.__dataclass_fields__)
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise SearchSpaceError(f"Duplicate parameters: {', '.join(duplicates)}")
        unknown = sorted((set(names) | set(self.frozen)) - known)
        if unknown:
            raise SearchSpaceError(f"Unknown parameters: {', '.join(unknown)}")
        both = sorted(set(names) & set(self.frozen))
        if both:
            raise SearchSpaceError(f"Parameters both tuned and frozen: {', '.join(both)}")
        for spec in self.specs:
            if spec.size < 1:
                raise SearchSpaceError(f"Parameter '{spec.name}' has an empty grid")

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.specs]

    @property
    def dimension(self) -> int:
        return len(self.specs)

    @property
    def sizes(self) -> List[int]:
        return [spec.size for spec in self.specs]


# OPERATIONS

def cardinality(space: SearchSpace) -> int:
    """Exact number of grid points (arbitrary precision)."""
    return math.prod(space.sizes)


def validate_vector(space: SearchSpace, v: ParameterVector) -> ParameterVector:
    if len(v) != space.dimension:
        raise SearchSpaceError(f"Vector has {len(v)} indices, space has {space.dimension} parameters")
    for index, size, name in zip(v.indices, space.sizes, space.names):
        if not 0 <= index < size:
            raise SearchSpaceError(f"Index {index} of parameter '{name}' outside [0, {size})")
    return v


def decode(space: SearchSpace, v: ParameterVector) -> SolverConfig:
    """Concrete SolverConfig for a vector; frozen fields are injected."""
    validate_vector(space, v)
    data = SolverConfig().to_dict()
    for name, value in space.frozen.items():
        data[name] = value
    for spec, index in zip(space.specs, v.indices):
        data[spec.name] = spec.grid()[index]
    return SolverConfig.from_dict(data)


def encode(space: SearchSpace, cfg: SolverConfig) -> ParameterVector:
    """Vector whose decode is `cfg`; OffGridError names the first off-grid parameter."""
    return ParameterVector(tuple(spec.index_of(getattr(cfg, spec.name)) for spec in space.specs))


def try_encode(space: SearchSpace, cfg: SolverConfig) -> Optional[ParameterVector]:
    """encode() that returns None when cfg is off the grid or disagrees with a frozen value."""
    try:
        v = encode(space, cfg)
    except OffGridError as e:
        logger.debug(f"Config not encodable: {e}")
        return None
    if decode(space, v) != cfg:
        return None
    return v


def random_vector(space: SearchSpace, rng: np.random.Generator) -> ParameterVector:
    """Independent uniform index for each parameter."""
    if space.dimension == 0:
        return ParameterVector(())
    indices = rng.integers(0, np.asarray(space.sizes))
    return ParameterVector(tuple(int(i) for i in indices))


def soft_mutate(space: SearchSpace, v: ParameterVector, rng: np.random.Generator,
                stay_probability: float = 0.5) -> ParameterVector:
    """
    Move each coordinate by 0, +1 or -1 grid steps with probabilities
    p, (1-p)/2, (1-p)/2, clamping at the grid ends.
    """
    if space.dimension == 0:
        return v
    move = (1.0 - stay_probability) / 2.0
    steps = rng.choice(np.array([0, 1, -1]), size=space.dimension, p=[stay_probability, move, move])
    upper = np.asarray(space.sizes) - 1
    indices = np.clip(np.asarray(v.indices) + steps, 0, upper)
    return ParameterVector(tuple(int(i) for i in indices))


def normalize(space: SearchSpace, v: ParameterVector) -> np.ndarray:
    """Map indices to [0, 1]: index / (K - 1), 0 for single-point grids."""
    sizes = np.asarray(space.sizes, dtype=np.float64)
    indices = np.asarray(v.indices, dtype=np.float64)
    scale = np.where(sizes > 1, sizes - 1, 1.0)
    return np.where(sizes > 1, indices / scale, 0.0)


def normalize_many(space: SearchSpace, vectors: Sequence[ParameterVector]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, space.dimension))
    return np.vstack([normalize(space, v) for v in vectors])


def enumerate_vectors(space: SearchSpace):
    """Yield every vector in lexicographic index order."""
    if space.dimension == 0:
        yield ParameterVector(())
        return
    for indices in np.ndindex(*space.sizes):
        yield ParameterVector(tuple(int(i) for i in indices))


# FILE FORMAT

_LINE = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(range|ints|list|frozen)\s*\((.*)\)\s*$')


def _fmt(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(token: str) -> Any:
    token = token.strip()
    if token.lower() in ('eps', 'epsilon'):
        return EPSILON_VALUE
    try:
        number = float(token)
    except ValueError:
        return token
    return int(number) if re.fullmatch(r'[+-]?\d+', token) else number


def format_space(space: SearchSpace) -> str:
    """Canonical text of a space; the fingerprint is computed over it."""
    lines = [f"{spec.name} : {spec.describe()}" for spec in space.specs]
    lines += [f"{name} : frozen({_fmt(space.frozen[name])})" for name in sorted(space.frozen)]
    return "\n".join(lines) + "\n"


def fingerprint(space: SearchSpace) -> str:
    return hashlib.sha256(format_space(space).encode('utf-8')).hexdigest()


def parse_space(text: str) -> SearchSpace:
    """
    Parse a search-space definition, one parameter per line:

        name : range(lo, hi, step) | ints(lo, hi) | list(v1, v2, ...) | frozen(v)

    SolverConfig fields not mentioned are frozen at their defaults.
    """
    specs: List[ParameterSpec] = []
    frozen: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        match = _LINE.match(stripped)
        if not match:
            raise SearchSpaceError(f"line {line_no}: cannot parse '{line.strip()}'")
        name, kind, body = match.groups()
        args = [_parse_scalar(token) for token in body.split(',')] if body.strip() else []
        try:
            if kind == 'frozen':
                if len(args) != 1:
                    raise SearchSpaceError(f"line {line_no}: frozen() takes one value")
                frozen[name] = coerce_field(name, args[0])
            elif kind == 'range':
                if len(args) != 3 or not all(isinstance(a, (int, float)) for a in args):
                    raise SearchSpaceError(f"line {line_no}: range() takes numeric lo, hi, step")
                lo, hi, step = (float(a) for a in args)
                if step <= 0 or hi < lo:
                    raise SearchSpaceError(f"line {line_no}: range() needs step > 0 and hi >= lo")
                specs.append(ParameterSpec(name, ParameterKind.CONTINUOUS_RANGE, lo=lo, hi=hi, step=step))
            elif kind == 'ints':
                if len(args) != 2 or not all(isinstance(a, int) for a in args) or args[1] < args[0]:
                    raise SearchSpaceError(f"line {line_no}: ints() takes integers lo <= hi")
                specs.append(ParameterSpec(name, ParameterKind.DISCRETE_RANGE, lo=args[0], hi=args[1]))
            else:
                if not args:
                    raise SearchSpaceError(f"line {line_no}: list() needs at least one value")
                specs.append(ParameterSpec(name, ParameterKind.DISCRETE_LIST, values=tuple(args)))
            if kind != 'frozen':
                specs[-1].grid()
        except ConfigError as e:
            raise SearchSpaceError(f"line {line_no}: {e}")

    tuned = {spec.name for spec in specs}
    defaults = SolverConfig()
    for name in SolverConfig.__dataclass_fields__:
        if name not in tuned and name not in frozen:
            frozen[name] = getattr(defaults, name)
    return SearchSpace(specs=tuple(specs), frozen=frozen)


def load_space(path: str) -> SearchSpace:
    with open(path, 'r') as f:
        space = parse_space(f.read())
    logger.debug(f"Loaded space {path}: {space.dimension} parameters, {cardinality(space)} combinations")
    return space
