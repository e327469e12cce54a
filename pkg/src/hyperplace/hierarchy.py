"""
Descriptor Hierarchy
GeM pooling, projection, window layout and descriptor-tree assembly
"""

from dataclasses import dataclass, field
from functools import lru_cache
from types import MappingProxyType
from typing import Literal, Mapping, Sequence

import networkx as nx
import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hyperplace.errors import ConfigurationError, InvalidInputError
from hyperplace.hypgeo import BallConfig, BallPoint, FloatArray, TangentVec, ball_for

PANORAMA_WIDTH_RATIO = 8  # W' = 8W
MIN_LEVELS = 2
MAX_LEVELS = 8
DEFAULT_GEM_P = 3.0

QUERY: Literal["query"] = "query"
Aggregator = int | Literal["query"]


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """A (h_f × w_f × C) grid of channel vectors standing in for backbone output"""

    values: FloatArray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise InvalidInputError(f"feature grid must have shape (h, w, C) with every side ≥ 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("feature grid contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def seeded_projection(channels: int, dim: int, seed: int = 0) -> FloatArray:
    """
    Deterministic stand-in for a learned Linear layer

    Args:
        channels: Input width C
        dim: Descriptor dimension D
        seed: Seed of the Gaussian the matrix is factored from

    Returns:
        Identity when C == D, otherwise a (C, D) matrix with orthonormal
        columns (C > D) or rows (C < D) taken from the QR factorisation of a
        seeded Gaussian
    """
    if channels == dim:
        return np.eye(channels)
    rng = np.random.default_rng(seed)
    gaussian = rng.standard_normal((max(channels, dim), min(channels, dim)))
    q, _ = scipy.linalg.qr(gaussian, mode="economic")
    return q if channels >= dim else q.T


@dataclass(frozen=True, eq=False)
class PoolingConfig:
    """
    GeM exponents and projection matrices of every aggregator

    Level aggregators are indexed 1..L; the query aggregator has its own
    exponent and matrix. Matrices have shape (C, D) and are applied as v @ M.
    """

    level_exponents: tuple[float, ...]
    level_projections: tuple[FloatArray, ...]
    query_exponent: float
    query_projection: FloatArray

    def __post_init__(self) -> None:
        if len(self.level_exponents) != len(self.level_projections):
            raise ConfigurationError("one exponent and one projection are required per level")
        if not MIN_LEVELS <= len(self.level_exponents) <= MAX_LEVELS:
            raise ConfigurationError(f"pooling must cover {MIN_LEVELS}..{MAX_LEVELS} levels")
        for p in (*self.level_exponents, self.query_exponent):
            if not np.isfinite(p) or p < 1.0:
                raise ConfigurationError(f"GeM exponent must be finite and ≥ 1, got {p}")
        matrices = [np.array(m, dtype=np.float64) for m in (*self.level_projections, self.query_projection)]
        shape = matrices[0].shape
        for matrix in matrices:
            if matrix.ndim != 2 or matrix.shape != shape:
                raise ConfigurationError("projection matrices must share one (C, D) shape")
            if not np.all(np.isfinite(matrix)):
                raise ConfigurationError("projection matrix contains non-finite entries")
            matrix.setflags(write=False)
        object.__setattr__(self, "level_projections", tuple(matrices[:-1]))
        object.__setattr__(self, "query_projection", matrices[-1])

    @classmethod
    def default(cls, levels: int, channels: int, dim: int | None = None, p: float = DEFAULT_GEM_P, seed: int = 0) -> "PoolingConfig":
        """Equal exponents and one shared seeded projection for every aggregator"""
        matrix = seeded_projection(channels, channels if dim is None else dim, seed)
        return cls(
            level_exponents=(p,) * levels,
            level_projections=(matrix,) * levels,
            query_exponent=p,
            query_projection=matrix,
        )

    @property
    def levels(self) -> int:
        return len(self.level_exponents)

    @property
    def channels(self) -> int:
        return self.query_projection.shape[0]

    @property
    def dim(self) -> int:
        return self.query_projection.shape[1]

    def exponent(self, aggregator: Aggregator) -> float:
        if aggregator == QUERY:
            return self.query_exponent
        return self.level_exponents[self._level_slot(aggregator)]

    def projection(self, aggregator: Aggregator) -> FloatArray:
        if aggregator == QUERY:
            return self.query_projection
        return self.level_projections[self._level_slot(aggregator)]

    def _level_slot(self, level: int) -> int:
        if not 1 <= level <= self.levels:
            raise ConfigurationError(f"no aggregator for level {level}; pooling covers 1..{self.levels}")
        return level - 1


class PoolingSpec(BaseModel):
    """Serialisable description of a PoolingConfig (stored next to an index)"""

    model_config = ConfigDict(frozen=True)

    levels: int = Field(ge=MIN_LEVELS, le=MAX_LEVELS)
    channels: int = Field(ge=1)
    dim: int = Field(ge=1)
    gem_p: float = Field(default=DEFAULT_GEM_P, ge=1.0, allow_inf_nan=False)
    level_exponents: tuple[float, ...] | None = None
    query_exponent: float | None = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_exponents(self) -> "PoolingSpec":
        if self.level_exponents is not None and len(self.level_exponents) != self.levels:
            raise ValueError(f"expected {self.levels} level exponents, got {len(self.level_exponents)}")
        return self

    def to_config(self) -> PoolingConfig:
        matrix = seeded_projection(self.channels, self.dim, self.seed)
        exponents = self.level_exponents or (self.gem_p,) * self.levels
        return PoolingConfig(
            level_exponents=tuple(exponents),
            level_projections=(matrix,) * self.levels,
            query_exponent=self.gem_p if self.query_exponent is None else self.query_exponent,
            query_projection=matrix,
        )


def gem_pool(grid: FeatureGrid, p: float) -> FloatArray:
    """
    Generalized-mean pooling over the spatial cells of a grid

    Args:
        grid: Feature grid
        p: Exponent ≥ 1 (1 is the mean, large p approaches the max)

    Returns:
        Vector of length C with (mean over cells of value^p)^(1/p) per channel

    Example:
        >>> grid = FeatureGrid(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
        >>> gem_pool(grid, 3.0)  # 12 ** (1/3)
        array([2.28942849])
    """
    if not np.isfinite(p) or p < 1.0:
        raise InvalidInputError(f"GeM exponent must be finite and ≥ 1, got {p}")
    integral = float(p).is_integer()
    values = grid.values
    if not integral and np.any(values < 0.0):
        raise InvalidInputError("GeM with a fractional exponent needs non-negative features")
    mean = np.mean(values.reshape(-1, grid.channels) ** p, axis=0)
    if integral and int(p) % 2 == 1:
        # odd integer powers keep the sign, so take the real root
        return np.sign(mean) * np.abs(mean) ** (1.0 / p)
    return mean ** (1.0 / p)


def _project(v: FloatArray, aggregator: Aggregator, pooling: PoolingConfig) -> FloatArray:
    matrix = pooling.projection(aggregator)
    if v.shape[-1] != matrix.shape[0]:
        raise ConfigurationError(f"descriptor has {v.shape[-1]} channels, projection expects {matrix.shape[0]}")
    return v @ matrix


def project_desc(v: FloatArray, aggregator: Aggregator, pooling: PoolingConfig) -> TangentVec:
    """Apply the aggregator's projection (no bias) to a pooled vector"""
    return TangentVec(_project(np.asarray(v, dtype=np.float64), aggregator, pooling))


def embed_query(grid: FeatureGrid, pooling: PoolingConfig, config: BallConfig) -> BallPoint:
    """
    Query descriptor path: GeM, projection, then exp_0

    Args:
        grid: Query feature grid
        pooling: Aggregator parameters
        config: Ball the descriptor is embedded into

    Returns:
        The hyperbolic query descriptor h_q
    """
    if pooling.dim != config.dim:
        raise ConfigurationError(f"pooling produces {pooling.dim}-d descriptors, ball has dimension {config.dim}")
    descriptor = _project(gem_pool(grid, pooling.exponent(QUERY)), QUERY, pooling)
    return BallPoint(ball_for(config).exp0(descriptor), config)


class Window(BaseModel):
    """Horizontal extent of a window, in units of the query width W"""

    model_config = ConfigDict(frozen=True)

    start: float
    width: float


class WindowLayout(BaseModel):
    """
    Window extents of every level of an L-level panorama hierarchy

    Level ℓ holds 2^(ℓ−1) windows of width W'/2^(ℓ−1). Leaf windows are at
    least W wide and start every `stride` units; with a cyclic panorama they
    wrap around the 360° seam.
    """

    model_config = ConfigDict(frozen=True)

    levels: int = Field(ge=MIN_LEVELS, le=MAX_LEVELS)
    cyclic: bool = True
    width_ratio: int = PANORAMA_WIDTH_RATIO
    windows: tuple[tuple[Window, ...], ...]

    @model_validator(mode="after")
    def _check_counts(self) -> "WindowLayout":
        if len(self.windows) != self.levels:
            raise ValueError("one window tuple is required per level")
        for level, windows in enumerate(self.windows, start=1):
            if len(windows) != 2 ** (level - 1):
                raise ValueError(f"level {level} must hold {2 ** (level - 1)} windows")
        return self

    @property
    def leaf_count(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def leaf_width(self) -> float:
        return self.windows[-1][0].width

    @property
    def stride(self) -> float:
        leaves = self.windows[-1]
        return leaves[1].start - leaves[0].start

    def level_windows(self, level: int) -> tuple[Window, ...]:
        if not 1 <= level <= self.levels:
            raise InvalidInputError(f"level {level} outside 1..{self.levels}")
        return self.windows[level - 1]

    def leaf_columns(self, cells_per_width: int) -> list[np.ndarray]:
        """
        Column indices of every leaf window in a panorama strip

        Args:
            cells_per_width: Grid columns spanned by one query width W

        Returns:
            One integer index array per leaf; cyclic layouts wrap modulo the
            strip width W'·cells_per_width
        """
        total = self.width_ratio * cells_per_width
        columns = []
        for window in self.windows[-1]:
            start = window.start * cells_per_width
            width = window.width * cells_per_width
            if not (float(start).is_integer() and float(width).is_integer()):
                raise ConfigurationError(
                    f"{cells_per_width} cells per query width do not align with leaf stride {self.stride}"
                )
            columns.append((int(start) + np.arange(int(width))) % total)
        return columns


def window_layout(levels: int, cyclic: bool = True) -> WindowLayout:
    """
    Window extents for an L-level hierarchy over a W' = 8W panorama

    Args:
        levels: Hierarchy depth L, 2 ≤ L ≤ 8
        cyclic: Whether the panorama wraps horizontally

    Returns:
        The layout; for L ≤ 4 leaves tile the panorama, for L > 4 they are W
        wide and overlap

    Example:
        >>> window_layout(5).stride
        0.5
    """
    if not MIN_LEVELS <= levels <= MAX_LEVELS:
        raise ConfigurationError(f"levels must be within {MIN_LEVELS}..{MAX_LEVELS}, got {levels}")
    ratio = PANORAMA_WIDTH_RATIO
    windows = []
    for level in range(1, levels):
        width = ratio / 2 ** (level - 1)
        windows.append(tuple(Window(start=k * width, width=width) for k in range(2 ** (level - 1))))
    leaf_count = 2 ** (levels - 1)
    leaf_width = max(ratio / leaf_count, 1.0)
    stride = ratio / leaf_count if cyclic else (ratio - leaf_width) / (leaf_count - 1)
    windows.append(tuple(Window(start=j * stride, width=leaf_width) for j in range(leaf_count)))
    return WindowLayout(levels=levels, cyclic=cyclic, width_ratio=ratio, windows=tuple(windows))


def group_indices(level: int, k: int, depth: int) -> frozenset[int]:
    """
    Leaf indices aggregated into descriptor (ℓ, k)

    Args:
        level: Level ℓ, 1 ≤ ℓ ≤ L
        k: Group within the level, 1 ≤ k ≤ 2^(ℓ−1)
        depth: Hierarchy depth L

    Returns:
        {j : (k−1)·2^(L−ℓ)+1 ≤ j ≤ k·2^(L−ℓ)}, 1-based

    Example:
        >>> sorted(group_indices(3, 2, 5))
        [5, 6, 7, 8]
    """
    if not 1 <= level <= depth or not 1 <= k <= 2 ** (level - 1):
        raise InvalidInputError(f"group ({level}, {k}) does not exist in a depth-{depth} hierarchy")
    size = 2 ** (depth - level)
    return frozenset(range((k - 1) * size + 1, k * size + 1))


@lru_cache(maxsize=None)
def hierarchy_graph(depth: int) -> nx.DiGraph:
    """
    Binary tree of descriptor nodes (ℓ, k) with parent → child edges

    Each node carries its `level`, `k` and `leaves` (the group indices).
    The returned graph is frozen.
    """
    if not MIN_LEVELS <= depth <= MAX_LEVELS:
        raise ConfigurationError(f"levels must be within {MIN_LEVELS}..{MAX_LEVELS}, got {depth}")
    graph = nx.DiGraph()
    for level in range(1, depth + 1):
        for k in range(1, 2 ** (level - 1) + 1):
            graph.add_node((level, k), level=level, k=k, leaves=group_indices(level, k, depth))
            if level > 1:
                graph.add_edge((level - 1, (k + 1) // 2), (level, k))
    return nx.freeze(graph)


@dataclass(frozen=True, eq=False)
class DescriptorTree:
    """
    Per-panorama hierarchy of hyperbolic descriptors

    `levels` maps ℓ to an array of shape (2^(ℓ−1), D). Trees built from grids
    hold every level; trees loaded from an index hold the stored subset.
    `leaf_descriptors` keeps the Euclidean leaf descriptors d^(L,j) when the
    tree is built for loss computation.
    """

    depth: int
    config: BallConfig
    levels: Mapping[int, FloatArray]
    leaf_descriptors: FloatArray | None = field(default=None)

    def __post_init__(self) -> None:
        if not MIN_LEVELS <= self.depth <= MAX_LEVELS:
            raise InvalidInputError(f"tree depth must be within {MIN_LEVELS}..{MAX_LEVELS}, got {self.depth}")
        if not self.levels:
            raise InvalidInputError("a descriptor tree needs at least one level")
        levels = {}
        for level in sorted(self.levels):
            if not 1 <= level <= self.depth:
                raise InvalidInputError(f"level {level} outside 1..{self.depth}")
            points = np.array(self.levels[level], dtype=np.float64)
            expected = (2 ** (level - 1), self.config.dim)
            if points.shape != expected:
                raise InvalidInputError(f"level {level} must have shape {expected}, got {points.shape}")
            if not np.all(np.isfinite(points)):
                raise InvalidInputError(f"level {level} contains non-finite entries")
            if np.any(self.config.sqrt_c * np.linalg.norm(points, axis=-1) >= 1.0):
                raise InvalidInputError(f"level {level} has points outside the ball")
            points.setflags(write=False)
            levels[level] = points
        object.__setattr__(self, "levels", MappingProxyType(levels))
        if self.leaf_descriptors is not None:
            leaves = np.array(self.leaf_descriptors, dtype=np.float64)
            if leaves.shape != (2 ** (self.depth - 1), self.config.dim):
                raise InvalidInputError("leaf descriptors must hold one D-vector per leaf")
            leaves.setflags(write=False)
            object.__setattr__(self, "leaf_descriptors", leaves)

    @property
    def stored_levels(self) -> tuple[int, ...]:
        return tuple(self.levels)

    @property
    def is_complete(self) -> bool:
        return len(self.levels) == self.depth

    def level(self, level: int) -> FloatArray:
        try:
            return self.levels[level]
        except KeyError:
            raise ConfigurationError(f"level {level} is not held by this tree (levels {self.stored_levels})") from None

    def point(self, level: int, k: int) -> BallPoint:
        """Descriptor h^(ℓ,k), k 1-based"""
        points = self.level(level)
        if not 1 <= k <= points.shape[0]:
            raise InvalidInputError(f"level {level} has no descriptor {k}")
        return BallPoint(points[k - 1], self.config)

    @property
    def root(self) -> BallPoint:
        return self.point(1, 1)

    def restrict(self, levels: Sequence[int]) -> "DescriptorTree":
        """Copy holding only the given levels (leaf descriptors are dropped)"""
        return DescriptorTree(self.depth, self.config, {level: self.level(level) for level in levels})


def build_tree(leaf_grids: Sequence[FeatureGrid], pooling: PoolingConfig, config: BallConfig) -> DescriptorTree:
    """
    Hierarchical aggregation of leaf feature grids into a descriptor tree

    For every level ℓ each leaf j is pooled and projected by the level's own
    aggregator, d^(ℓ),j, and embedded with exp_0. Level-ℓ descriptors are the
    Einstein midpoints of the embedded leaves of each group (ℓ, k).

    Args:
        leaf_grids: Exactly 2^(L−1) leaf grids, left to right
        pooling: Aggregator parameters; its level count fixes L
        config: Ball configuration

    Returns:
        A complete tree that keeps the Euclidean leaf descriptors
    """
    depth = pooling.levels
    leaf_count = 2 ** (depth - 1)
    if len(leaf_grids) != leaf_count:
        raise InvalidInputError(f"a depth-{depth} tree needs {leaf_count} leaf grids, got {len(leaf_grids)}")
    if pooling.dim != config.dim:
        raise ConfigurationError(f"pooling produces {pooling.dim}-d descriptors, ball has dimension {config.dim}")
    ball = ball_for(config)
    pooled: dict[float, FloatArray] = {}
    levels: dict[int, FloatArray] = {}
    leaf_descriptors = None
    for level in range(1, depth + 1):
        p = pooling.exponent(level)
        if p not in pooled:
            pooled[p] = np.stack([gem_pool(grid, p) for grid in leaf_grids])
        descriptors = _project(pooled[p], level, pooling)
        embedded = ball.exp0(descriptors)
        size = 2 ** (depth - level)
        levels[level] = np.stack(
            [ball.einstein_midpoint(embedded[k * size:(k + 1) * size]) for k in range(2 ** (level - 1))]
        )
        if level == depth:
            leaf_descriptors = descriptors
    return DescriptorTree(depth, config, levels, leaf_descriptors)
