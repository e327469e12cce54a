"""
Database Index
Immutable panorama index with coarse-to-fine retrieval and distance accounting

Every search entry point accepts an optional `EvalCounter` and adds to it the
number of full-dimension hyperbolic distances it evaluated.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hyperplace.errors import ConfigurationError, InvalidInputError
from hyperplace.hierarchy import DescriptorTree, FeatureGrid, PoolingConfig, WindowLayout, build_tree
from hyperplace.hypgeo import BallConfig, BallPoint, FloatArray, ball_for

MAX_RECORD_ID = 2**64 - 1


class Preset(StrEnum):
    """Named retrieval variants, resolved against the index depth L"""

    O = "O"  # noqa: E741
    B = "B"
    L = "L"
    SW = "SW"

    def stored_levels(self, depth: int) -> tuple[int, ...]:
        match self:
            case Preset.O:
                return (1,)
            case Preset.B:
                return (1, depth - 1)
            case Preset.L:
                return (1, depth)
            case Preset.SW:
                return (depth,)

    def rescoring_levels(self, depth: int) -> tuple[int, ...]:
        match self:
            case Preset.O | Preset.SW:
                return ()
            case Preset.B:
                return (depth - 1,)
            case Preset.L:
                return (depth,)


class RetrievalConfig(BaseModel):
    """
    Shortlist size K′, rescoring levels 𝕃, fusion weights, z-score guard and result count K

    `weights` maps every level of {1} ∪ 𝕃 to its fusion weight and defaults
    to uniform. `exhaustive` selects the sliding-window search over leaf
    descriptors instead of the coarse-to-fine pipeline.
    """

    model_config = ConfigDict(frozen=True)

    k_prime: int = Field(default=100, ge=1)
    levels: tuple[int, ...] = ()
    weights: dict[int, float] | None = None
    eps: float = Field(default=1e-8, gt=0.0)
    top_k: int = Field(default=20, ge=1)
    exhaustive: bool = False

    @model_validator(mode="after")
    def _check(self) -> "RetrievalConfig":
        if len(set(self.levels)) != len(self.levels) or any(level < 2 for level in self.levels):
            raise ValueError(f"rescoring levels must be distinct and ≥ 2, got {self.levels}")
        object.__setattr__(self, "levels", tuple(sorted(self.levels)))
        if not self.exhaustive and self.top_k > self.k_prime:
            raise ValueError(f"top_k ({self.top_k}) cannot exceed k_prime ({self.k_prime})")
        fused = (1, *self.levels)
        if self.weights is None:
            object.__setattr__(self, "weights", dict.fromkeys(fused, 1.0))
        elif set(self.weights) != set(fused):
            raise ValueError(f"weights must be given for levels {fused}, got {sorted(self.weights)}")
        values = np.array(list(self.weights.values()))
        if not np.all(np.isfinite(values)) or not np.any(values != 0.0):
            raise ValueError("weights must be finite with at least one nonzero")
        return self

    @property
    def fused_levels(self) -> tuple[int, ...]:
        return (1, *self.levels)

    @classmethod
    def for_preset(
        cls,
        preset: Preset,
        depth: int,
        k_prime: int = 100,
        top_k: int = 20,
        weights: Mapping[int, float] | None = None,
    ) -> "RetrievalConfig":
        return cls(
            k_prime=k_prime,
            levels=preset.rescoring_levels(depth),
            weights=None if weights is None else dict(weights),
            top_k=top_k,
            exhaustive=preset is Preset.SW,
        )


class ScoredResult(BaseModel):
    """One ranked record with its per-level raw distances and normalised scores"""

    model_config = ConfigDict(frozen=True)

    id: int
    rank: int
    score: float
    distances: dict[int, float]
    normalized: dict[int, float] = {}


@dataclass
class EvalCounter:
    """Full-dimension hyperbolic distance evaluations of one query"""

    count: int = 0

    def add(self, evaluations: int) -> None:
        self.count += evaluations


@dataclass(frozen=True, eq=False)
class PanoramaRecord:
    id: int
    tree: DescriptorTree
    geotag: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.id <= MAX_RECORD_ID:
            raise InvalidInputError(f"record id {self.id} is not an unsigned 64-bit integer")
        if self.geotag is not None:
            latitude, longitude = (float(v) for v in self.geotag)
            if not (np.isfinite(latitude) and np.isfinite(longitude)):
                raise InvalidInputError(f"record {self.id} has a non-finite geotag")
            object.__setattr__(self, "geotag", (latitude, longitude))


class PanoramaSource(NamedTuple):
    """Input of build_index: one panorama's leaf grids, left to right"""

    id: int
    leaf_grids: Sequence[FeatureGrid]
    geotag: tuple[float, float] | None = None


@dataclass(frozen=True, eq=False)
class DatabaseIndex:
    """
    Immutable, id-ordered collection of descriptor trees

    Trees hold exactly `stored_levels`; their coordinates are the float64
    values of 32-bit floats, so an index equals its persisted form.
    """

    config: BallConfig
    layout: WindowLayout
    stored_levels: tuple[int, ...]
    records: tuple[PanoramaRecord, ...]
    _ids: np.ndarray = field(init=False, repr=False)
    _levels: dict[int, FloatArray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        depth = self.layout.levels
        levels = tuple(sorted(set(self.stored_levels)))
        if not levels or levels[0] < 1 or levels[-1] > depth:
            raise ConfigurationError(f"stored levels {self.stored_levels} must be a non-empty subset of 1..{depth}")
        records = tuple(sorted(self.records, key=lambda record: record.id))
        for record in records:
            tree = record.tree
            if tree.depth != depth or tree.config != self.config or tree.stored_levels != levels:
                raise ConfigurationError(f"record {record.id} does not match the index configuration")
        ids = np.array([record.id for record in records], dtype=np.uint64)
        if np.unique(ids).size != ids.size:
            raise InvalidInputError("record ids must be unique")
        stacked = {}
        for level in levels:
            shape = (len(records), 2 ** (level - 1), self.config.dim)
            array = np.stack([record.tree.level(level) for record in records]) if records else np.empty(shape)
            array.setflags(write=False)
            stacked[level] = array
        ids.setflags(write=False)
        object.__setattr__(self, "stored_levels", levels)
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_levels", stacked)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def depth(self) -> int:
        return self.layout.levels

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    def level_array(self, level: int) -> FloatArray:
        """Descriptors of one stored level for every record, shape (N, 2^(ℓ−1), D)"""
        try:
            return self._levels[level]
        except KeyError:
            raise ConfigurationError(f"level {level} is not stored in this index (stored {self.stored_levels})") from None

    def record(self, record_id: int) -> PanoramaRecord:
        position = int(np.searchsorted(self._ids, np.uint64(record_id)))
        if position == len(self.records) or self.records[position].id != record_id:
            raise InvalidInputError(f"no record with id {record_id}")
        return self.records[position]


def _storable(tree: DescriptorTree, stored_levels: Sequence[int]) -> DescriptorTree:
    levels = {level: tree.level(level).astype(np.float32).astype(np.float64) for level in stored_levels}
    return DescriptorTree(tree.depth, tree.config, levels)


def index_from_trees(
    trees: Sequence[DescriptorTree],
    config: BallConfig,
    layout: WindowLayout,
    stored_levels: Sequence[int] | None = None,
    ids: Sequence[int] | None = None,
    geotags: Sequence[tuple[float, float] | None] | None = None,
) -> DatabaseIndex:
    """
    Assemble an index from ready-made trees

    Args:
        trees: One complete (or sufficiently stored) tree per panorama
        config: Ball configuration shared by every tree
        layout: Window layout; its depth must equal the trees' depth
        stored_levels: Levels kept in the index (default: all)
        ids: Record ids (default: 0..N−1)
        geotags: Optional geotag per record

    Returns:
        The index, with descriptors rounded to 32-bit precision
    """
    stored = tuple(sorted(set(stored_levels or range(1, layout.levels + 1))))
    ids = list(range(len(trees))) if ids is None else list(ids)
    geotags = [None] * len(trees) if geotags is None else list(geotags)
    if not len(ids) == len(geotags) == len(trees):
        raise InvalidInputError("ids and geotags must match the number of trees")
    records = [
        PanoramaRecord(record_id, _storable(tree, stored), geotag)
        for record_id, tree, geotag in zip(ids, trees, geotags)
    ]
    return DatabaseIndex(config, layout, stored, tuple(records))


def build_index(
    panoramas: Iterable[PanoramaSource],
    pooling: PoolingConfig,
    config: BallConfig,
    layout: WindowLayout,
    stored_levels: Sequence[int] | None = None,
    workers: int = 1,
) -> DatabaseIndex:
    """
    Build one descriptor tree per panorama and assemble the index

    Args:
        panoramas: Panorama sources with unique ids
        pooling: Aggregator parameters; its depth must match the layout
        config: Ball configuration
        layout: Window layout of the panoramas
        stored_levels: Levels kept in the index (default: all)
        workers: Thread count for tree construction

    Returns:
        The index; identical for any worker count
    """
    sources = list(panoramas)
    if pooling.levels != layout.levels:
        raise ConfigurationError(f"pooling covers {pooling.levels} levels, layout has {layout.levels}")
    seen: set[int] = set()
    for source in sources:
        if source.id in seen:
            raise InvalidInputError(f"duplicate panorama id {source.id}")
        seen.add(source.id)

    logger.info(f"Building index | panoramas={len(sources)}, levels={layout.levels}, dim={config.dim}, workers={workers}")

    def build(source: PanoramaSource) -> DescriptorTree:
        return build_tree(source.leaf_grids, pooling, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(build, sources))
    else:
        trees = [build(source) for source in sources]

    index = index_from_trees(
        trees,
        config,
        layout,
        stored_levels,
        ids=[source.id for source in sources],
        geotags=[source.geotag for source in sources],
    )
    logger.success(f"Index built | records={len(index)}, stored_levels={list(index.stored_levels)}")
    return index


@dataclass(frozen=True)
class Shortlist:
    """Coarse-search candidates: index positions, ids and root distances d₁, best first"""

    positions: np.ndarray
    ids: np.ndarray
    distances: FloatArray

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return ((int(i), float(d)) for i, d in zip(self.ids, self.distances))


def _query_coords(h_q: BallPoint, index: DatabaseIndex) -> FloatArray:
    if h_q.config != index.config:
        raise ConfigurationError("query and index belong to balls with different configurations")
    return h_q.coords


def _count(counter: EvalCounter | None, evaluations: int) -> None:
    if counter is not None:
        counter.add(evaluations)


def coarse_search(h_q: BallPoint, index: DatabaseIndex, k_prime: int, counter: EvalCounter | None = None) -> Shortlist:
    """
    Shortlist the K′ records whose root descriptor h^(1,1) is closest to the query

    Args:
        h_q: Query descriptor
        index: Database index storing level 1
        k_prime: Shortlist size, clamped to N
        counter: Receives N evaluations

    Returns:
        Candidates by ascending distance, ties by ascending id
    """
    if k_prime < 1:
        raise InvalidInputError(f"k_prime must be ≥ 1, got {k_prime}")
    coords = _query_coords(h_q, index)
    roots = index.level_array(1)[:, 0, :]
    n = len(index)
    if n == 0:
        return Shortlist(np.empty(0, dtype=np.intp), np.empty(0, dtype=np.uint64), np.empty(0))
    if k_prime > n:
        logger.debug(f"Shortlist clamped | k_prime={k_prime}, records={n}")
    distances = ball_for(index.config).dist(coords, roots)
    _count(counter, n)
    order = np.lexsort((index.ids, distances))[:k_prime]
    return Shortlist(order, index.ids[order], distances[order])


def _level_min(coords: FloatArray, index: DatabaseIndex, positions: np.ndarray, level: int) -> FloatArray:
    descriptors = index.level_array(level)[positions]
    return ball_for(index.config).dist(coords, descriptors).min(axis=-1)


def level_min_distance(h_q: BallPoint, record: PanoramaRecord, level: int, counter: EvalCounter | None = None) -> float:
    """min over k of dist(h_q, h^(ℓ,k)) for one record; adds 2^(ℓ−1) evaluations"""
    tree = record.tree
    if not 2 <= level <= tree.depth:
        raise InvalidInputError(f"rescoring level must be within 2..{tree.depth}, got {level}")
    if h_q.config != tree.config:
        raise ConfigurationError("query and record belong to balls with different configurations")
    descriptors = tree.level(level)
    _count(counter, descriptors.shape[0])
    return float(ball_for(tree.config).dist(h_q.coords, descriptors).min())


def rescore(ids: Sequence[int] | np.ndarray, level_distances: Mapping[int, FloatArray], config: RetrievalConfig) -> list[ScoredResult]:
    """
    Z-score fusion of per-level shortlist distances

    Args:
        ids: Candidate ids
        level_distances: Distances per level of {1} ∪ 𝕃, aligned with ids
        config: Weights and z-score guard ε

    Returns:
        Every candidate ranked by fused score s = Σ w_ℓ ŝ_ℓ descending, ties
        by ascending id, where ŝ_ℓ = −(d_ℓ − μ_ℓ)/(σ_ℓ + ε) with the
        population σ over the candidates

    Example:
        >>> cfg = RetrievalConfig(k_prime=3, top_k=3, eps=1e-12)
        >>> [round(r.score, 6) for r in rescore([7, 8, 9], {1: np.array([1.0, 2.0, 3.0])}, cfg)]
        [1.224745, 0.0, -1.224745]
    """
    ids = np.asarray(ids, dtype=np.uint64)
    if ids.size == 0:
        return []
    fused = np.zeros(ids.size)
    normalized = {}
    distances = {}
    for level in config.fused_levels:
        if level not in level_distances:
            raise ConfigurationError(f"no shortlist distances for level {level}")
        d = np.asarray(level_distances[level], dtype=np.float64)
        if d.shape != ids.shape:
            raise InvalidInputError(f"level {level} distances do not align with the candidates")
        z = -(d - d.mean()) / (d.std() + config.eps)
        distances[level] = d
        normalized[level] = z
        fused += config.weights[level] * z
    order = np.lexsort((ids, -fused))
    return _results(ids, order, fused, distances, normalized)


def _results(
    ids: np.ndarray,
    order: np.ndarray,
    scores: FloatArray,
    distances: Mapping[int, FloatArray],
    normalized: Mapping[int, FloatArray],
) -> list[ScoredResult]:
    return [
        ScoredResult(
            id=int(ids[i]),
            rank=rank,
            score=float(scores[i]),
            distances={level: float(d[i]) for level, d in distances.items()},
            normalized={level: float(z[i]) for level, z in normalized.items()},
        )
        for rank, i in enumerate(order, start=1)
    ]


def retrieve(h_q: BallPoint, index: DatabaseIndex, config: RetrievalConfig, counter: EvalCounter | None = None) -> list[ScoredResult]:
    """
    Coarse-to-fine retrieval: root shortlist, level rescoring, z-score fusion

    Evaluates N + K′·Σ_{ℓ∈𝕃} 2^(ℓ−1) distances. With 𝕃 = ∅ the coarse
    order is the final order and the score is ŝ₁. An exhaustive config is delegated to
    exhaustive_search.

    Args:
        h_q: Query descriptor
        index: Database index
        config: Retrieval configuration
        counter: Receives the evaluation count

    Returns:
        Up to K ranked results
    """
    if config.exhaustive:
        return exhaustive_search(h_q, index, config.top_k, counter)
    missing = [level for level in config.levels if level > index.depth or level not in index.stored_levels]
    if missing:
        raise ConfigurationError(f"rescoring levels {missing} are not stored in this index (stored {index.stored_levels})")
    shortlist = coarse_search(h_q, index, config.k_prime, counter)
    if not len(shortlist):
        return []
    distances = {1: shortlist.distances}
    for level in config.levels:
        distances[level] = _level_min(h_q.coords, index, shortlist.positions, level)
        _count(counter, len(shortlist) * 2 ** (level - 1))
    if config.levels:
        ranked = rescore(shortlist.ids, distances, config)
    else:
        d = shortlist.distances
        z = -(d - d.mean()) / (d.std() + config.eps)
        # one level: the weight cannot reorder, so the score is ŝ₁ itself
        ranked = _results(shortlist.ids, np.arange(len(shortlist)), z, distances, {1: z})
    return ranked[: config.top_k]


def exhaustive_search(h_q: BallPoint, index: DatabaseIndex, top_k: int, counter: EvalCounter | None = None) -> list[ScoredResult]:
    """
    Sliding-window oracle: rank every record by its closest leaf descriptor

    Evaluates N·2^(L−1) distances. Scores are negated leaf distances.
    """
    if top_k < 1:
        raise InvalidInputError(f"top_k must be ≥ 1, got {top_k}")
    coords = _query_coords(h_q, index)
    depth = index.depth
    leaves = index.level_array(depth)
    if len(index) == 0:
        return []
    distances = ball_for(index.config).dist(coords, leaves).min(axis=-1)
    _count(counter, len(index) * 2 ** (depth - 1))
    order = np.lexsort((index.ids, distances))[:top_k]
    return _results(index.ids, order, -distances, {depth: distances}, {})


def closed_form_evaluations(n_records: int, depth: int, config: RetrievalConfig) -> int:
    """Distance evaluations a query costs under `config`, without running it"""
    if config.exhaustive:
        return n_records * 2 ** (depth - 1)
    shortlist = min(config.k_prime, n_records)
    return n_records + shortlist * sum(2 ** (level - 1) for level in config.levels)
