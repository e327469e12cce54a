"""
Synthetic Scenes
Deterministic panorama feature grids with planted query matches

Each panorama is a cyclic feature strip W' = 8W wide: a per-scene signature
plus low-frequency harmonics along the strip plus per-cell detail, folded to
be nonnegative. Leaf grids are cut from the strip by the window layout, so
overlapping windows share columns. A query copies one leaf and adds
nonnegative noise.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hyperplace.errors import InvalidInputError
from hyperplace.hierarchy import MAX_LEVELS, MIN_LEVELS, PANORAMA_WIDTH_RATIO, DescriptorTree, FeatureGrid, WindowLayout, window_layout
from hyperplace.hypgeo import BallConfig
from hyperplace.index import PanoramaSource
from hyperplace.storage import GEOTAGS_CSV, GROUND_TRUTH_CSV, write_grids

GEOTAG_ORIGIN = (0.0, 0.0)
GEOTAG_SPACING = 0.0005  # degrees, roughly 50 m
QUERY_SELECTION_STREAM = 0x51


class SceneSpec(BaseModel):
    """Size, shape and randomness of a synthetic dataset"""

    model_config = ConfigDict(frozen=True)

    n_panoramas: int = Field(ge=1)
    channels: int = Field(default=16, ge=1)
    grid_height: int = Field(default=4, ge=1)
    grid_width: int = Field(default=4, ge=1)  # cells per query width W
    levels: int = Field(default=5, ge=MIN_LEVELS, le=MAX_LEVELS)
    noise: float = Field(default=0.1, ge=0.0, allow_inf_nan=False)
    queries_per_panorama: int = Field(default=1, ge=0)
    query_limit: int | None = Field(default=None, ge=0)
    seed: int = Field(default=0, ge=0)
    harmonics: int = Field(default=3, ge=0)
    variation: float = Field(default=0.5, ge=0.0, allow_inf_nan=False)
    detail: float = Field(default=0.3, ge=0.0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _check_alignment(self) -> "SceneSpec":
        if (PANORAMA_WIDTH_RATIO * self.grid_width) % 2 ** (self.levels - 1):
            raise ValueError(
                f"a {PANORAMA_WIDTH_RATIO * self.grid_width}-column strip cannot be cut into "
                f"{2 ** (self.levels - 1)} evenly strided leaves; raise grid_width"
            )
        return self

    @property
    def strip_width(self) -> int:
        return PANORAMA_WIDTH_RATIO * self.grid_width


@dataclass(frozen=True, eq=False)
class SyntheticPanorama:
    id: int
    leaves: tuple[FeatureGrid, ...]
    geotag: tuple[float, float]


@dataclass(frozen=True, eq=False)
class SyntheticQuery:
    grid: FeatureGrid
    panorama_id: int
    leaf: int  # 1-based leaf window the query was cut from


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    spec: SceneSpec
    layout: WindowLayout
    panoramas: tuple[SyntheticPanorama, ...]
    queries: tuple[SyntheticQuery, ...]

    def sources(self) -> list[PanoramaSource]:
        return [PanoramaSource(p.id, p.leaves, p.geotag) for p in self.panoramas]

    def ground_truth(self) -> list[int]:
        return [q.panorama_id for q in self.queries]


def grid_geotag(panorama_id: int, n_panoramas: int) -> tuple[float, float]:
    """Geotags on a square grid, row-major by id"""
    side = math.isqrt(max(n_panoramas - 1, 0)) + 1
    row, col = divmod(panorama_id, side)
    return (GEOTAG_ORIGIN[0] + row * GEOTAG_SPACING, GEOTAG_ORIGIN[1] + col * GEOTAG_SPACING)


def panorama_strip(spec: SceneSpec, panorama_id: int) -> np.ndarray:
    """The (h_f, 8·w_f, C) nonnegative feature strip of one panorama"""
    rng = np.random.default_rng([spec.seed, panorama_id])
    width = spec.strip_width
    signature = rng.normal(size=spec.channels)
    phase = 2.0 * np.pi * np.arange(width) / width
    latent = np.zeros((width, spec.channels))
    for f in range(1, spec.harmonics + 1):
        a, b = rng.normal(size=(2, spec.channels))
        latent += (np.cos(f * phase)[:, None] * a + np.sin(f * phase)[:, None] * b) / f
    detail = rng.normal(size=(spec.grid_height, width, spec.channels))
    strip = signature + spec.variation * latent[None, :, :] + spec.detail * detail
    return np.abs(strip) / math.sqrt(spec.channels)


def _generate_panorama(
    spec: SceneSpec, layout: WindowLayout, columns: Sequence[np.ndarray], panorama_id: int
) -> tuple[SyntheticPanorama, list[SyntheticQuery]]:
    strip = panorama_strip(spec, panorama_id)
    leaves = tuple(FeatureGrid(strip[:, cols, :]) for cols in columns)
    queries = []
    for q in range(spec.queries_per_panorama):
        rng = np.random.default_rng([spec.seed, panorama_id, 1 + q])
        leaf = int(rng.integers(layout.leaf_count)) + 1
        source = leaves[leaf - 1].values
        noise = spec.noise * np.abs(rng.normal(size=source.shape)) / math.sqrt(spec.channels)
        queries.append(SyntheticQuery(FeatureGrid(source + noise), panorama_id, leaf))
    panorama = SyntheticPanorama(panorama_id, leaves, grid_geotag(panorama_id, spec.n_panoramas))
    return panorama, queries


def generate_dataset(spec: SceneSpec, workers: int = 1) -> SyntheticDataset:
    """
    Generate panoramas and queries; fully determined by `spec`

    Args:
        spec: Scene specification
        workers: Thread count; per-panorama seed streams make the result
            independent of it

    Returns:
        The dataset, panoramas in id order and queries in (panorama, index)
        order, optionally subsampled to `query_limit`
    """
    layout = window_layout(spec.levels)
    columns = layout.leaf_columns(spec.grid_width)
    logger.info(
        f"Generating scene | panoramas={spec.n_panoramas}, levels={spec.levels}, "
        f"channels={spec.channels}, noise={spec.noise}, seed={spec.seed}"
    )

    def make(panorama_id: int) -> tuple[SyntheticPanorama, list[SyntheticQuery]]:
        return _generate_panorama(spec, layout, columns, panorama_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            generated = list(pool.map(make, range(spec.n_panoramas)))
    else:
        generated = [make(panorama_id) for panorama_id in range(spec.n_panoramas)]

    panoramas = tuple(panorama for panorama, _ in generated)
    queries = [query for _, batch in generated for query in batch]
    if spec.query_limit is not None and spec.query_limit < len(queries):
        rng = np.random.default_rng([spec.seed, QUERY_SELECTION_STREAM])
        chosen = np.sort(rng.choice(len(queries), size=spec.query_limit, replace=False))
        queries = [queries[i] for i in chosen]
    logger.success(f"Scene generated | panoramas={len(panoramas)}, queries={len(queries)}")
    return SyntheticDataset(spec, layout, panoramas, tuple(queries))


def write_dataset(dataset: SyntheticDataset, out_dir: Path | str) -> Path:
    """
    Write a dataset directory

    Layout:
        scene.json
        panoramas/panorama_<id>.hfgr, panoramas/geotags.csv
        queries/query_<n>.hfgr, queries/ground_truth.csv
    """
    out_dir = Path(out_dir)
    panorama_dir = out_dir / "panoramas"
    query_dir = out_dir / "queries"
    panorama_dir.mkdir(parents=True, exist_ok=True)
    query_dir.mkdir(parents=True, exist_ok=True)

    (out_dir / "scene.json").write_text(dataset.spec.model_dump_json(indent=2))
    for panorama in dataset.panoramas:
        write_grids(panorama_dir / f"panorama_{panorama.id}.hfgr", panorama.leaves)
    pd.DataFrame(
        {
            "id": [p.id for p in dataset.panoramas],
            "latitude": [p.geotag[0] for p in dataset.panoramas],
            "longitude": [p.geotag[1] for p in dataset.panoramas],
        }
    ).to_csv(panorama_dir / GEOTAGS_CSV, index=False)

    for n, query in enumerate(dataset.queries):
        write_grids(query_dir / f"query_{n}.hfgr", [query.grid])
    pd.DataFrame(
        {
            "query": [f"query_{n}.hfgr" for n in range(len(dataset.queries))],
            "panorama_id": [q.panorama_id for q in dataset.queries],
            "leaf": [q.leaf for q in dataset.queries],
        }
    ).to_csv(query_dir / GROUND_TRUTH_CSV, index=False)

    logger.success(f"Dataset written | dir={out_dir}, panoramas={len(dataset.panoramas)}, queries={len(dataset.queries)}")
    return out_dir


def evaluate_recall(results: Sequence[Sequence[int]], ground_truth: Sequence[int | None], k: int) -> float:
    """
    Fraction of queries whose ground-truth panorama is among their top-k results

    Args:
        results: Ranked record ids per query
        ground_truth: Ground-truth panorama id per query
        k: Cut-off, ≥ 1

    Returns:
        Recall@k in [0, 1]

    Example:
        >>> evaluate_recall([[1], [2], [3], [9]], [1, 2, 3, 4], k=1)
        0.75
    """
    if k < 1:
        raise InvalidInputError(f"k must be ≥ 1, got {k}")
    if len(results) != len(ground_truth):
        raise InvalidInputError(f"{len(results)} result lists for {len(ground_truth)} ground-truth entries")
    if not results:
        raise InvalidInputError("recall of an empty query set")
    hits = 0
    for ranked, truth in zip(results, ground_truth):
        if truth is None:
            raise InvalidInputError("a query has no ground truth")
        hits += int(truth) in (int(i) for i in list(ranked)[:k])
    return hits / len(results)


def random_trees(n: int, depth: int, config: BallConfig, seed: int = 0, max_norm: float = 0.9) -> list[DescriptorTree]:
    """
    Trees of independent random points, for experiments that only need shapes and counts

    Coordinates are Gaussian, squashed radially below `max_norm`.
    """
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n):
        levels = {}
        for level in range(1, depth + 1):
            raw = rng.normal(scale=0.5, size=(2 ** (level - 1), config.dim))
            norms = np.linalg.norm(raw, axis=-1, keepdims=True)
            levels[level] = raw * (max_norm * np.tanh(norms) / np.where(norms > 0.0, norms, 1.0) / config.sqrt_c)
        trees.append(DescriptorTree(depth, config, levels))
    return trees
