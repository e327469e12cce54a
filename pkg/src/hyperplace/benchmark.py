"""
Benchmark Harness
Recall, distance-evaluation and latency reports over a query set
"""

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict

from hyperplace.errors import ConfigurationError, InvalidInputError
from hyperplace.hierarchy import FeatureGrid, PoolingConfig, PoolingSpec, embed_query, gem_pool, project_desc, window_layout
from hyperplace.hypgeo import BallConfig, BallPoint
from hyperplace.index import (
    DatabaseIndex,
    EvalCounter,
    PanoramaSource,
    RetrievalConfig,
    ScoredResult,
    build_index,
    coarse_search,
    retrieve,
)
from hyperplace.storage import read_ground_truth, read_pooling_spec, read_query_grid
from hyperplace.synth import evaluate_recall

RECALL_CUTOFFS = (1, 5, 10, 20)
WEIGHT_STEP = 0.25


class BenchReport(BaseModel):
    """JSON report of one benchmark run"""

    model_config = ConfigDict(frozen=True)

    n_records: int
    n_queries: int
    config: dict[str, Any]
    recall_at: dict[int, float]
    mean_eval_count: float
    mean_query_micros: float
    storage_bytes: int


class GeometryComparison(BaseModel):
    """Recall of a Euclidean global descriptor against the hyperbolic root descriptor"""

    model_config = ConfigDict(frozen=True)

    n_records: int
    n_queries: int
    euclidean: dict[int, float]
    hyperbolic: dict[int, float]


@dataclass(frozen=True)
class QuerySet:
    names: list[str]
    grids: list[FeatureGrid]
    panorama_ids: list[int]
    leaves: list[int]

    def __len__(self) -> int:
        return len(self.names)


def load_query_set(queries_dir: Path | str) -> QuerySet:
    """Query grids listed in `ground_truth.csv`, in file order"""
    queries_dir = Path(queries_dir)
    truth = read_ground_truth(queries_dir)
    missing = {"query", "panorama_id", "leaf"} - set(truth.columns)
    if missing:
        raise InvalidInputError(f"ground truth is missing columns {sorted(missing)}")
    grids = [read_query_grid(queries_dir / name) for name in truth["query"]]
    return QuerySet(
        names=list(truth["query"]),
        grids=grids,
        panorama_ids=[int(i) for i in truth["panorama_id"]],
        leaves=[int(j) for j in truth["leaf"]],
    )


def pooling_for_index(index_path: Path | str, index: DatabaseIndex) -> PoolingConfig:
    """Pooling from the index sidecar; identity projection with p = 3 when there is none"""
    spec = read_pooling_spec(index_path)
    if spec is None:
        logger.warning(f"No pooling sidecar for {index_path}, using identity projection")
        spec = PoolingSpec(levels=index.depth, channels=index.config.dim, dim=index.config.dim)
    if spec.levels != index.depth or spec.dim != index.config.dim:
        raise ConfigurationError("pooling sidecar does not match the index depth or dimension")
    return spec.to_config()


def embed_queries(grids: Sequence[FeatureGrid], pooling: PoolingConfig, config: BallConfig) -> list[BallPoint]:
    return [embed_query(grid, pooling, config) for grid in grids]


def _evaluation_config(config: RetrievalConfig) -> RetrievalConfig:
    top_k = max(RECALL_CUTOFFS) if config.exhaustive else min(max(RECALL_CUTOFFS), config.k_prime)
    return config.model_copy(update={"top_k": max(top_k, config.top_k)})


def run_queries(
    index: DatabaseIndex,
    queries: Sequence[BallPoint],
    config: RetrievalConfig,
    workers: int = 1,
) -> tuple[list[list[ScoredResult]], list[int], list[float]]:
    """
    Retrieve every query, each with its own counter

    Returns:
        Ranked results, evaluation counts and wall-clock microseconds per query,
        in query order
    """

    def one(h_q: BallPoint) -> tuple[list[ScoredResult], int, float]:
        counter = EvalCounter()
        start = time.perf_counter_ns()
        results = retrieve(h_q, index, config, counter)
        return results, counter.count, (time.perf_counter_ns() - start) / 1e3

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, queries))
    else:
        outcomes = [one(h_q) for h_q in queries]
    return [o[0] for o in outcomes], [o[1] for o in outcomes], [o[2] for o in outcomes]


def recall_table(results: Sequence[Sequence[ScoredResult]], ground_truth: Sequence[int]) -> dict[int, float]:
    ranked = [[r.id for r in rs] for rs in results]
    return {k: evaluate_recall(ranked, ground_truth, k) for k in RECALL_CUTOFFS}


def weight_grid(levels: Sequence[int], step: float = WEIGHT_STEP) -> list[dict[int, float]]:
    """
    Weight vectors over `levels` on the simplex grid of the given step

    Example:
        >>> weight_grid((1, 5), 0.5)
        [{1: 0.0, 5: 1.0}, {1: 0.5, 5: 0.5}, {1: 1.0, 5: 0.0}]
    """
    divisions = round(1.0 / step)
    grid = []
    for combo in itertools.product(range(divisions + 1), repeat=len(levels)):
        if sum(combo) == divisions:
            grid.append({level: count / divisions for level, count in zip(levels, combo)})
    return grid


def grid_search_weights(
    index: DatabaseIndex,
    queries: Sequence[BallPoint],
    ground_truth: Sequence[int],
    config: RetrievalConfig,
    step: float = WEIGHT_STEP,
    workers: int = 1,
) -> tuple[RetrievalConfig, float]:
    """
    Fusion weights with the best recall@1; ties keep the first in grid order

    Returns:
        The config with the selected weights and its recall@1
    """
    if config.exhaustive or not config.levels:
        results, _, _ = run_queries(index, queries, config, workers)
        return config, recall_table(results, ground_truth)[1]
    best: tuple[RetrievalConfig, float] | None = None
    for weights in weight_grid(config.fused_levels, step):
        candidate = config.model_copy(update={"weights": weights})
        results, _, _ = run_queries(index, queries, candidate, workers)
        recall = evaluate_recall([[r.id for r in rs] for rs in results], ground_truth, 1)
        logger.debug(f"Weight candidate | weights={weights}, recall@1={recall:.4f}")
        if best is None or recall > best[1]:
            best = (candidate, recall)
    assert best is not None
    logger.info(f"Weights selected | weights={best[0].weights}, recall@1={best[1]:.4f}")
    return best


def run_benchmark(
    index: DatabaseIndex,
    queries: Sequence[BallPoint],
    ground_truth: Sequence[int],
    config: RetrievalConfig,
    storage_bytes: int,
    workers: int = 1,
    labels: dict[str, Any] | None = None,
) -> tuple[BenchReport, pd.DataFrame]:
    """
    Evaluate one retrieval configuration over a query set

    Args:
        index: Database index
        queries: Embedded queries
        ground_truth: Ground-truth panorama id per query
        config: Retrieval configuration; results are taken to depth 20
        storage_bytes: Persisted index size reported alongside
        workers: Thread count for the queries
        labels: Extra entries for the report's `config` (mode, preset, ...)

    Returns:
        The report and a per-query table
    """
    if len(queries) != len(ground_truth):
        raise InvalidInputError(f"{len(queries)} queries for {len(ground_truth)} ground-truth entries")
    if not queries:
        raise InvalidInputError("benchmark needs at least one query")
    if config.k_prime > len(index) and not config.exhaustive:
        logger.warning(f"Shortlist clamped | k_prime={config.k_prime}, records={len(index)}")
    evaluation = _evaluation_config(config)
    results, counts, micros = run_queries(index, queries, evaluation, workers)
    report = BenchReport(
        n_records=len(index),
        n_queries=len(queries),
        config={
            **(labels or {}),
            "k_prime": config.k_prime,
            "levels": list(config.levels),
            "weights": {str(level): w for level, w in (config.weights or {}).items()},
            "exhaustive": config.exhaustive,
            "top_k": config.top_k,
            "workers": workers,
        },
        recall_at=recall_table(results, ground_truth),
        mean_eval_count=float(np.mean(counts)),
        mean_query_micros=float(np.mean(micros)),
        storage_bytes=storage_bytes,
    )
    table = pd.DataFrame(
        {
            "query": range(len(queries)),
            "panorama_id": list(ground_truth),
            "top1": [rs[0].id if rs else -1 for rs in results],
            "truth_rank": [next((r.rank for r in rs if r.id == truth), 0) for rs, truth in zip(results, ground_truth)],
            "evals": counts,
            "micros": micros,
        }
    )
    logger.success(
        f"Benchmark finished | queries={report.n_queries}, recall@1={report.recall_at[1]:.4f}, "
        f"evals={report.mean_eval_count:.1f}, micros={report.mean_query_micros:.1f}"
    )
    return report, table


def euclidean_global_descriptor(leaf_grids: Sequence[FeatureGrid], pooling: PoolingConfig) -> np.ndarray:
    """Level-1 projection of GeM over the cells of every leaf window of a panorama"""
    cells = np.concatenate([grid.values.reshape(-1, grid.channels) for grid in leaf_grids])
    pooled = gem_pool(FeatureGrid(cells[None, :, :]), pooling.exponent(1))
    return project_desc(pooled, 1, pooling).coords


def compare_geometries(
    sources: Sequence[PanoramaSource],
    queries: Sequence[FeatureGrid],
    ground_truth: Sequence[int],
    pooling: PoolingConfig,
    config: BallConfig,
) -> GeometryComparison:
    """
    Rank every panorama by (a) L2 distance between Euclidean global descriptors
    and (b) hyperbolic distance to the root descriptor h^(1,1)
    """
    if not sources:
        raise InvalidInputError("comparison needs at least one panorama")
    index = build_index(sources, pooling, config, window_layout(pooling.levels), stored_levels=(1,))
    ids = index.ids
    order = np.argsort(np.array([s.id for s in sources]), kind="stable")
    globals_ = np.stack([euclidean_global_descriptor(sources[i].leaf_grids, pooling) for i in order])

    euclidean, hyperbolic = [], []
    for grid in queries:
        d_q = project_desc(gem_pool(grid, pooling.exponent("query")), "query", pooling).coords
        distances = np.linalg.norm(globals_ - d_q, axis=-1)
        euclidean.append([int(i) for i in ids[np.lexsort((ids, distances))[: max(RECALL_CUTOFFS)]]])
        h_q = embed_query(grid, pooling, config)
        hyperbolic.append([i for i, _ in coarse_search(h_q, index, max(RECALL_CUTOFFS))])

    comparison = GeometryComparison(
        n_records=len(index),
        n_queries=len(queries),
        euclidean={k: evaluate_recall(euclidean, ground_truth, k) for k in RECALL_CUTOFFS},
        hyperbolic={k: evaluate_recall(hyperbolic, ground_truth, k) for k in RECALL_CUTOFFS},
    )
    logger.success(
        f"Geometry comparison | euclidean@1={comparison.euclidean[1]:.4f}, hyperbolic@1={comparison.hyperbolic[1]:.4f}"
    )
    return comparison
