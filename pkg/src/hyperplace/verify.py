"""
Verification Suite
Named end-to-end checks of the geometry, retrieval, persistence and loss machinery

Each check returns (passed, detail). `run_checks` times them and logs the
outcome; the `verify` subcommand exits non-zero when any check fails.
"""

import time
from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Callable

import numpy as np
from loguru import logger

from hyperplace.benchmark import embed_queries, grid_search_weights, run_queries
from hyperplace.errors import FormatError
from hyperplace.hierarchy import PoolingSpec, window_layout
from hyperplace.hypgeo import BallConfig, BallPoint, PoincareBall
from hyperplace.index import (
    DatabaseIndex,
    EvalCounter,
    Preset,
    RetrievalConfig,
    build_index,
    closed_form_evaluations,
    coarse_search,
    exhaustive_search,
    index_from_trees,
    retrieve,
)
from hyperplace.losses import Loss, grad_check, optimize, random_batch, smooth_batch
from hyperplace.storage import decode_index, encode_index, record_payload_bytes
from hyperplace.synth import SceneSpec, evaluate_recall, generate_dataset, random_trees
from hyperplace.viz import export_coordinates, level_norm_means

Outcome = tuple[bool, str]
SCENE_SEED = 7


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass(frozen=True)
class Scene:
    index: DatabaseIndex
    queries: list[BallPoint]
    ground_truth: list[int]


@lru_cache(maxsize=4)
def _scene(n_panoramas: int, n_queries: int, noise: float = 0.1, seed: int = SCENE_SEED) -> Scene:
    spec = SceneSpec(n_panoramas=n_panoramas, levels=5, noise=noise, query_limit=n_queries, seed=seed)
    dataset = generate_dataset(spec)
    pooling = PoolingSpec(levels=spec.levels, channels=spec.channels, dim=spec.channels).to_config()
    config = BallConfig(dim=spec.channels)
    index = build_index(dataset.sources(), pooling, config, dataset.layout)
    queries = embed_queries([q.grid for q in dataset.queries], pooling, config)
    return Scene(index, queries, dataset.ground_truth())


def _interior(rng: np.random.Generator, n: int, dim: int, max_norm: float = 0.9) -> np.ndarray:
    directions = rng.normal(size=(n, dim))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    return directions * rng.uniform(0.0, max_norm, size=(n, 1))


def check_geometry() -> Outcome:
    rng = np.random.default_rng(42)
    worst = {"symmetry": 0.0, "identity": 0.0, "triangle": 0.0, "forms": 0.0, "origin_roundtrip": 0.0, "roundtrip": 0.0}
    for dim in (2, 8, 64):
        ball = PoincareBall(BallConfig(dim=dim))
        x, y, z = (_interior(rng, 10_000, dim) for _ in range(3))
        d_xy = ball.dist(x, y)
        worst["symmetry"] = max(worst["symmetry"], float(np.abs(d_xy - ball.dist(y, x)).max()))
        worst["identity"] = max(worst["identity"], float(np.abs(ball.dist(x, x)).max()))
        worst["triangle"] = max(worst["triangle"], float((ball.dist(x, z) - d_xy - ball.dist(y, z)).max()))
        worst["forms"] = max(worst["forms"], float((np.abs(d_xy - ball.dist_arccosh(x, y)) / d_xy).max()))

        v = rng.normal(size=(10_000, dim))
        v *= rng.uniform(0.0, 5.0, size=(10_000, 1)) / np.linalg.norm(v, axis=-1, keepdims=True)
        worst["origin_roundtrip"] = max(worst["origin_roundtrip"], float(np.abs(ball.log0(ball.exp0(v)) - v).max()))
        # tangent vectors of Riemannian length ≤ 5 at x
        lam = ball.conformal_factor(x)[:, None]
        w = v / lam
        worst["roundtrip"] = max(worst["roundtrip"], float(np.abs(ball.log_map(x, ball.exp_map(x, w)) - w).max()))

    passed = (
        worst["symmetry"] <= 1e-12
        and worst["identity"] == 0.0
        and worst["triangle"] <= 1e-9
        and worst["forms"] <= 1e-9
        and worst["origin_roundtrip"] <= 1e-9
        and worst["roundtrip"] <= 1e-9
    )
    return passed, ", ".join(f"{key}={value:.2e}" for key, value in worst.items())


def check_midpoint() -> Outcome:
    rng = np.random.default_rng(42)
    ball = PoincareBall(BallConfig(dim=1))
    oracle = abs(float(ball.einstein_midpoint(np.array([[0.0], [0.6]]))[0]) - 1.0 / 3.0)

    ball8 = PoincareBall(BallConfig(dim=8))
    permutation_ok = True
    excess = -np.inf
    for _ in range(1_000):
        group = _interior(rng, int(rng.integers(1, 12)), 8, max_norm=0.99)
        mid = ball8.einstein_midpoint(group)
        shuffled = ball8.einstein_midpoint(group[rng.permutation(len(group))])
        permutation_ok &= bool(np.array_equal(mid, shuffled))
        excess = max(excess, float(np.linalg.norm(mid) - np.linalg.norm(group, axis=-1).max()))
    passed = oracle <= 1e-12 and permutation_ok and excess <= 1e-9
    return passed, f"oracle_error={oracle:.2e}, permutation_exact={permutation_ok}, norm_excess={excess:.2e}"


def check_oracle_equivalence() -> Outcome:
    scene = _scene(500, 100)
    n = len(scene.index)
    config = RetrievalConfig(k_prime=n, levels=(5,), weights={1: 0.0, 5: 1.0}, top_k=n)
    mismatches = 0
    for h_q in scene.queries:
        hier = [r.id for r in retrieve(h_q, scene.index, config)]
        oracle = [r.id for r in exhaustive_search(h_q, scene.index, n)]
        mismatches += hier != oracle
    return mismatches == 0, f"queries={len(scene.queries)}, mismatched_rankings={mismatches}"


def check_shortlist_containment() -> Outcome:
    scene = _scene(500, 100)
    config = RetrievalConfig(k_prime=50, levels=(5,), weights={1: 0.0, 5: 1.0}, top_k=1)
    contained = violations = 0
    for h_q in scene.queries:
        best = exhaustive_search(h_q, scene.index, 1)[0].id
        if best in {i for i, _ in coarse_search(h_q, scene.index, 50)}:
            contained += 1
            violations += retrieve(h_q, scene.index, config)[0].id != best
    return violations == 0, f"contained={contained}/{len(scene.queries)}, violations={violations}"


def check_efficiency() -> Outcome:
    depth, n = 5, 10_000
    config = BallConfig(dim=8)
    index = index_from_trees(random_trees(n, depth, config, seed=SCENE_SEED), config, window_layout(depth))
    hier = RetrievalConfig(k_prime=100, levels=(5,), top_k=20)
    exhaustive = RetrievalConfig(k_prime=100, exhaustive=True)
    rng = np.random.default_rng(SCENE_SEED)
    counts = []
    for coords in _interior(rng, 3, config.dim):
        h_q = BallPoint(coords, config)
        for cfg in (hier, exhaustive):
            counter = EvalCounter()
            retrieve(h_q, index, cfg, counter)
            counts.append(counter.count)
    expected = [11_600, 160_000] * 3
    closed = [closed_form_evaluations(n, depth, hier), closed_form_evaluations(n, depth, exhaustive)]
    passed = counts == expected and closed == expected[:2]
    return passed, f"hier={counts[0]}, exhaustive={counts[1]}, reduction={counts[1] / counts[0]:.2f}x"


def check_storage_ratio() -> Outcome:
    base = record_payload_bytes(2048, (1, 4))
    large = record_payload_bytes(2048, (1, 5))
    measured = base / large
    reference = 147.6 / 278.8
    passed = abs(measured - reference) / reference <= 0.05
    return passed, f"payload_ratio={measured:.4f}, reference={reference:.4f}"


def check_gradients(configurations: int = 100) -> Outcome:
    rng = np.random.default_rng(42)
    worst = {}
    for loss in (Loss.HIER, Loss.HYP, Loss.EUC):
        errors = []
        for _ in range(configurations):
            batch = smooth_batch(rng, loss, depth=3, dim=4, negatives=3)
            errors.append(grad_check(loss, batch).max_relative_error)
        worst[loss] = max(errors)
    passed = all(error < 1e-4 for error in worst.values())
    return passed, ", ".join(f"{loss}={error:.2e}" for loss, error in worst.items())


def check_toy_optimization() -> Outcome:
    batch = random_batch(np.random.default_rng(SCENE_SEED), depth=3, dim=4, negatives=1, scale=0.15)
    result = optimize(batch, steps=200, lr=0.05)
    ratio = result.final_loss / result.initial_loss
    return ratio < 0.5, f"initial={result.initial_loss:.4f}, final={result.final_loss:.4f}, ratio={ratio:.3f}"


def check_recall_tradeoff() -> Outcome:
    scene = _scene(2_000, 500)
    depth = scene.index.depth
    truth = scene.ground_truth

    def recall_at_1(config: RetrievalConfig) -> float:
        results, _, _ = run_queries(scene.index, scene.queries, config)
        return evaluate_recall([[r.id for r in rs] for rs in results], truth, 1)

    exhaustive = recall_at_1(RetrievalConfig.for_preset(Preset.SW, depth))
    overview = recall_at_1(RetrievalConfig.for_preset(Preset.O, depth, k_prime=100))
    _, large = grid_search_weights(scene.index, scene.queries, truth, RetrievalConfig.for_preset(Preset.L, depth, k_prime=100))
    passed = large >= 0.95 * exhaustive and overview <= large
    return passed, f"O={overview:.4f}, L={large:.4f}, SW={exhaustive:.4f}"


def check_norm_hierarchy(n_panoramas: int = 2_000, n_queries: int = 500) -> Outcome:
    scene = _scene(n_panoramas, n_queries)
    means = level_norm_means(export_coordinates(scene.index))
    passed = means[1] < means[scene.index.depth]
    return passed, ", ".join(f"level{level}={value:.4f}" for level, value in means.items())


def check_persistence() -> Outcome:
    scene = _scene(500, 100)
    data = encode_index(scene.index)
    loaded = decode_index(data)
    config = RetrievalConfig(k_prime=50, levels=(4, 5), top_k=20)
    identical = sum(
        retrieve(h_q, scene.index, config) == retrieve(h_q, loaded, config) for h_q in scene.queries[:50]
    )
    corrupted = b"XVPR" + data[4:]
    try:
        decode_index(corrupted)
        rejected = False
    except FormatError:
        rejected = True
    passed = identical == 50 and rejected and encode_index(loaded) == data
    return passed, f"identical={identical}/50, corrupt_header_rejected={rejected}, bytes={len(data)}"


CHECKS: dict[str, tuple[Callable[[], Outcome], bool]] = {
    "geometry": (check_geometry, False),
    "midpoint": (check_midpoint, False),
    "oracle-equivalence": (check_oracle_equivalence, False),
    "shortlist-containment": (check_shortlist_containment, False),
    "efficiency": (check_efficiency, False),
    "storage-ratio": (check_storage_ratio, False),
    "gradients": (check_gradients, False),
    "toy-optimization": (check_toy_optimization, False),
    "recall-tradeoff": (check_recall_tradeoff, True),
    "norm-hierarchy": (check_norm_hierarchy, True),
    "persistence": (check_persistence, False),
}

# slow checks that --quick still runs, on the N=500 scene
QUICK_VARIANTS: dict[str, Callable[[], Outcome]] = {
    "norm-hierarchy": partial(check_norm_hierarchy, 500, 100),
}


def run_checks(quick: bool = False, names: list[str] | None = None) -> list[CheckResult]:
    """
    Run the named checks (default: all, in registry order)

    Args:
        quick: Skip the N=2,000 scene checks, running the norm check on the
            N=500 scene instead
        names: Subset of check names to run
    """
    selected = names or list(CHECKS)
    unknown = sorted(set(selected) - set(CHECKS))
    if unknown:
        raise ValueError(f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
    results = []
    for name in selected:
        check, slow = CHECKS[name]
        if quick and slow:
            if name not in QUICK_VARIANTS:
                logger.info(f"Check skipped | name={name}, reason=quick")
                continue
            check = QUICK_VARIANTS[name]
        start = time.perf_counter()
        passed, detail = check()
        result = CheckResult(name, passed, detail, time.perf_counter() - start)
        if passed:
            logger.success(f"Check passed | name={name}, seconds={result.seconds:.2f} | {detail}")
        else:
            logger.error(f"Check failed | name={name}, seconds={result.seconds:.2f} | {detail}")
        results.append(result)
    return results
