"""
Training Objectives
Hierarchical, hyperbolic and Euclidean triplet losses with closed-form gradients

Gradients are derived by hand (chain rule through the arccosh form of the
distance and the Jacobian of log_0) and checked against central finite
differences by `grad_check`. Parameters of a batch are flattened into a dict:

    "query"               the query point h_q, shape (D,)
    "positive/level{ℓ}"   the positive tree's level ℓ, shape (2^(ℓ−1), D)
    "negative{i}/level{ℓ}" level ℓ of the i-th negative tree (i from 1)
"""

import math
from dataclasses import dataclass, field
from enum import StrEnum
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from loguru import logger

from hyperplace.errors import ConfigurationError, InvalidInputError
from hyperplace.hierarchy import DescriptorTree, hierarchy_graph
from hyperplace.hypgeo import BallConfig, BallPoint, FloatArray, PoincareBall, TangentVec, ball_for

DEFAULT_MARGIN = 0.1
FD_STEP = 1e-5
FD_CHUNK = 64
KINK_TOLERANCE = 1e-6
SERIES_CUTOFF = 1e-3

Params = dict[str, FloatArray]


class Loss(StrEnum):
    HIER = "hier"
    HYP = "hyp"
    EUC = "euc"
    TOTAL = "total"


@dataclass(frozen=True, eq=False)
class TripletBatch:
    """
    Query point, planted positive tree and negative trees sharing one ball

    `positive_leaf` pins the Euclidean loss to one positive leaf (1-based);
    by default positive and negative leaves are paired index by index.
    """

    query: BallPoint
    positive: DescriptorTree
    negatives: tuple[DescriptorTree, ...]
    margin: float = DEFAULT_MARGIN
    positive_leaf: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if not self.negatives:
            raise InvalidInputError("a triplet batch needs at least one negative tree")
        if not math.isfinite(self.margin) or self.margin <= 0.0:
            raise InvalidInputError(f"margin must be positive, got {self.margin}")
        for tree in self.trees:
            if tree.config != self.query.config:
                raise ConfigurationError("every tree of a batch must share the query's ball")
            if tree.depth != self.positive.depth:
                raise ConfigurationError("every tree of a batch must have the same depth")
        if self.positive_leaf is not None and not 1 <= self.positive_leaf <= 2 ** (self.depth - 1):
            raise InvalidInputError(f"positive leaf {self.positive_leaf} does not exist")

    @property
    def trees(self) -> tuple[DescriptorTree, ...]:
        return (self.positive, *self.negatives)

    @property
    def depth(self) -> int:
        return self.positive.depth

    @property
    def config(self) -> BallConfig:
        return self.query.config

    @property
    def query_descriptor(self) -> TangentVec:
        """Euclidean query descriptor d_q = log_0(h_q)"""
        return TangentVec(ball_for(self.config).log0(self.query.coords))


@dataclass(frozen=True)
class GradReport:
    """
    Analytic against central-difference gradients of one loss

    Relative error is measured per point, ‖a − n‖ / max(‖a‖, ‖n‖, 1e-8);
    `worst_parameter` names the point with the largest error and
    `worst_coordinate` its coordinate of largest absolute deviation.
    """

    loss: Loss
    analytic: Params
    numeric: Params
    max_relative_error: float
    worst_parameter: str
    worst_coordinate: int
    near_singularity: bool
    hinge_gap: float
    closest_distance: float

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


@dataclass(frozen=True)
class Proximity:
    """Distance of an evaluation point to the loss's non-differentiable set"""

    hinge_gap: float = math.inf
    closest_distance: float = math.inf

    def merge(self, other: "Proximity") -> "Proximity":
        return Proximity(min(self.hinge_gap, other.hinge_gap), min(self.closest_distance, other.closest_distance))

    def is_singular(self, tolerance: float = KINK_TOLERANCE) -> bool:
        return self.hinge_gap < tolerance or self.closest_distance < tolerance


def _dist_and_grads(ball: PoincareBall, x: FloatArray, y: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """d_c(x, y) and its gradients in x and y; both gradients are zero where x = y"""
    c = ball.c
    diff = x - y
    delta = np.sum(diff * diff, axis=-1)
    alpha = 1.0 - c * np.sum(x * x, axis=-1)
    beta = 1.0 - c * np.sum(y * y, axis=-1)
    u_minus_1 = 2.0 * c * delta / (alpha * beta)
    root = np.sqrt(u_minus_1 * (u_minus_1 + 2.0))  # √(u² − 1)
    safe = np.where(root > 0.0, root, 1.0)
    coef = np.where(root > 0.0, 4.0 * c / (alpha * beta * ball.sqrt_c * safe), 0.0)[..., None]
    gx = coef * (diff + (c * delta / alpha)[..., None] * x)
    gy = coef * (-diff + (c * delta / beta)[..., None] * y)
    return ball.dist(x, y), gx, gy


def _log0_vjp(ball: PoincareBall, y: FloatArray, g: FloatArray) -> FloatArray:
    """Jᵀg for J the Jacobian of log_0 at y (J is symmetric)"""
    # log_0(y) = F(s)·y with s = √c‖y‖ and F(s) = artanh(s)/s
    s = ball.sqrt_c * np.linalg.norm(y, axis=-1)
    small = s < SERIES_CUTOFF
    s_safe = np.where(small, 1.0, s)
    s2 = s * s
    f = np.where(small, 1.0 + s2 / 3.0 + s2 * s2 / 5.0, np.arctanh(s_safe) / s_safe)
    # F'(s)/s
    df = np.where(
        small,
        2.0 / 3.0 + 4.0 * s2 / 5.0 + 6.0 * s2 * s2 / 7.0,
        (s_safe / (1.0 - s_safe**2) - np.arctanh(s_safe)) / s_safe**3,
    )
    yg = np.sum(y * g, axis=-1)
    return f[..., None] * g + (ball.c * df * yg)[..., None] * y


@lru_cache(maxsize=None)
def _parent_index(depth: int) -> dict[int, np.ndarray]:
    """0-based parent position of every child at each level ≥ 2, read off the hierarchy graph"""
    graph = hierarchy_graph(depth)
    parents = {}
    for level in range(2, depth + 1):
        children = sorted(node for node in graph if node[0] == level)
        parents[level] = np.array([next(iter(graph.predecessors(child)))[1] - 1 for child in children])
    return parents


def _negative_mask(parents: np.ndarray, include_siblings: bool) -> np.ndarray:
    n = parents.size
    mask = ~np.eye(n, dtype=bool)
    if not include_siblings:
        mask &= parents[:, None] != parents[None, :]
    return mask


def _hier_terms(
    ball: PoincareBall,
    levels: Mapping[int, FloatArray],
    depth: int,
    margin: float,
    include_siblings: bool,
) -> tuple[float, dict[int, FloatArray], Proximity]:
    grads = {level: np.zeros_like(levels[level]) for level in range(1, depth + 1)}
    value = 0.0
    proximity = Proximity()
    for level, parents in _parent_index(depth).items():
        children = levels[level]
        d_pc, g_parent, g_child = _dist_and_grads(ball, levels[level - 1][parents], children)
        d_cn, g_anchor, g_negative = _dist_and_grads(ball, children[:, None, :], children[None, :, :])
        mask = _negative_mask(parents, include_siblings)
        if not mask.any():
            continue
        hinge = d_pc[:, None] - d_cn + margin
        active = mask & (hinge > 0.0)
        value += float(hinge[active].sum())
        weight = active.astype(np.float64)
        count = weight.sum(axis=1)[:, None]
        np.add.at(grads[level - 1], parents, count * g_parent)
        grads[level] += count * g_child - np.einsum("cn,cnd->cd", weight, g_anchor)
        grads[level] -= np.einsum("cn,cnd->nd", weight, g_negative)
        proximity = proximity.merge(
            Proximity(float(np.abs(hinge[mask]).min()), float(min(d_pc.min(), d_cn[mask].min())))
        )
    return value, grads, proximity


def _hyp_terms(
    ball: PoincareBall, query: FloatArray, positive_root: FloatArray, negative_roots: FloatArray, margin: float
) -> tuple[float, FloatArray, FloatArray, FloatArray, Proximity]:
    d_pos, gq_pos, g_pos = _dist_and_grads(ball, query, positive_root)
    d_neg, gq_neg, g_neg = _dist_and_grads(ball, query[None, :], negative_roots)
    hinge = d_pos - d_neg + margin
    active = (hinge > 0.0).astype(np.float64)
    value = float(hinge[hinge > 0.0].sum())
    grad_query = active.sum() * gq_pos - active @ gq_neg
    grad_positive = active.sum() * g_pos
    grad_negatives = -active[:, None] * g_neg
    proximity = Proximity(float(np.abs(hinge).min()), float(min(d_pos, d_neg.min())))
    return value, grad_query, grad_positive, grad_negatives, proximity


def _euc_terms(
    ball: PoincareBall,
    query: FloatArray,
    positive_leaves: FloatArray,
    negative_leaves: FloatArray,
    margin: float,
    positive_leaf: int | None,
) -> tuple[float, FloatArray, FloatArray, FloatArray, Proximity]:
    """negative_leaves has shape (negatives, leaves, D)"""
    e_q = ball.log0(query)
    e_pos = ball.log0(positive_leaves)
    e_neg = ball.log0(negative_leaves)
    anchor = e_pos[None, :, :] if positive_leaf is None else e_pos[positive_leaf - 1][None, None, :]
    to_pos = e_q - anchor
    to_neg = e_q - e_neg
    d_pos = np.linalg.norm(to_pos, axis=-1)
    d_neg = np.linalg.norm(to_neg, axis=-1)
    hinge = d_pos - d_neg + margin
    active = (hinge > 0.0).astype(np.float64)
    value = float(hinge[hinge > 0.0].sum())

    unit_pos = to_pos / np.where(d_pos > 0.0, d_pos, 1.0)[..., None]
    unit_neg = to_neg / np.where(d_neg > 0.0, d_neg, 1.0)[..., None]
    unit_pos = np.broadcast_to(unit_pos, to_neg.shape)
    weight = active[..., None]
    g_eq = np.sum(weight * (unit_pos - unit_neg), axis=(0, 1))
    g_epos = np.zeros_like(e_pos)
    if positive_leaf is None:
        g_epos -= np.sum(weight * unit_pos, axis=0)
    else:
        g_epos[positive_leaf - 1] -= np.sum(weight * unit_pos, axis=(0, 1))
    g_eneg = weight * unit_neg

    proximity = Proximity(float(np.abs(hinge).min()), float(min(d_pos.min(), d_neg.min())))
    return (
        value,
        _log0_vjp(ball, query, g_eq),
        _log0_vjp(ball, positive_leaves, g_epos),
        _log0_vjp(ball, negative_leaves, g_eneg),
        proximity,
    )


def _hier_value(
    ball: PoincareBall, levels: Mapping[int, FloatArray], depth: int, margin: float, include_siblings: bool
) -> FloatArray:
    """Hierarchical term without gradients; level arrays may carry leading batch axes"""
    value = np.zeros(levels[1].shape[:-2])
    for level, parents in _parent_index(depth).items():
        mask = _negative_mask(parents, include_siblings)
        if not mask.any():
            continue
        children = levels[level]
        d_pc = ball.dist(levels[level - 1][..., parents, :], children)
        d_cn = ball.dist(children[..., :, None, :], children[..., None, :, :])
        hinge = d_pc[..., :, None] - d_cn + margin
        value = value + np.sum(np.where(mask & (hinge > 0.0), hinge, 0.0), axis=(-2, -1))
    return value


def _hyp_value(
    ball: PoincareBall, query: FloatArray, positive_root: FloatArray, negative_roots: FloatArray, margin: float
) -> FloatArray:
    d_pos = ball.dist(query, positive_root)
    d_neg = ball.dist(query[..., None, :], negative_roots)
    return np.sum(np.maximum(d_pos[..., None] - d_neg + margin, 0.0), axis=-1)


def _euc_value(
    ball: PoincareBall,
    query: FloatArray,
    positive_leaves: FloatArray,
    negative_leaves: FloatArray,
    margin: float,
    positive_leaf: int | None,
) -> FloatArray:
    """negative_leaves has shape (..., negatives, leaves, D)"""
    e_q = ball.log0(query)[..., None, None, :]
    e_pos = ball.log0(positive_leaves)
    anchor = e_pos[..., None, :, :] if positive_leaf is None else e_pos[..., positive_leaf - 1, :][..., None, None, :]
    d_pos = np.linalg.norm(e_q - anchor, axis=-1)
    d_neg = np.linalg.norm(e_q - ball.log0(negative_leaves), axis=-1)
    return np.sum(np.maximum(d_pos - d_neg + margin, 0.0), axis=(-2, -1))


def _tree_names(negatives: int) -> list[str]:
    return ["positive", *(f"negative{i}" for i in range(1, negatives + 1))]


def _key(tree: str, level: int) -> str:
    return f"{tree}/level{level}"


def batch_parameters(batch: TripletBatch) -> Params:
    """Writable copies of every point of the batch, keyed as described in the module docstring"""
    params = {"query": batch.query.coords.copy()}
    for name, tree in zip(_tree_names(len(batch.negatives)), batch.trees):
        for level in tree.stored_levels:
            params[_key(name, level)] = tree.level(level).copy()
    return params


def with_parameters(batch: TripletBatch, params: Mapping[str, FloatArray]) -> TripletBatch:
    """The batch with its points replaced by `params`"""
    config = batch.config
    trees = [
        DescriptorTree(tree.depth, config, {level: params[_key(name, level)] for level in tree.stored_levels})
        for name, tree in zip(_tree_names(len(batch.negatives)), batch.trees)
    ]
    return TripletBatch(
        query=BallPoint(params["query"], config),
        positive=trees[0],
        negatives=tuple(trees[1:]),
        margin=batch.margin,
        positive_leaf=batch.positive_leaf,
    )


@dataclass(frozen=True)
class Objective:
    """
    A loss as a function of the flattened batch parameters

    The hierarchical term covers every tree of the batch (positive and
    negatives).
    """

    loss: Loss
    depth: int
    negatives: int
    margin: float
    config: BallConfig
    include_siblings: bool = True
    positive_leaf: int | None = None
    names: tuple[str, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(_tree_names(self.negatives)))

    @classmethod
    def for_batch(cls, loss: Loss, batch: TripletBatch, include_siblings: bool = True) -> "Objective":
        needed = {
            Loss.HIER: range(1, batch.depth + 1),
            Loss.HYP: (1,),
            Loss.EUC: (batch.depth,),
            Loss.TOTAL: range(1, batch.depth + 1),
        }[loss]
        for tree in batch.trees:
            missing = [level for level in needed if level not in tree.levels]
            if missing:
                raise ConfigurationError(f"the {loss} loss needs levels {missing}, which a batch tree does not hold")
        return cls(loss, batch.depth, len(batch.negatives), batch.margin, batch.config, include_siblings, batch.positive_leaf)

    def values(self, params: Mapping[str, FloatArray]) -> FloatArray:
        """
        Loss values without gradients

        Every parameter array may carry the same leading batch axes, in which
        case one value per batch entry is returned.
        """
        ball = ball_for(self.config)
        total = np.zeros(params["query"].shape[:-1])
        if self.loss in (Loss.HIER, Loss.TOTAL):
            for name in self.names:
                levels = {level: params[_key(name, level)] for level in range(1, self.depth + 1)}
                total = total + _hier_value(ball, levels, self.depth, self.margin, self.include_siblings)
        if self.loss in (Loss.HYP, Loss.TOTAL):
            negative_roots = np.stack([params[_key(name, 1)][..., 0, :] for name in self.names[1:]], axis=-2)
            total = total + _hyp_value(
                ball, params["query"], params[_key("positive", 1)][..., 0, :], negative_roots, self.margin
            )
        if self.loss in (Loss.EUC, Loss.TOTAL):
            leaf = self.depth
            negative_leaves = np.stack([params[_key(name, leaf)] for name in self.names[1:]], axis=-3)
            total = total + _euc_value(
                ball, params["query"], params[_key("positive", leaf)], negative_leaves, self.margin, self.positive_leaf
            )
        return total

    def value(self, params: Mapping[str, FloatArray]) -> float:
        return float(self.values(params))

    def value_and_grad(self, params: Mapping[str, FloatArray]) -> tuple[float, Params, Proximity]:
        ball = ball_for(self.config)
        grads = {key: np.zeros_like(array) for key, array in params.items()}
        value = 0.0
        proximity = Proximity()
        if self.loss in (Loss.HIER, Loss.TOTAL):
            for name in self.names:
                levels = {level: params[_key(name, level)] for level in range(1, self.depth + 1)}
                term, tree_grads, near = _hier_terms(ball, levels, self.depth, self.margin, self.include_siblings)
                value += term
                proximity = proximity.merge(near)
                for level, g in tree_grads.items():
                    grads[_key(name, level)] += g
        if self.loss in (Loss.HYP, Loss.TOTAL):
            negative_roots = np.stack([params[_key(name, 1)][0] for name in self.names[1:]])
            term, g_q, g_pos, g_neg, near = _hyp_terms(
                ball, params["query"], params[_key("positive", 1)][0], negative_roots, self.margin
            )
            value += term
            proximity = proximity.merge(near)
            grads["query"] += g_q
            grads[_key("positive", 1)][0] += g_pos
            for name, g in zip(self.names[1:], g_neg):
                grads[_key(name, 1)][0] += g
        if self.loss in (Loss.EUC, Loss.TOTAL):
            leaf = self.depth
            negative_leaves = np.stack([params[_key(name, leaf)] for name in self.names[1:]])
            term, g_q, g_pos, g_neg, near = _euc_terms(
                ball, params["query"], params[_key("positive", leaf)], negative_leaves, self.margin, self.positive_leaf
            )
            value += term
            proximity = proximity.merge(near)
            grads["query"] += g_q
            grads[_key("positive", leaf)] += g_pos
            for name, g in zip(self.names[1:], g_neg):
                grads[_key(name, leaf)] += g
        return value, grads, proximity


def hier_triplet(tree: DescriptorTree, margin: float = DEFAULT_MARGIN, include_siblings: bool = True) -> float:
    """
    Hierarchical triplet loss of one tree

    Sums, over levels ℓ = 2..L, every child h^(ℓ,c) and every other level-ℓ
    descriptor n, max{d(parent, child) − d(child, n) + m, 0}. With
    `include_siblings=False` the child's sibling is not used as a negative.

    Example:
        A tree whose points all coincide contributes m per triple, so a
        depth-3 tree gives 14·m.
    """
    if tree.depth < 2:
        raise InvalidInputError("the hierarchical loss needs a tree of depth ≥ 2")
    levels = {level: tree.level(level) for level in range(1, tree.depth + 1)}
    return float(_hier_value(ball_for(tree.config), levels, tree.depth, margin, include_siblings))


def hyp_triplet(batch: TripletBatch) -> float:
    """Σ over negatives of max{d(h_q, h_pos^(1,1)) − d(h_q, h_neg^(1,1)) + m, 0}"""
    return Objective.for_batch(Loss.HYP, batch).value(batch_parameters(batch))


def euc_triplet(batch: TripletBatch) -> float:
    """
    Euclidean triplet loss between log_0 of the query and of level-L leaves

    Leaves of the positive and of each negative are paired by index (or the
    pinned positive leaf against every negative leaf).
    """
    return Objective.for_batch(Loss.EUC, batch).value(batch_parameters(batch))


def total_loss(
    trees: DescriptorTree | Sequence[DescriptorTree] | None,
    batch: TripletBatch,
    include_siblings: bool = True,
) -> float:
    """
    ℒ_hier + ℒ_hyp + ℒ_euc

    Args:
        trees: Trees the hierarchical term is summed over (None: every batch tree)
        batch: Triplet batch
        include_siblings: Sibling switch of the hierarchical term

    Returns:
        The summed objective
    """
    if trees is None:
        trees = batch.trees
    elif isinstance(trees, DescriptorTree):
        trees = (trees,)
    hier = sum(hier_triplet(tree, batch.margin, include_siblings) for tree in trees)
    return hier + hyp_triplet(batch) + euc_triplet(batch)


def grad(loss: Loss, batch: TripletBatch, include_siblings: bool = True) -> Params:
    """Euclidean gradient of `loss` with respect to every batch point; zero on inactive hinges"""
    objective = Objective.for_batch(loss, batch, include_siblings)
    _, grads, _ = objective.value_and_grad(batch_parameters(batch))
    return grads


def numeric_grad(
    objective: Objective, params: Mapping[str, FloatArray], step: float = FD_STEP, chunk: int = FD_CHUNK
) -> Params:
    """
    Central differences (f(p + h) − f(p − h)) / 2h for every coordinate

    Up to `chunk` coordinates of one parameter are perturbed at a time and
    their 2·chunk shifted copies are evaluated in a single batched call.
    """
    numeric = {}
    for key, array in params.items():
        flat = array.reshape(-1)
        result = np.empty(flat.size)
        for start in range(0, flat.size, chunk):
            coords = np.arange(start, min(start + chunk, flat.size))
            n = coords.size
            rows = np.arange(n)
            shifted = np.repeat(flat[None, :], 2 * n, axis=0)
            shifted[rows, coords] += step
            shifted[n + rows, coords] -= step
            batch = {other: np.broadcast_to(value, (2 * n, *value.shape)) for other, value in params.items()}
            batch[key] = shifted.reshape(2 * n, *array.shape)
            values = objective.values(batch)
            result[coords] = (values[:n] - values[n:]) / (2.0 * step)
        numeric[key] = result.reshape(array.shape)
    return numeric


def grad_check(
    loss: Loss,
    batch: TripletBatch,
    step: float = FD_STEP,
    include_siblings: bool = True,
    kink_tolerance: float = KINK_TOLERANCE,
) -> GradReport:
    """
    Compare analytic gradients with central finite differences

    Args:
        loss: Which objective to check
        batch: Evaluation point
        step: Finite-difference step
        include_siblings: Sibling switch of the hierarchical term
        kink_tolerance: Hinge arguments or distances below this mark the
            evaluation point as near-singular

    Returns:
        A report; near-singular points are flagged rather than rejected
    """
    objective = Objective.for_batch(loss, batch, include_siblings)
    params = batch_parameters(batch)
    _, analytic, proximity = objective.value_and_grad(params)
    numeric = numeric_grad(objective, params, step)

    worst = (0.0, "query", 0)
    for key in params:
        a = np.atleast_2d(analytic[key])
        n = np.atleast_2d(numeric[key])
        error = np.linalg.norm(a - n, axis=-1) / np.maximum(
            np.maximum(np.linalg.norm(a, axis=-1), np.linalg.norm(n, axis=-1)), 1e-8
        )
        row = int(np.argmax(error))
        if error[row] > worst[0]:
            name = key if analytic[key].ndim == 1 else f"{key}[{row + 1}]"
            worst = (float(error[row]), name, int(np.argmax(np.abs(a[row] - n[row]))))

    singular = proximity.is_singular(kink_tolerance)
    if singular:
        logger.warning(
            f"Gradient check near a singularity | loss={loss}, hinge_gap={proximity.hinge_gap:.2e}, "
            f"closest_distance={proximity.closest_distance:.2e}"
        )
    return GradReport(
        loss=loss,
        analytic=analytic,
        numeric=numeric,
        max_relative_error=worst[0],
        worst_parameter=worst[1],
        worst_coordinate=worst[2],
        near_singularity=singular,
        hinge_gap=proximity.hinge_gap,
        closest_distance=proximity.closest_distance,
    )


def rsgd_step(
    points: Mapping[str, FloatArray], gradients: Mapping[str, FloatArray], lr: float, config: BallConfig
) -> Params:
    """
    One Riemannian SGD step per point: x ← exp_x(−η·g/λ_x²), projected into the ball

    Args:
        points: Arrays of points, shape (..., D)
        gradients: Euclidean gradients with the same keys and shapes
        lr: Step size η > 0
        config: Ball configuration

    Returns:
        The updated points

    Example:
        From the origin (λ₀ = 2) the step is exp_0(−η·g/4).
    """
    if not math.isfinite(lr) or lr <= 0.0:
        raise InvalidInputError(f"learning rate must be positive, got {lr}")
    ball = ball_for(config)
    updated = {}
    for key, x in points.items():
        lam = ball.conformal_factor(x)[..., None]
        updated[key] = ball.exp_map(x, -lr * gradients[key] / lam**2)
    return updated


@dataclass(frozen=True)
class OptimizationResult:
    batch: TripletBatch
    history: list[float]

    @property
    def initial_loss(self) -> float:
        return self.history[0]

    @property
    def final_loss(self) -> float:
        return self.history[-1]


def optimize(
    batch: TripletBatch,
    steps: int = 200,
    lr: float = 0.05,
    loss: Loss = Loss.TOTAL,
    include_siblings: bool = True,
) -> OptimizationResult:
    """
    Run `steps` Riemannian SGD steps on every batch point

    Returns:
        The optimised batch and the loss history (steps + 1 values, initial first)
    """
    if steps < 0:
        raise InvalidInputError(f"steps must be ≥ 0, got {steps}")
    objective = Objective.for_batch(loss, batch, include_siblings)
    params = batch_parameters(batch)
    history = []
    for _ in range(steps):
        value, grads, _ = objective.value_and_grad(params)
        history.append(value)
        params = rsgd_step(params, grads, lr, batch.config)
    history.append(objective.value(params))
    logger.info(f"Optimisation finished | loss={loss}, steps={steps}, initial={history[0]:.4f}, final={history[-1]:.4f}")
    return OptimizationResult(with_parameters(batch, params), history)


def random_batch(
    rng: np.random.Generator,
    depth: int = 3,
    dim: int = 4,
    negatives: int = 1,
    scale: float = 0.3,
    margin: float = DEFAULT_MARGIN,
    config: BallConfig | None = None,
) -> TripletBatch:
    """
    Batch of independent random points with norms well inside the ball

    Coordinates are Gaussian with standard deviation `scale` before a radial
    squash keeping every norm below 0.9.
    """
    config = config or BallConfig(dim=dim)

    def points(n: int) -> FloatArray:
        raw = rng.normal(scale=scale, size=(n, config.dim))
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
        return raw * (0.9 * np.tanh(norms) / np.where(norms > 0.0, norms, 1.0))

    def tree() -> DescriptorTree:
        return DescriptorTree(depth, config, {level: points(2 ** (level - 1)) for level in range(1, depth + 1)})

    return TripletBatch(
        query=BallPoint(points(1)[0], config),
        positive=tree(),
        negatives=tuple(tree() for _ in range(negatives)),
        margin=margin,
    )


def smooth_batch(
    rng: np.random.Generator,
    loss: Loss,
    gap: float = 1e-3,
    attempts: int = 100,
    **kwargs,
) -> TripletBatch:
    """
    Random batch whose hinges and distances all stay at least `gap` away from zero

    Finite differences straddling a hinge kink are meaningless, so gradient
    checks are run on these.
    """
    for _ in range(attempts):
        batch = random_batch(rng, **kwargs)
        objective = Objective.for_batch(loss, batch)
        _, _, proximity = objective.value_and_grad(batch_parameters(batch))
        if not proximity.is_singular(gap):
            return batch
    raise InvalidInputError(f"no smooth configuration found in {attempts} attempts")
