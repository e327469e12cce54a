"""Triplet losses, analytic gradients against finite differences, and Riemannian steps."""

import numpy as np
import pytest

from hyperplace.errors import ConfigurationError, InvalidInputError
from hyperplace.hierarchy import DescriptorTree
from hyperplace.hypgeo import BallConfig, BallPoint, PoincareBall
from hyperplace.losses import (
    Loss,
    Objective,
    TripletBatch,
    batch_parameters,
    euc_triplet,
    grad,
    grad_check,
    hier_triplet,
    hyp_triplet,
    numeric_grad,
    optimize,
    random_batch,
    rsgd_step,
    smooth_batch,
    total_loss,
    with_parameters,
)


def flat_tree(config, depth, point):
    """A tree whose every descriptor is `point`"""
    return DescriptorTree(depth, config, {level: np.tile(point, (2 ** (level - 1), 1)) for level in range(1, depth + 1)})


class TestHierTriplet:
    def test_coincident_points_cost_one_margin_per_triple(self):
        config = BallConfig(dim=2)
        tree = flat_tree(config, 3, np.array([0.1, 0.2]))
        assert hier_triplet(tree, margin=0.1) == pytest.approx(14 * 0.1)

    def test_sibling_switch_drops_sibling_negatives(self):
        config = BallConfig(dim=2)
        tree = flat_tree(config, 3, np.zeros(2))
        assert hier_triplet(tree, margin=0.1, include_siblings=False) == pytest.approx(8 * 0.1)

    def test_well_separated_tree_has_zero_loss(self):
        config = BallConfig(dim=2)
        levels = {
            1: np.array([[0.0, 0.0]]),
            2: np.array([[0.0, 0.01], [0.0, -0.01]]),
        }
        assert hier_triplet(DescriptorTree(2, config, levels), margin=0.001) == 0.0

    def test_matches_brute_force(self, rng):
        batch = random_batch(rng, depth=4, dim=3)
        tree = batch.positive
        ball = PoincareBall(batch.config)
        expected = 0.0
        for level in range(2, 5):
            children = tree.level(level)
            for c in range(children.shape[0]):
                parent = tree.level(level - 1)[c // 2]
                for n in range(children.shape[0]):
                    if n != c:
                        hinge = ball.dist(parent, children[c]) - ball.dist(children[c], children[n]) + 0.1
                        expected += max(hinge, 0.0)
        assert hier_triplet(tree) == pytest.approx(expected, rel=1e-12)


class TestHypAndEucTriplet:
    def test_hyp_known_value(self):
        config = BallConfig(dim=2)
        query = BallPoint(np.zeros(2), config)
        positive = flat_tree(config, 2, np.array([0.5, 0.0]))
        negative = flat_tree(config, 2, np.array([0.1, 0.0]))
        batch = TripletBatch(query, positive, (negative,))
        expected = 2 * np.arctanh(0.5) - 2 * np.arctanh(0.1) + 0.1
        assert hyp_triplet(batch) == pytest.approx(expected, rel=1e-12)

    def test_hyp_inactive_when_positive_is_closer(self):
        config = BallConfig(dim=2)
        batch = TripletBatch(
            BallPoint(np.zeros(2), config),
            flat_tree(config, 2, np.array([0.1, 0.0])),
            (flat_tree(config, 2, np.array([0.5, 0.0])),),
        )
        assert hyp_triplet(batch) == 0.0
        np.testing.assert_array_equal(grad(Loss.HYP, batch)["query"], 0.0)

    def test_euc_pairs_leaves_by_index(self, rng):
        batch = random_batch(rng, depth=3, dim=4, negatives=2)
        ball = PoincareBall(batch.config)
        e_q = ball.log0(batch.query.coords)
        e_pos = ball.log0(batch.positive.level(3))
        expected = 0.0
        for negative in batch.negatives:
            e_neg = ball.log0(negative.level(3))
            for j in range(4):
                hinge = np.linalg.norm(e_q - e_pos[j]) - np.linalg.norm(e_q - e_neg[j]) + batch.margin
                expected += max(hinge, 0.0)
        assert euc_triplet(batch) == pytest.approx(expected, rel=1e-12)

    def test_euc_pinned_positive_leaf(self, rng):
        batch = random_batch(rng, depth=3, dim=4)
        pinned = TripletBatch(batch.query, batch.positive, batch.negatives, positive_leaf=2)
        ball = PoincareBall(batch.config)
        e_q = ball.log0(batch.query.coords)
        anchor = ball.log0(batch.positive.level(3)[1])
        e_neg = ball.log0(batch.negatives[0].level(3))
        hinge = np.linalg.norm(e_q - anchor) - np.linalg.norm(e_q - e_neg, axis=-1) + batch.margin
        assert euc_triplet(pinned) == pytest.approx(np.maximum(hinge, 0.0).sum(), rel=1e-12)

    def test_total_is_sum_of_terms(self, rng):
        batch = random_batch(rng, depth=3, dim=4, negatives=2)
        hier = sum(hier_triplet(tree) for tree in batch.trees)
        expected = hier + hyp_triplet(batch) + euc_triplet(batch)
        assert total_loss(None, batch) == pytest.approx(expected, rel=1e-12)
        value = Objective.for_batch(Loss.TOTAL, batch).value(batch_parameters(batch))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_negative_order_does_not_matter(self, rng):
        batch = random_batch(rng, depth=3, dim=4, negatives=3)
        shuffled = TripletBatch(batch.query, batch.positive, batch.negatives[::-1], margin=batch.margin)
        assert total_loss(None, shuffled) == pytest.approx(total_loss(None, batch), rel=1e-12)
        assert hyp_triplet(shuffled) == pytest.approx(hyp_triplet(batch), rel=1e-12)
        assert euc_triplet(shuffled) == pytest.approx(euc_triplet(batch), rel=1e-12)

    def test_total_over_explicit_trees(self, rng):
        batch = random_batch(rng, depth=3, dim=4)
        expected = hier_triplet(batch.positive) + hyp_triplet(batch) + euc_triplet(batch)
        assert total_loss(batch.positive, batch) == pytest.approx(expected, rel=1e-12)


class TestBatchValidation:
    def test_needs_a_negative(self, rng):
        batch = random_batch(rng)
        with pytest.raises(InvalidInputError):
            TripletBatch(batch.query, batch.positive, ())

    def test_margin_must_be_positive(self, rng):
        batch = random_batch(rng)
        with pytest.raises(InvalidInputError):
            TripletBatch(batch.query, batch.positive, batch.negatives, margin=0.0)

    def test_positive_leaf_range(self, rng):
        batch = random_batch(rng, depth=3)
        with pytest.raises(InvalidInputError):
            TripletBatch(batch.query, batch.positive, batch.negatives, positive_leaf=5)

    def test_config_mismatch(self, rng):
        batch = random_batch(rng, dim=4)
        other = random_batch(rng, dim=4, config=BallConfig(dim=4, curvature=0.5))
        with pytest.raises(ConfigurationError):
            TripletBatch(batch.query, other.positive, batch.negatives)

    def test_partial_tree_rejected_for_hier(self, rng):
        batch = random_batch(rng, depth=3)
        partial = TripletBatch(batch.query, batch.positive.restrict((1, 3)), batch.negatives)
        with pytest.raises(ConfigurationError):
            Objective.for_batch(Loss.HIER, partial)
        assert hyp_triplet(partial) >= 0.0

    def test_parameters_roundtrip(self, rng):
        batch = random_batch(rng, depth=3, negatives=2)
        params = batch_parameters(batch)
        assert set(params) == {"query"} | {f"{tree}/level{level}" for tree in ("positive", "negative1", "negative2") for level in (1, 2, 3)}
        rebuilt = with_parameters(batch, params)
        np.testing.assert_array_equal(rebuilt.negatives[1].level(2), batch.negatives[1].level(2))


class TestGradients:
    @pytest.mark.parametrize("loss", list(Loss))
    def test_grad_check_on_smooth_batches(self, loss):
        rng = np.random.default_rng(2024)
        for _ in range(5):
            batch = smooth_batch(rng, loss, depth=3, dim=3, negatives=2)
            report = grad_check(loss, batch)
            assert not report.near_singularity
            assert report.passed(), f"{report.worst_parameter}[{report.worst_coordinate}]: {report.max_relative_error:.2e}"

    def test_grad_check_with_siblings_excluded(self):
        rng = np.random.default_rng(5)
        batch = smooth_batch(rng, Loss.HIER, depth=3, dim=3)
        assert grad_check(Loss.HIER, batch, include_siblings=False).passed()

    def test_grad_check_with_pinned_leaf(self):
        rng = np.random.default_rng(6)
        base = smooth_batch(rng, Loss.EUC, depth=3, dim=3)
        batch = TripletBatch(base.query, base.positive, base.negatives, positive_leaf=3)
        report = grad_check(Loss.EUC, batch)
        assert report.passed() or report.near_singularity

    def test_coincident_points_flagged(self):
        config = BallConfig(dim=2)
        tree = flat_tree(config, 2, np.array([0.2, 0.1]))
        batch = TripletBatch(BallPoint(np.array([0.2, 0.1]), config), tree, (tree,))
        report = grad_check(Loss.HIER, batch)
        assert report.near_singularity
        assert report.closest_distance == 0.0

    @pytest.mark.parametrize("loss", list(Loss))
    def test_value_only_path_matches_gradient_path(self, rng, loss):
        batch = random_batch(rng, depth=3, dim=3, negatives=2)
        objective = Objective.for_batch(loss, batch)
        params = batch_parameters(batch)
        assert objective.value(params) == pytest.approx(objective.value_and_grad(params)[0], rel=1e-12)

    def test_stacked_parameters_give_one_value_each(self, rng):
        batches = [random_batch(rng, depth=3, dim=3, negatives=2) for _ in range(4)]
        objective = Objective.for_batch(Loss.TOTAL, batches[0])
        singles = [batch_parameters(batch) for batch in batches]
        stacked = {key: np.stack([params[key] for params in singles]) for key in singles[0]}
        np.testing.assert_allclose(objective.values(stacked), [objective.value(params) for params in singles], rtol=1e-12)

    def test_numeric_grad_does_not_depend_on_chunking(self, rng):
        batch = smooth_batch(rng, Loss.TOTAL, depth=3, dim=3)
        objective = Objective.for_batch(Loss.TOTAL, batch)
        params = batch_parameters(batch)
        whole = numeric_grad(objective, params)
        single = numeric_grad(objective, params, chunk=1)
        for key in params:
            np.testing.assert_allclose(single[key], whole[key], rtol=1e-9, atol=1e-9)

    def test_numeric_grad_of_distance(self, rng):
        batch = smooth_batch(rng, Loss.HYP, depth=2, dim=3)
        objective = Objective.for_batch(Loss.HYP, batch)
        params = batch_parameters(batch)
        numeric = numeric_grad(objective, params)
        analytic = grad(Loss.HYP, batch)
        np.testing.assert_allclose(analytic["query"], numeric["query"], rtol=1e-5, atol=1e-8)


class TestRiemannianStep:
    def test_step_from_origin(self):
        config = BallConfig(dim=3)
        g = np.array([0.4, -0.2, 0.1])
        updated = rsgd_step({"x": np.zeros(3)}, {"x": g}, 0.5, config)
        np.testing.assert_allclose(updated["x"], PoincareBall(config).exp0(-0.5 * g / 4.0), atol=1e-15)

    def test_zero_gradient_is_a_fixed_point(self, rng):
        config = BallConfig(dim=3)
        x = rng.uniform(-0.4, 0.4, size=(5, 3))
        updated = rsgd_step({"x": x}, {"x": np.zeros_like(x)}, 0.1, config)
        np.testing.assert_allclose(updated["x"], x, atol=1e-15)

    def test_large_step_stays_inside(self):
        config = BallConfig(dim=2)
        updated = rsgd_step({"x": np.array([0.9, 0.0])}, {"x": np.array([-1e6, 0.0])}, 1.0, config)
        assert np.linalg.norm(updated["x"]) <= config.max_norm

    @pytest.mark.parametrize("lr", [0.0, -0.1, float("nan")])
    def test_bad_learning_rate(self, lr):
        with pytest.raises(InvalidInputError):
            rsgd_step({"x": np.zeros(2)}, {"x": np.zeros(2)}, lr, BallConfig(dim=2))

    def test_optimize_reduces_loss(self):
        batch = random_batch(np.random.default_rng(7), scale=0.15)
        result = optimize(batch, steps=20, lr=0.01)
        assert len(result.history) == 21
        assert result.final_loss < result.initial_loss
        assert result.final_loss == pytest.approx(total_loss(None, result.batch), rel=1e-9)

    def test_step_decrease_is_first_order_in_lr(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            batch = smooth_batch(rng, Loss.HYP, gap=0.05, depth=2, dim=3, negatives=2)
            objective = Objective.for_batch(Loss.HYP, batch)
            params = batch_parameters(batch)
            value, grads, _ = objective.value_and_grad(params)
            if value > 0.0:
                break
        ball = PoincareBall(batch.config)
        # predicted rate of decrease: the Riemannian squared gradient norm Σ ‖g‖²/λ²
        rate = sum(float(np.sum(g * g / ball.conformal_factor(params[key])[..., None] ** 2)) for key, g in grads.items())
        assert rate > 0.0
        errors = []
        for lr in (1e-4, 5e-5, 2.5e-5):
            stepped = rsgd_step(params, grads, lr, batch.config)
            errors.append(abs((value - objective.value(stepped)) / lr - rate))
        assert errors[-1] < 1e-2 * rate
        for coarse, fine in zip(errors, errors[1:]):
            assert fine < 0.6 * coarse
