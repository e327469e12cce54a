"""Coordinate export and the polar figure."""

import numpy as np
import pytest

from hyperplace.hierarchy import window_layout
from hyperplace.hypgeo import BallConfig
from hyperplace.index import index_from_trees
from hyperplace.synth import random_trees
from hyperplace.viz import (
    COLUMNS,
    export_coordinates,
    level_norm_means,
    polar_figure,
    principal_axes,
    write_coordinates,
    write_figure,
)


@pytest.fixture
def index():
    config = BallConfig(dim=4)
    return index_from_trees(random_trees(7, 3, config, seed=2), config, window_layout(3), stored_levels=(1, 3))


class TestPrincipalAxes:
    def test_recovers_dominant_direction(self, rng):
        points = rng.normal(size=(500, 3)) * [5.0, 1.0, 0.1]
        mean, axes = principal_axes(points)
        assert axes.shape == (2, 3)
        np.testing.assert_allclose(np.abs(axes[0]), [1.0, 0.0, 0.0], atol=0.05)
        assert axes[0][np.argmax(np.abs(axes[0]))] > 0.0
        np.testing.assert_allclose(mean, points.mean(axis=0))

    def test_single_point_gives_zero_axes(self):
        _, axes = principal_axes(np.ones((1, 3)))
        np.testing.assert_array_equal(axes, 0.0)


class TestExport:
    def test_rows_and_columns(self, index):
        frame = export_coordinates(index)
        assert list(frame.columns) == COLUMNS
        assert len(frame) == 7 * (1 + 4)
        assert sorted(frame["level"].unique()) == [1, 3]
        assert frame.loc[frame["level"] == 3, "k"].max() == 4
        assert frame["norm"].between(0.0, 1.0).all()
        assert frame["angle"].between(-np.pi, np.pi).all()

    def test_norms_match_descriptors(self, index):
        frame = export_coordinates(index)
        roots = frame[frame["level"] == 1].sort_values("id")
        np.testing.assert_allclose(roots["norm"], np.linalg.norm(index.level_array(1)[:, 0, :], axis=-1))

    def test_level_means(self, index):
        means = level_norm_means(export_coordinates(index))
        assert list(means.index) == [1, 3]

    def test_files(self, index, tmp_path):
        frame = export_coordinates(index)
        csv = write_coordinates(frame, tmp_path / "coords.csv")
        assert csv.read_text().splitlines()[0] == "id,level,k,norm,angle"
        html = write_figure(frame, tmp_path / "coords.html")
        assert html.exists()
        assert len(polar_figure(frame).data) == 2
