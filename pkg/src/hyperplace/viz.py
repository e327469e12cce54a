"""
Descriptor Coordinates
Norm and angle export of index descriptors, with an optional polar figure
"""

from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import scipy.linalg
from loguru import logger

from hyperplace.index import DatabaseIndex

COLUMNS = ["id", "level", "k", "norm", "angle"]


def principal_axes(points: np.ndarray, components: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """
    Mean and leading principal directions of a point cloud

    Each direction's sign is fixed so that its largest-magnitude loading is
    positive. Missing directions (D or N too small) are zero rows.
    """
    mean = points.mean(axis=0)
    axes = np.zeros((components, points.shape[1]))
    if points.shape[0] > 1:
        _, _, vt = scipy.linalg.svd(points - mean, full_matrices=False)
        available = min(components, vt.shape[0])
        axes[:available] = vt[:available]
        for row in axes:
            pivot = np.argmax(np.abs(row))
            if row[pivot] < 0.0:
                row *= -1.0
    return mean, axes


def export_coordinates(index: DatabaseIndex) -> pd.DataFrame:
    """
    One row per stored descriptor h^(ℓ,k): record id, level, k (1-based),
    norm √c‖h‖ and angle in radians of its projection onto the first two
    principal components fitted over every exported descriptor
    """
    rows = []
    blocks = []
    for level in index.stored_levels:
        array = index.level_array(level)
        n, count, _ = array.shape
        blocks.append(array.reshape(n * count, -1))
        rows.append(
            pd.DataFrame(
                {
                    "id": np.repeat(index.ids.astype(np.int64), count),
                    "level": level,
                    "k": np.tile(np.arange(1, count + 1), n),
                }
            )
        )
    if not len(index):
        return pd.DataFrame(columns=COLUMNS)
    points = np.concatenate(blocks)
    mean, axes = principal_axes(points)
    projected = (points - mean) @ axes.T
    frame = pd.concat(rows, ignore_index=True)
    frame["norm"] = index.config.sqrt_c * np.linalg.norm(points, axis=-1)
    frame["angle"] = np.arctan2(projected[:, 1], projected[:, 0])
    return frame[COLUMNS]


def level_norm_means(frame: pd.DataFrame) -> pd.Series:
    """Mean √c‖h‖ per level"""
    return frame.groupby("level")["norm"].mean()


def write_coordinates(frame: pd.DataFrame, path: Path | str) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.9g")
    logger.success(f"Coordinates written | path={path}, rows={len(frame)}")
    return path


def polar_figure(frame: pd.DataFrame) -> go.Figure:
    """Polar scatter of norm against angle, one trace per level"""
    figure = go.Figure()
    for level, group in frame.groupby("level"):
        figure.add_trace(
            go.Scatterpolar(
                r=group["norm"],
                theta=np.degrees(group["angle"]),
                mode="markers",
                name=f"level {level}",
                marker={"size": 4, "opacity": 0.6},
                customdata=group[["id", "k"]],
                hovertemplate="id %{customdata[0]}, k %{customdata[1]}<br>norm %{r:.4f}<extra></extra>",
            )
        )
    figure.update_layout(
        title="Descriptor norm and principal angle by level",
        polar={"radialaxis": {"range": [0, 1]}},
        legend_title="Level",
    )
    return figure


def write_figure(frame: pd.DataFrame, path: Path | str) -> Path:
    path = Path(path)
    polar_figure(frame).write_html(path, include_plotlyjs="cdn")
    logger.success(f"Figure written | path={path}")
    return path
