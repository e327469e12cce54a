"""
Poincaré Ball Geometry
Numerically guarded Poincaré-ball and Klein-model primitives

Two surfaces are provided. `PoincareBall` works on float64 arrays and
broadcasts over leading axes; the index and the losses use it directly.
The module-level functions work on the typed values `BallPoint`,
`TangentVec` and `KleinPoint` and check that their configurations agree.
"""

import math
from dataclasses import dataclass
from enum import StrEnum
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from hyperplace.errors import ConfigurationError, InvalidInputError

# arctanh arguments are clamped here; rounding can push √c‖·‖ onto 1
ARTANH_CLAMP = 1.0 - 1e-12

FloatArray = NDArray[np.float64]


class BallConfig(BaseModel):
    """
    Curvature, dimension and boundary guard of a Poincaré ball

    The ball has radius 1/√c. Every operation that returns a point projects
    it back so that √c‖x‖ ≤ 1 − boundary_eps.
    """

    model_config = ConfigDict(frozen=True)

    curvature: float = Field(default=1.0, gt=0.0, allow_inf_nan=False)
    dim: int = Field(ge=1)
    boundary_eps: float = Field(default=1e-5, gt=0.0, le=1e-3)

    @property
    def sqrt_c(self) -> float:
        return math.sqrt(self.curvature)

    @property
    def max_norm(self) -> float:
        """Largest Euclidean norm a stored point may have"""
        return (1.0 - self.boundary_eps) / self.sqrt_c


def _sqnorm(x: FloatArray) -> FloatArray:
    return np.sum(x * x, axis=-1, keepdims=True)


def _norm(x: FloatArray) -> FloatArray:
    return np.sqrt(_sqnorm(x))


def _inner(x: FloatArray, y: FloatArray) -> FloatArray:
    return np.sum(x * y, axis=-1, keepdims=True)


def _as_finite(values: ArrayLike, what: str) -> FloatArray:
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{what} contains non-finite entries")
    return array


class PoincareBall:
    """
    Array-level Poincaré ball of curvature c

    All methods accept arrays of shape (..., D) and broadcast over the leading
    axes. Distances and factors drop the trailing axis.

    Example:
        >>> ball = PoincareBall(BallConfig(dim=1))
        >>> float(ball.dist(np.array([0.0]), np.array([0.5])))  # ln 3
        1.0986122886681098
    """

    def __init__(self, config: BallConfig) -> None:
        self.config = config
        self.c = config.curvature
        self.sqrt_c = config.sqrt_c

    def project(self, x: ArrayLike) -> FloatArray:
        """Rescale points with √c‖x‖ > 1 − ε_b onto that radius, direction preserved"""
        x = _as_finite(x, "point")
        norm = _norm(x)
        outside = self.sqrt_c * norm > 1.0 - self.config.boundary_eps
        if not np.any(outside):
            return x
        safe = np.where(norm > 0.0, norm, 1.0)
        return np.where(outside, x * (self.config.max_norm / safe), x)

    def conformal_factor(self, x: FloatArray) -> FloatArray:
        return 2.0 / (1.0 - self.c * np.sum(x * x, axis=-1))

    def _mobius_add(self, x: FloatArray, y: FloatArray) -> FloatArray:
        xy = _inner(x, y)
        x2 = _sqnorm(x)
        y2 = _sqnorm(y)
        c = self.c
        num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
        den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
        return num / den

    def mobius_add(self, x: FloatArray, y: FloatArray) -> FloatArray:
        """Gyrovector addition x ⊕_c y, projected into the ball"""
        return self.project(self._mobius_add(x, y))

    def gyro_norm(self, x: FloatArray, y: FloatArray) -> FloatArray:
        """
        ‖(−x) ⊕_c y‖ through its closed form

        ‖(−x) ⊕_c y‖² = ‖x − y‖² / (1 − 2c⟨x,y⟩ + c²‖x‖²‖y‖²). The closed form
        is exactly zero for x = y and exactly symmetric.
        """
        diff = x - y
        c = self.c
        den = 1.0 - 2.0 * c * np.sum(x * y, axis=-1) + c * c * np.sum(x * x, axis=-1) * np.sum(y * y, axis=-1)
        return np.sqrt(np.sum(diff * diff, axis=-1) / den)

    def dist(self, x: FloatArray, y: FloatArray) -> FloatArray:
        """Geodesic distance (2/√c)·artanh(√c‖(−x) ⊕_c y‖)"""
        arg = np.minimum(self.sqrt_c * self.gyro_norm(x, y), ARTANH_CLAMP)
        return (2.0 / self.sqrt_c) * np.arctanh(arg)

    def dist_arccosh(self, x: FloatArray, y: FloatArray) -> FloatArray:
        """
        Geodesic distance in the arccosh form

        (1/√c)·arccosh(1 + 2c‖x−y‖² / ((1 − c‖x‖²)(1 − c‖y‖²))), evaluated as
        log1p(z + √(z(z+2))) to keep precision for nearby points.
        """
        diff = x - y
        c = self.c
        alpha = 1.0 - c * np.sum(x * x, axis=-1)
        beta = 1.0 - c * np.sum(y * y, axis=-1)
        z = 2.0 * c * np.sum(diff * diff, axis=-1) / (alpha * beta)
        return np.log1p(z + np.sqrt(z * (z + 2.0))) / self.sqrt_c

    def exp_map(self, x: FloatArray, v: FloatArray) -> FloatArray:
        v_norm = _norm(v)
        lam = 2.0 / (1.0 - self.c * _sqnorm(x))
        safe = np.where(v_norm > 0.0, v_norm, 1.0)
        step = np.tanh(self.sqrt_c * lam * v_norm / 2.0) * v / (self.sqrt_c * safe)
        return self.project(self._mobius_add(x, step))

    def log_map(self, x: FloatArray, y: FloatArray) -> FloatArray:
        u = self._mobius_add(-x, y)
        u_norm = _norm(u)
        lam = 2.0 / (1.0 - self.c * _sqnorm(x))
        safe = np.where(u_norm > 0.0, u_norm, 1.0)
        scale = 2.0 / (self.sqrt_c * lam) * np.arctanh(np.minimum(self.sqrt_c * u_norm, ARTANH_CLAMP)) / safe
        same = np.all(x == y, axis=-1, keepdims=True)
        return np.where(same, 0.0, scale * u)

    def exp0(self, v: FloatArray) -> FloatArray:
        v = _as_finite(v, "tangent vector")
        norm = _norm(v)
        safe = np.where(norm > 0.0, norm, 1.0)
        return self.project(np.tanh(self.sqrt_c * norm) * v / (self.sqrt_c * safe))

    def log0(self, y: FloatArray) -> FloatArray:
        norm = _norm(y)
        safe = np.where(norm > 0.0, norm, 1.0)
        return np.arctanh(np.minimum(self.sqrt_c * norm, ARTANH_CLAMP)) * y / (self.sqrt_c * safe)

    def to_klein(self, x: FloatArray) -> FloatArray:
        return 2.0 * x / (1.0 + self.c * _sqnorm(x))

    def to_poincare(self, k: FloatArray) -> FloatArray:
        return k / (1.0 + np.sqrt(np.maximum(1.0 - self.c * _sqnorm(k), 0.0)))

    def lorentz_factor(self, k: FloatArray) -> FloatArray:
        return 1.0 / np.sqrt(1.0 - self.c * np.sum(k * k, axis=-1))

    def einstein_midpoint(self, points: ArrayLike) -> FloatArray:
        """
        Lorentz-weighted Klein average of a group of points, returned in the Poincaré ball

        Args:
            points: Array of shape (n, D) with n ≥ 1

        Returns:
            Array of shape (D,)

        Rows are summed in lexicographic order, so any permutation of the
        input gives a bit-identical result. The Lorentz factor of a Klein
        point is evaluated from its Poincaré preimage,
        γ = (1 + c‖x‖²)/(1 − c‖x‖²), which avoids the cancellation in
        1 − c‖k‖² near the boundary.
        """
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidInputError("einstein midpoint needs a non-empty (n, D) group")
        if pts.shape[0] == 1:
            return pts[0].copy()
        pts = pts[np.lexsort(pts.T[::-1])]
        sq = _sqnorm(pts)
        klein = 2.0 * pts / (1.0 + self.c * sq)
        gamma = (1.0 + self.c * sq) / (1.0 - self.c * sq)
        mid = np.sum(gamma * klein, axis=0) / np.sum(gamma)
        return self.project(self.to_poincare(mid))


@lru_cache(maxsize=64)
def ball_for(config: BallConfig) -> PoincareBall:
    """Shared PoincareBall for a configuration"""
    return PoincareBall(config)


@dataclass(frozen=True, eq=False)
class BallPoint:
    """A point strictly inside the ball; coordinates are projected on construction"""

    coords: FloatArray
    config: BallConfig

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=np.float64)
        if coords.shape != (self.config.dim,):
            raise ConfigurationError(f"point has shape {coords.shape}, ball dimension is {self.config.dim}")
        coords = ball_for(self.config).project(coords)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))


@dataclass(frozen=True, eq=False)
class TangentVec:
    """A Euclidean (tangent-space) vector of unbounded norm"""

    coords: FloatArray

    def __post_init__(self) -> None:
        coords = np.array(_as_finite(self.coords, "tangent vector"), dtype=np.float64)
        if coords.ndim != 1:
            raise InvalidInputError("tangent vector must be one-dimensional")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)


@dataclass(frozen=True, eq=False)
class KleinPoint:
    """A point of the Klein model, √c‖k‖ < 1"""

    coords: FloatArray
    config: BallConfig

    def __post_init__(self) -> None:
        coords = np.array(_as_finite(self.coords, "Klein point"), dtype=np.float64)
        if coords.shape != (self.config.dim,):
            raise ConfigurationError(f"point has shape {coords.shape}, ball dimension is {self.config.dim}")
        if self.config.sqrt_c * np.linalg.norm(coords) >= 1.0:
            raise InvalidInputError("Klein point lies on or outside the unit ball")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)


class KleinDirection(StrEnum):
    TO_KLEIN = "to_klein"
    TO_POINCARE = "to_poincare"


def _same_config(*points: BallPoint) -> BallConfig:
    config = points[0].config
    for point in points[1:]:
        if point.config != config:
            raise ConfigurationError("points belong to balls with different configurations")
    return config


def _tangent_for(v: TangentVec, config: BallConfig) -> FloatArray:
    if v.coords.shape != (config.dim,):
        raise ConfigurationError(f"tangent vector has length {v.coords.size}, ball dimension is {config.dim}")
    return v.coords


def project_to_ball(v: ArrayLike, config: BallConfig) -> BallPoint:
    """
    Clamp a vector into the ball

    Args:
        v: Vector of length D
        config: Ball configuration

    Returns:
        v unchanged when √c‖v‖ ≤ 1 − ε_b, otherwise v rescaled onto that radius

    Example:
        >>> project_to_ball([2.0], BallConfig(dim=1)).coords
        array([0.99999])
    """
    return BallPoint(_as_finite(v, "vector"), config)


def conformal_factor(x: BallPoint) -> float:
    """λ_x = 2 / (1 − c‖x‖²)"""
    return float(ball_for(x.config).conformal_factor(x.coords))


def mobius_add(x: BallPoint, y: BallPoint) -> BallPoint:
    config = _same_config(x, y)
    return BallPoint(ball_for(config).mobius_add(x.coords, y.coords), config)


def dist(x: BallPoint, y: BallPoint) -> float:
    """
    Hyperbolic distance between two points

    Example:
        >>> cfg = BallConfig(dim=1)
        >>> round(dist(BallPoint(np.zeros(1), cfg), BallPoint(np.array([0.5]), cfg)), 6)
        1.098612
    """
    config = _same_config(x, y)
    return float(ball_for(config).dist(x.coords, y.coords))


def exp_map(x: BallPoint, v: TangentVec) -> BallPoint:
    """Exponential map at x; the zero vector maps to x"""
    ball = ball_for(x.config)
    return BallPoint(ball.exp_map(x.coords, _tangent_for(v, x.config)), x.config)


def log_map(x: BallPoint, y: BallPoint) -> TangentVec:
    """Logarithmic map at x, the inverse of exp_map at x"""
    config = _same_config(x, y)
    return TangentVec(ball_for(config).log_map(x.coords, y.coords))


def exp0(v: TangentVec, config: BallConfig) -> BallPoint:
    """exp_0(v) = tanh(√c‖v‖)·v/(√c‖v‖), with exp_0(0) = 0"""
    return BallPoint(ball_for(config).exp0(_tangent_for(v, config)), config)


def log0(y: BallPoint) -> TangentVec:
    return TangentVec(ball_for(y.config).log0(y.coords))


def klein_convert(p: BallPoint | KleinPoint, direction: KleinDirection) -> KleinPoint | BallPoint:
    """
    Convert between the Poincaré ball and the Klein model

    Args:
        p: A BallPoint for TO_KLEIN or a KleinPoint for TO_POINCARE
        direction: Conversion direction

    Returns:
        The converted point

    Example:
        >>> cfg = BallConfig(dim=1)
        >>> klein_convert(BallPoint(np.array([0.6]), cfg), KleinDirection.TO_KLEIN).coords  # 15/17
        array([0.88235294])
    """
    ball = ball_for(p.config)
    if direction is KleinDirection.TO_KLEIN:
        if not isinstance(p, BallPoint):
            raise InvalidInputError("conversion to Klein expects a Poincaré point")
        return KleinPoint(ball.to_klein(p.coords), p.config)
    if not isinstance(p, KleinPoint):
        raise InvalidInputError("conversion to Poincaré expects a Klein point")
    return BallPoint(ball.to_poincare(p.coords), p.config)


def lorentz_factor(k: KleinPoint) -> float:
    """γ = 1/√(1 − c‖k‖²)"""
    return float(ball_for(k.config).lorentz_factor(k.coords))


def einstein_midpoint(points: Sequence[BallPoint]) -> BallPoint:
    """
    Einstein midpoint of a non-empty group of ball points

    Example:
        >>> cfg = BallConfig(dim=1)
        >>> pts = [BallPoint(np.zeros(1), cfg), BallPoint(np.array([0.6]), cfg)]
        >>> einstein_midpoint(pts).coords  # 1/3
        array([0.33333333])
    """
    if not points:
        raise InvalidInputError("einstein midpoint of an empty sequence")
    config = _same_config(*points)
    stacked = np.stack([p.coords for p in points])
    return BallPoint(ball_for(config).einstein_midpoint(stacked), config)
