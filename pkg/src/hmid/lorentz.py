"""Lorentz (hyperboloid) model primitives.

Points live on the upper sheet ``<x, x>_L = -1/c``. A point is stored as a
``(time, space)`` pair; ``time`` has the batch shape and ``space`` has one
extra trailing axis of size ``n``. All functions are pure and accept either
numpy arrays or :class:`hmid.engine.Tensor` components, so the same code
serves float64 verification and taped float32 training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import engine as E

EPS_ACOSH = 1e-12
EPS_TRIG = 1e-7
EPS_DENOM = 1e-12
SERIES_CUTOFF = 1e-6
# sinh overflows float32 near 89; 30 keeps products of coordinates finite too
MAX_EXP_ARG = 30.0
DEFAULT_K = 0.1
C_MAX = 10.0
C_MIN = 1e-4
TOL_MANIFOLD = {np.dtype(np.float64): 1e-8, np.dtype(np.float32): 1e-3}


class GeometryError(ValueError):
    """A geometric contract was violated (off-manifold, bad dimensions, ...)."""


class DegenerateAngleError(GeometryError):
    """The exterior angle is undefined because the two points coincide."""


class LorentzPoint(NamedTuple):
    time: object
    space: object

    @property
    def dim(self) -> int:
        return _shape(self.space)[-1]

    def coords(self) -> np.ndarray:
        """Full ambient coordinates ``[x0, x1, ..., xn]`` as an ndarray."""
        t = E.as_array(self.time)
        return np.concatenate([t[..., None], E.as_array(self.space)], axis=-1)

    def __getitem__(self, index):
        """Batch indexing; use ``.time`` / ``.space`` (or unpacking) for the fields."""
        return LorentzPoint(E.as_array(self.time)[index], E.as_array(self.space)[index])


@dataclass(frozen=True)
class ConeCheck:
    half_aperture: np.ndarray
    exterior_angle: np.ndarray
    violation: np.ndarray


def _shape(x) -> tuple[int, ...]:
    return np.shape(E.as_array(x))


def _as_point(x) -> LorentzPoint:
    if isinstance(x, LorentzPoint):
        return x
    time, space = x
    return LorentzPoint(time, space)


def _check_finite(x, what: str) -> None:
    arr = E.as_array(x)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{what} contains non-finite values")


def _check_curvature(c) -> None:
    val = np.asarray(E.as_array(c))
    if not np.all(val > 0):
        raise GeometryError(f"curvature must be positive, got {val}")


def tolerance(dtype) -> float:
    return TOL_MANIFOLD.get(np.dtype(dtype), 1e-8)


def origin(n: int, c: float = 1.0, dtype=np.float64) -> LorentzPoint:
    """The hyperboloid origin ``(1/sqrt(c), 0)``, used as [ROOT]."""
    return LorentzPoint(np.asarray(1.0 / math.sqrt(c), dtype=dtype), np.zeros(n, dtype=dtype))


def lorentz_inner(x, y):
    """``-x0*y0 + <x~, y~>`` over the trailing axis, broadcasting leading axes."""
    x, y = _as_point(x), _as_point(y)
    if _shape(x.space)[-1:] != _shape(y.space)[-1:]:
        raise GeometryError(
            f"dimension mismatch: {_shape(x.space)[-1:]} vs {_shape(y.space)[-1:]}")
    return E.sum(x.space * y.space, axis=-1) - x.time * y.time


def pairwise_inner(x, y):
    """Matrix of inner products ``<x_i, y_j>`` for batches ``x`` [B, n], ``y`` [M, n]."""
    x, y = _as_point(x), _as_point(y)
    if _shape(x.space)[-1] != _shape(y.space)[-1]:
        raise GeometryError("dimension mismatch in pairwise_inner")
    times = E.reshape(x.time, (-1, 1)) * E.reshape(y.time, (1, -1))
    return E.matmul(x.space, E.transpose(y.space)) - times


def lift(space, c) -> LorentzPoint:
    """Solve the hyperboloid constraint for the time coordinate."""
    _check_finite(space, "space")
    _check_curvature(c)
    return LorentzPoint(E.sqrt(1.0 / c + E.sum(space * space, axis=-1)), space)


def reproject(x, c) -> LorentzPoint:
    """Restore the constraint exactly by recomputing time from space."""
    return lift(_as_point(x).space, c)


def manifold_defect(x, c) -> np.ndarray:
    """``|<x, x>_L + 1/c|`` per point, as an ndarray."""
    x = _as_point(x)
    t, s = E.as_array(x.time), E.as_array(x.space)
    cv = E.as_array(c)
    return np.abs(np.sum(s * s, axis=-1) - t * t + 1.0 / cv)


def check_on_manifold(x, c, tol: float | None = None) -> None:
    x = _as_point(x)
    if tol is None:
        tol = tolerance(E.as_array(x.space).dtype)
    defect = manifold_defect(x, c)
    if not np.all(defect <= tol * np.maximum(1.0, np.abs(E.as_array(x.time)) ** 2)):
        raise GeometryError(f"point off the hyperboloid (defect {np.max(defect):.3e})")
    if not np.all(E.as_array(x.time) > 0):
        raise GeometryError("point not on the upper sheet")


def lorentz_distance(x, y, c, check: bool = True):
    """Geodesic distance ``acosh(-c<x,y>_L) / sqrt(c)``.

    Evaluated through ``-c<x,y>_L = 1 + c<x-y, x-y>_L / 2`` (an identity on
    the hyperboloid), which is exact at ``x = y`` and free of cancellation
    for nearby points.
    """
    x, y = _as_point(x), _as_point(y)
    if check:
        check_on_manifold(x, c)
        check_on_manifold(y, c)
    diff = LorentzPoint(x.time - y.time, x.space - y.space)
    half_gap = c * lorentz_inner(diff, diff) / 2.0
    return E.acosh1p(E.clamp(half_gap, 0.0)) / E.sqrt(c)


def pairwise_distance(x, y, c):
    """Distance matrix between batches; the training and ranking workhorse."""
    arg = E.clamp(-c * pairwise_inner(x, y), 1.0 + EPS_ACOSH)
    return E.acosh(arg) / E.sqrt(c)


def exp_map_origin(v, c) -> LorentzPoint:
    """Exponential map at the origin for tangent vectors ``v`` (space part only).

    The time component of a tangent vector at the origin is zero, so its
    Lorentz norm is the Euclidean norm of ``v``.
    """
    _check_finite(v, "tangent vector")
    _check_curvature(c)
    sq = E.sum(v * v, axis=-1)
    small = E.as_array(c * sq) < SERIES_CUTOFF ** 2
    z = E.sqrt(c * E.where(small, 1.0, sq))
    z = E.clamp(z, None, MAX_EXP_ARG)
    factor = E.where(small, 1.0 + c * sq / 6.0, E.sinh(z) / z)
    space = E.reshape(factor, _shape(factor) + (1,)) * v
    return lift(space, c)


def log_map_origin(x, c):
    """Inverse of :func:`exp_map_origin` (tangent space part)."""
    x = _as_point(x)
    norm = np.linalg.norm(E.as_array(x.space), axis=-1)
    dist = np.arcsinh(np.sqrt(c) * norm) / np.sqrt(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(norm > 0, dist / np.where(norm > 0, norm, 1.0), 1.0)
    return E.as_array(x.space) * scale[..., None]


def geodesic_interpolate(x, y, t, c) -> LorentzPoint:
    """Point at fraction ``t`` of the way along the geodesic from ``x`` to ``y``.

    ``t`` may be a scalar or an array broadcasting against the batch shape.
    Uses the hyperboloid slerp, falling back to linear interpolation plus
    reprojection for nearly coincident endpoints.
    """
    x, y = _as_point(x), _as_point(y)
    xt, xs = E.as_array(x.time), E.as_array(x.space)
    yt, ys = E.as_array(y.time), E.as_array(y.space)
    t = np.asarray(t, dtype=xs.dtype)
    diff = LorentzPoint(xt - yt, xs - ys)
    omega = np.asarray(E.acosh1p(np.maximum(c * lorentz_inner(diff, diff) / 2.0, 0.0)))
    near = omega < SERIES_CUTOFF
    safe = np.where(near, 1.0, omega)
    wx = np.where(near, 1.0 - t, np.sinh((1.0 - t) * safe) / np.sinh(safe))
    wy = np.where(near, t, np.sinh(t * safe) / np.sinh(safe))
    space = wx[..., None] * xs + wy[..., None] * ys
    out = lift(space, c)
    at0, at1 = np.broadcast_to(t == 0, _shape(out.time)), np.broadcast_to(t == 1, _shape(out.time))
    time = np.where(at0, xt, np.where(at1, yt, out.time))
    space = np.where(at0[..., None], xs, np.where(at1[..., None], ys, out.space))
    return LorentzPoint(time, space)


def _space_norm(x, floor: float = 0.0):
    sq = E.sum(x.space * x.space, axis=-1)
    if floor > 0:
        sq = E.clamp(sq, floor * floor)
    return E.sqrt(sq)


def half_aperture(x, c, K: float = DEFAULT_K, check: bool = True):
    """Half-aperture ``asin(2K / (sqrt(c) |x~|))`` of the entailment cone at ``x``.

    With ``check`` the root (``|x~| = 0``) raises; the loss path passes
    ``check=False`` and relies on a floored norm instead.
    """
    x = _as_point(x)
    if check and np.any(np.linalg.norm(E.as_array(x.space), axis=-1) == 0):
        raise GeometryError("half-aperture undefined at the root")
    norm = _space_norm(x, floor=0.0 if check else EPS_DENOM)
    arg = 2.0 * K / (E.sqrt(c) * norm)
    return E.asin(E.clamp(arg, None, 1.0 - EPS_TRIG))


def exterior_angle(x, y, c, check: bool = True):
    """Exterior angle ``pi - angle(O, x, y)`` at ``x`` in the triangle (root, x, y)."""
    x, y = _as_point(x), _as_point(y)
    cxy = c * lorentz_inner(x, y)
    gap = cxy * cxy - 1.0
    if check:
        if np.any(np.linalg.norm(E.as_array(x.space), axis=-1) == 0):
            raise GeometryError("exterior angle undefined at the root")
        if np.any(E.as_array(gap) <= EPS_DENOM):
            raise DegenerateAngleError("exterior angle undefined for coincident points")
    numer = y.time + x.time * cxy
    denom = _space_norm(x, floor=0.0 if check else EPS_DENOM) * E.sqrt(E.clamp(gap, EPS_DENOM))
    return E.acos(E.clamp(numer / denom, -1.0 + EPS_TRIG, 1.0 - EPS_TRIG))


def cone_check(x, y, c, K: float = DEFAULT_K) -> ConeCheck:
    """Cone membership of ``y`` relative to ``x`` (evaluated on plain arrays)."""
    x, y = _as_point(x), _as_point(y)
    x = LorentzPoint(E.as_array(x.time), E.as_array(x.space))
    y = LorentzPoint(E.as_array(y.time), E.as_array(y.space))
    aperture = half_aperture(x, c, K)
    angle = exterior_angle(x, y, c)
    return ConeCheck(aperture, angle, np.maximum(0.0, angle - aperture))


def clamp_curvature(value: float, c_max: float = C_MAX, c_min: float = C_MIN) -> float:
    return float(min(max(value, c_min), c_max))
