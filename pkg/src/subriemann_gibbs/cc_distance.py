"""Carnot-Caratheodory distance to the identity, geodesics and the constant K.

A geodesic leaving the identity with unit speed has horizontal velocity
``(cos(a + k s), sin(a + k s))``: its projection is a circular arc and its
vertical coordinate is the signed area swept between arc and chord.  Writing
``phi`` for half the total turning angle, an arc of length ``L`` reaches

    r = L sin(phi) / phi,        |x3| = L^2 (phi - sin(phi) cos(phi)) / (4 phi^2),

so ``|x3| / r^2 = mu(phi) = (phi - sin phi cos phi) / (4 sin^2 phi)``.  ``mu`` is
strictly increasing on ``[0, pi)``; inverting it gives ``phi`` and then
``d = r phi / sin(phi)``.  Points on the vertical axis are reached by a full
circle, ``d = 2 sqrt(pi |x3|)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numba
import numpy as np

from .heisenberg import (
    GroupElement,
    HorizontalVector,
    Observable,
    _as_points,
    dilate,
    mul,
    richardson_sub_gradient,
    sub_laplacian,
)

AXIS_TUBE = 1e-6
SOLVER_TOL = 1e-12
MAX_ITER = 200


class DistanceSolverError(ArithmeticError):
    """The shooting equation did not converge; carries the offending residual."""

    def __init__(self, point, residual):
        super().__init__(f"cc_distance did not converge at {tuple(point)}: residual {residual:.3e}")
        self.point = point
        self.residual = residual


@numba.njit(cache=True)
def _num_small(phi):
    # phi - sin(phi) cos(phi), series for small phi
    p2 = phi * phi
    return phi * p2 * (2.0 / 3.0 - p2 * (2.0 / 15.0 - p2 * (4.0 / 315.0 - p2 * (2.0 / 2835.0 - p2 * 4.0 / 155925.0))))


@numba.njit(cache=True)
def _sin_minus_phicos(phi):
    # sin(phi) - phi cos(phi), series for small phi
    if phi < 0.1:
        p2 = phi * phi
        return phi * p2 * (1.0 / 3.0 - p2 * (1.0 / 30.0 - p2 * (1.0 / 840.0 - p2 * (1.0 / 45360.0 - p2 / 3991680.0))))
    return math.sin(phi) - phi * math.cos(phi)


@numba.njit(cache=True)
def _mu_low(phi):
    s = math.sin(phi)
    if phi < 0.1:
        num = _num_small(phi)
    else:
        num = phi - s * math.cos(phi)
    return num / (4.0 * s * s)


@numba.njit(cache=True)
def _dmu_low(phi):
    s = math.sin(phi)
    return _sin_minus_phicos(phi) / (2.0 * s * s * s)


@numba.njit(cache=True)
def _mu_high(eps):
    # mu(pi - eps), accurate for small eps
    s = math.sin(eps)
    return (math.pi - eps + s * math.cos(eps)) / (4.0 * s * s)


@numba.njit(cache=True)
def _dmu_high(eps):
    # d/d eps of mu(pi - eps); negative
    s = math.sin(eps)
    return -(s + (math.pi - eps) * math.cos(eps)) / (2.0 * s * s * s)


@numba.njit(cache=True)
def _solve_low(m):
    """phi in [0, pi/2] with mu(phi) = m, for 0 < m <= pi/8."""
    if m < 1e-8:
        # mu(phi) = phi/6 (1 + 2 phi^2/15 + O(phi^4)); avoids sin^3 underflow
        return 6.0 * m * (1.0 - 4.8 * m * m), 0.0
    lo = 0.0
    hi = 0.5 * math.pi
    x = min(6.0 * m, 0.5 * math.pi)
    if x <= 0.0:
        x = 0.5 * hi
    res = 0.0
    for _ in range(MAX_ITER):
        res = _mu_low(x) - m
        if res > 0.0:
            hi = x
        else:
            lo = x
        step = res / _dmu_low(x)
        nx = x - step
        if not (lo < nx < hi):
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 4e-16 * max(x, 1e-300):
            x = nx
            break
        x = nx
    res = _mu_low(x) - m
    return x, res / m


@numba.njit(cache=True)
def _solve_high(m):
    """eps in (0, pi/2] with mu(pi - eps) = m, for m >= pi/8."""
    lo = 0.0
    hi = 0.5 * math.pi
    x = min(math.sqrt(math.pi / (4.0 * m)), hi)
    res = 0.0
    for _ in range(MAX_ITER):
        res = _mu_high(x) - m
        # mu_high decreases in eps
        if res > 0.0:
            lo = x
        else:
            hi = x
        nx = x - res / _dmu_high(x)
        if not (lo < nx < hi):
            nx = 0.5 * (lo + hi)
        if abs(nx - x) <= 4e-16 * x:
            x = nx
            break
        x = nx
    res = _mu_high(x) - m
    return x, res / m


@numba.njit(cache=True)
def _cc_point(x1, x2, x3):
    """Return (d, phi, residual, on_axis) for one point."""
    r = math.hypot(x1, x2)
    z = abs(x3)
    if z == 0.0:
        return r, 0.0, 0.0, r == 0.0
    d_axis = 2.0 * math.sqrt(math.pi * z)
    if r < AXIS_TUBE * d_axis:
        # first-order correction off the axis: d = d_axis - r + O(r^2 / d)
        return d_axis - r, math.pi, 0.0, True
    m = z / (r * r)
    if m <= math.pi / 8.0:
        phi, res = _solve_low(m)
        if phi < 1e-4:
            # phi / sin(phi) loses precision once phi is subnormal
            return r * (1.0 + phi * phi / 6.0), phi, res, False
        return r * phi / math.sin(phi), phi, res, False
    eps, res = _solve_high(m)
    return r * (math.pi - eps) / math.sin(eps), math.pi - eps, res, False


@numba.njit(cache=True)
def _cc_many(pts, d, phi, res, axis):
    for i in range(pts.shape[0]):
        a, b, c, e = _cc_point(pts[i, 0], pts[i, 1], pts[i, 2])
        d[i] = a
        phi[i] = b
        res[i] = c
        axis[i] = e


def _solve(points):
    pts = _as_points(points)
    flat = np.ascontiguousarray(pts.reshape(-1, 3))
    n = flat.shape[0]
    d = np.empty(n)
    phi = np.empty(n)
    res = np.empty(n)
    axis = np.empty(n, dtype=np.bool_)
    if not np.all(np.isfinite(flat)):
        raise ValueError("coordinates must be finite")
    _cc_many(flat, d, phi, res, axis)
    bad = ~(np.abs(res) <= 1e-10)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DistanceSolverError(flat[i], float(res[i]))
    shape = pts.shape[:-1]
    return d.reshape(shape), phi.reshape(shape), axis.reshape(shape), pts


def distance(points) -> np.ndarray:
    """Vectorised CC distance to the identity for arrays of shape ``(..., 3)``."""
    d = _solve(points)[0]
    return d if np.ndim(d) else float(d)


@dataclass(frozen=True)
class DistanceResult:
    d: float
    theta: float
    on_axis: bool


def cc_distance(x, tol: float = 1e-10) -> DistanceResult:
    """CC distance of ``x`` to the identity with the geodesic turning angle.

    ``theta`` is the signed total turning of the horizontal velocity along the
    minimising geodesic: 0 for straight lines, +-2 pi for full circles.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    d, phi, axis, pts = _solve(x)
    if np.ndim(d):
        raise ValueError("cc_distance takes a single point; use distance() for arrays")
    theta = 2.0 * float(phi) * float(np.sign(pts[2]))
    return DistanceResult(float(d), theta, bool(axis))


def gradient(points) -> np.ndarray:
    """Analytic sub-gradient of d off the vertical axis, shape ``(..., 2)``.

    Differentiating ``d = r G(phi)`` with ``mu(phi) = |x3|/r^2`` held implicit
    gives ``dd/dr = cos(phi)`` and ``dd/d|x3| = 2 sin(phi) / r``; in the
    left-invariant frame this is the radial unit vector rotated by
    ``sign(x3) phi``.
    """
    d, phi, axis, pts = _solve(points)
    r = np.hypot(pts[..., 0], pts[..., 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        u1 = pts[..., 0] / r
        u2 = pts[..., 1] / r
    ang = np.sign(pts[..., 2]) * phi
    c, s = np.cos(ang), np.sin(ang)
    return np.stack([c * u1 - s * u2, s * u1 + c * u2], axis=-1)


def laplacian(points) -> np.ndarray:
    """Closed-form sub-Laplacian of d off the axis.

    For ``d = psi(r, |x3|)``: ``Delta d = psi_rr + psi_r / r + (r^2/4) psi_ss``,
    which reduces to ``[cos phi + 2 sin^3 phi (2 mu sin phi + cos(phi)/2)
    / (sin phi - phi cos phi)] / r``.
    """
    d, phi, axis, pts = _solve(points)
    r = np.hypot(pts[..., 0], pts[..., 1])
    z = np.abs(pts[..., 2])
    phi = np.asarray(phi, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = z / (r * r)
        s = np.sin(phi)
        c = np.cos(phi)
        denom = np.vectorize(_sin_minus_phicos)(phi) if phi.ndim else _sin_minus_phicos(float(phi))
        small = phi < 1e-4
        ratio = np.where(small, 3.0 - 0.6 * phi * phi, s ** 3 / np.where(small, 1.0, denom))
        val = (c + 2.0 * ratio * (2.0 * m * s + 0.5 * c)) / r
    val = np.where(axis, -np.inf, val)
    return val if np.ndim(val) else float(val)


distance_observable = Observable(lambda x: np.asarray(distance(x)), gradient, name="d")


def _distance_no_grad(x):
    return np.asarray(distance(x))


def eikonal_residual(x, h: float = 1e-4) -> float:
    """``| |grad d(x)| - 1 |`` from a Richardson-extrapolated finite difference.

    The closed-form gradient is deliberately not used so that the check is
    independent of the geodesic parameterisation.
    """
    pts = _as_points(x)
    r = np.hypot(pts[..., 0], pts[..., 1])
    d = np.asarray(distance(pts))
    if np.any(r < AXIS_TUBE * d):
        raise ValueError("eikonal residual is undefined on the vertical axis")
    step = h * np.maximum(np.minimum(r, d), 1e-3)
    step = float(np.min(step))
    g = richardson_sub_gradient(_distance_no_grad, pts, step)
    out = np.abs(np.hypot(g[..., 0], g[..., 1]) - 1.0)
    return out if np.ndim(out) else float(out)


def sub_laplacian_d(points, h: float = 1e-4) -> np.ndarray:
    """Finite-difference sub-Laplacian of d with a step proportional to d."""
    pts = _as_points(points)
    d = np.asarray(distance(pts))
    # pointwise relative steps keep the truncation error scale-free
    out = np.empty(d.shape)
    flat = pts.reshape(-1, 3)
    hs = (h * np.maximum(d, 1e-12)).reshape(-1)
    res = np.empty(flat.shape[0])
    for step in np.unique(hs):
        sel = hs == step
        res[sel] = sub_laplacian(_distance_no_grad, flat[sel], float(step))
    out = res.reshape(d.shape)
    return out if np.ndim(out) else float(out)


def sample_unit_sphere(n: int, rng: np.random.Generator, tube: float = 1e-3) -> np.ndarray:
    """Points with d = 1: uniform Euclidean directions pushed onto the sphere by dilation.

    Directions within ``tube`` (relative horizontal radius) of the vertical
    axis are redrawn.
    """
    out = np.empty((0, 3))
    while out.shape[0] < n:
        v = rng.standard_normal((2 * n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        y = dilate(1.0 / np.asarray(distance(v)), v)
        r = np.hypot(y[:, 0], y[:, 1])
        out = np.concatenate([out, y[r > tube]])
    return out[:n]


def estimate_K(n_samples: int = 10_000, seed: int = 0, h: float = 1e-4, tube: float = 1e-3) -> float:
    """Sample supremum of the FD sub-Laplacian of d over the unit CC sphere.

    By homogeneity ``Delta d(x) <= K / d(x)`` then holds at every sampled
    scale.  The sample set always includes the horizontal unit circle.
    """
    rng = np.random.default_rng(seed)
    pts = sample_unit_sphere(n_samples, rng, tube)
    ring = np.array([[math.cos(a), math.sin(a), 0.0] for a in np.linspace(0, 2 * math.pi, 16, endpoint=False)])
    pts = np.concatenate([pts, ring])
    return float(np.max(sub_laplacian_d(pts, h)))


@dataclass(frozen=True)
class AdmissiblePath:
    samples: np.ndarray  # (n_steps + 1, 3)
    coefficients: np.ndarray  # (n_steps, 2), horizontal increment per step
    length: float

    @property
    def endpoint(self) -> GroupElement:
        return GroupElement(*map(float, self.samples[-1]))


def _helix(L: float, turn: float, start_angle: float, s: np.ndarray) -> np.ndarray:
    k = turn / L
    pts = np.zeros(s.shape + (3,))
    if turn == 0.0:
        pts[:, 0] = s * math.cos(start_angle)
        pts[:, 1] = s * math.sin(start_angle)
        return pts
    # horizontal: integral of e^{i(a + k u)} du ; vertical: swept signed area
    w = np.exp(1j * start_angle) * (np.exp(1j * k * s) - 1.0) / (1j * k)
    pts[:, 0] = w.real
    pts[:, 1] = w.imag
    pts[:, 2] = (k * s - np.sin(k * s)) / (2.0 * k * k)
    return pts


def geodesic(x, n_steps: int) -> AdmissiblePath:
    """Sampled minimising helix from the identity to ``x``."""
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    res = cc_distance(x)
    x = np.asarray(x, dtype=float)
    L = res.d
    s = np.linspace(0.0, L, n_steps + 1)
    if L == 0.0:
        samples = np.zeros((n_steps + 1, 3))
        return AdmissiblePath(samples, np.zeros((n_steps, 2)), 0.0)
    turn = res.theta
    if res.on_axis:
        start = 0.0
    else:
        start = math.atan2(x[1], x[0]) - 0.5 * turn
    samples = _helix(L, turn, start, s)
    mid = 0.5 * (s[1:] + s[:-1])
    ang = start + (turn / L) * mid
    ds = np.diff(s)
    coeffs = np.stack([np.cos(ang) * ds, np.sin(ang) * ds], axis=-1)
    return AdmissiblePath(samples, coeffs, float(np.sum(np.hypot(coeffs[:, 0], coeffs[:, 1]))))


def horizontal_defect(path: AdmissiblePath) -> float:
    """Largest vertical mismatch between consecutive samples and a horizontal step.

    Each increment is compared with right-multiplication by the straight
    horizontal step joining the projections; the mismatch is the area of the
    arc-chord sliver, O(step^3).
    """
    a = path.samples[:-1]
    b = path.samples[1:]
    step = np.zeros_like(a)
    step[:, :2] = b[:, :2] - a[:, :2]
    return float(np.max(np.abs(mul(a, step)[:, 2] - b[:, 2])))
