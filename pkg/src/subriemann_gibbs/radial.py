"""Exact sampling of radial densities on the Heisenberg group.

Lebesgue measure factorises in homogeneous polar coordinates as
``dx = t^3 dt dsigma`` with ``x = delta_t(sigma)`` and ``d(sigma) = 1``.  A
density ``exp(-g(d(x)))`` is therefore sampled by drawing ``t`` from
``t^3 exp(-g(t))`` and ``sigma`` from the cone measure, which is the law of
``delta_{1/d(Y)} Y`` for ``Y`` uniform in the unit ball.
"""
from __future__ import annotations

from typing import Callable, Optional

import math

import numba
import numpy as np

from .cc_distance import distance
from .heisenberg import dilate

_BALL_BOX_Z = 1.0 / (2.0 * np.pi)  # max |x3| on the unit ball
_SCAN = np.geomspace(1e-8, 1e8, 321)
CHUNK = 8192


def sphere_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the unit CC sphere distributed by the cone measure."""
    out = []
    have = 0
    while have < n:
        m = 2 * (n - have) + 16
        y = rng.uniform(-1.0, 1.0, size=(m, 3))
        y[:, 2] *= _BALL_BOX_Z
        dy = np.asarray(distance(y)).reshape(-1)
        keep = (dy <= 1.0) & (dy > 0.0)
        y, dy = y[keep], dy[keep]
        out.append(dilate(1.0 / dy, y))
        have += y.shape[0]
    return np.concatenate(out)[:n]


def directions_from_uniforms(u: np.ndarray, fallback: Callable[[int], np.random.Generator]) -> np.ndarray:
    """Cone-measure directions from blocks of ``3 m`` uniforms per row.

    Candidate ``j`` of a row is accepted if it falls in the unit ball; rows
    whose whole block is rejected draw from ``fallback(row)``.
    """
    rows = u.shape[0]
    cand = u.reshape(rows, -1, 3)
    out = np.empty((rows, 3))
    todo = np.arange(rows)
    for j in range(cand.shape[1]):
        y = 2.0 * cand[todo, j] - 1.0
        y[:, 2] *= _BALL_BOX_Z
        dy = np.asarray(distance(y)).reshape(-1)
        ok = (dy <= 1.0) & (dy > 0.0)
        if ok.any():
            out[todo[ok]] = dilate(1.0 / dy[ok], y[ok])
        todo = todo[~ok]
        if todo.size == 0:
            return out
    for r in todo:
        out[r] = sphere_directions(1, fallback(int(r)))[0]
    return out


def _upper_limit(g, params, drop: float) -> np.ndarray:
    t = np.broadcast_to(_SCAN, (params.shape[0], _SCAN.size))
    with np.errstate(over="ignore", invalid="ignore"):
        logf = 3.0 * np.log(t) - g(t, params)
    logf = np.where(np.isfinite(logf), logf, -np.inf)
    top = np.argmax(logf, axis=1)
    peak = logf[np.arange(logf.shape[0]), top]
    if not np.all(np.isfinite(peak)):
        raise FloatingPointError("radial density is not finite anywhere on the scan grid")
    below = (logf < (peak - drop)[:, None]) & (np.arange(_SCAN.size)[None, :] > top[:, None])
    if not np.all(below.any(axis=1)):
        raise FloatingPointError("radial density does not decay; potential is not confining")
    return _SCAN[np.argmax(below, axis=1)]


def sample_radius(
    g: Callable[[np.ndarray, np.ndarray], np.ndarray],
    params,
    rng: Optional[np.random.Generator] = None,
    n_grid: int = 1024,
    drop: float = 40.0,
    u: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One draw per row of ``params`` from ``t^3 exp(-g(t, row))`` on ``t >= 0``.

    ``g(t, params)`` receives radii of shape ``(rows, m)`` and the matching
    parameter rows ``(rows, k)``.  The CDF is tabulated on ``n_grid`` nodes up
    to where the log-density has fallen by ``drop`` below its maximum and
    inverted with the density taken linear in each cell.  Uniforms come from
    ``u`` when given (one per row), otherwise from ``rng``.
    """
    params = np.asarray(params, dtype=float)
    if params.ndim == 1:
        params = params[:, None]
    n = params.shape[0]
    out = np.empty(n)
    u = rng.uniform(size=n) if u is None else np.asarray(u, dtype=float)
    for lo in range(0, n, CHUNK):
        hi = min(n, lo + CHUNK)
        par = params[lo:hi]
        T = _upper_limit(g, par, drop)
        grid = T[:, None] * np.linspace(0.0, 1.0, n_grid)[None, :]
        with np.errstate(divide="ignore"):
            logf = 3.0 * np.log(grid) - g(grid, par)
        logf[:, 0] = -np.inf
        logf -= logf.max(axis=1, keepdims=True)
        f = np.exp(logf)
        w = grid[:, 1]
        cells = 0.5 * (f[:, 1:] + f[:, :-1]) * w[:, None]
        cdf = np.concatenate([np.zeros((hi - lo, 1)), np.cumsum(cells, axis=1)], axis=1)
        target = u[lo:hi] * cdf[:, -1]
        k = np.minimum(np.sum(cdf[:, 1:] < target[:, None], axis=1), n_grid - 2)
        r = np.arange(hi - lo)
        rem = target - cdf[r, k]
        f0, f1 = f[r, k], f[r, k + 1]
        disc = np.maximum(f0 * f0 + 2.0 * (f1 - f0) * rem / w, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = 2.0 * rem / (f0 + np.sqrt(disc))
        out[lo:hi] = grid[r, k] + np.clip(np.nan_to_num(s), 0.0, w)
    return out


def sample_radial(g, params, rng: np.random.Generator, **kw) -> np.ndarray:
    """Points with density proportional to ``exp(-g(d(x), row))``, shape ``(rows, 3)``."""
    t = sample_radius(g, params, rng, **kw)
    sigma = sphere_directions(t.shape[0], rng)
    return dilate(np.maximum(t, 1e-300), sigma)


# --------------------------------------------------------------------------
# fast path for g(t) = a t^p + b t^2 + c t + e sqrt(t^2 + k^2)
#
# Every conditional used in this package has this form.  When log(t^3 e^-g)
# is concave the radius is drawn by rejection from a piecewise exponential
# envelope built from three tangents (at the mode and one Laplace width on
# either side), which accepts roughly 80% of proposals.

RADIUS_TRIES = 6
PARAMS = ("a", "p", "b", "c", "e", "k")


@numba.njit(cache=True)
def _h(t, a, p, b, c, e, k):
    return 3.0 * math.log(t) - (a * t ** p + b * t * t + c * t + e * math.sqrt(t * t + k * k))


@numba.njit(cache=True)
def _dh(t, a, p, b, c, e, k):
    return 3.0 / t - (a * p * t ** (p - 1.0) + 2.0 * b * t + c + e * t / math.sqrt(t * t + k * k))


@numba.njit(cache=True)
def _d2h(t, a, p, b, c, e, k):
    r = t * t + k * k
    return -3.0 / (t * t) - (a * p * (p - 1.0) * t ** (p - 2.0) + 2.0 * b + e * k * k / (r * math.sqrt(r)))


@numba.njit(cache=True)
def _mode(a, p, b, c, e, k):
    lo = 1e-12
    hi = 1.0
    it = 0
    while _dh(hi, a, p, b, c, e, k) > 0.0:
        hi *= 4.0
        it += 1
        if it > 200:
            return -1.0
    while _dh(lo, a, p, b, c, e, k) < 0.0:
        lo *= 1e-3
        it += 1
        if it > 400:
            return -1.0
    x = math.sqrt(lo * hi)
    for _ in range(200):
        f = _dh(x, a, p, b, c, e, k)
        if f > 0.0:
            lo = x
        else:
            hi = x
        d2 = _d2h(x, a, p, b, c, e, k)
        nx = x - f / d2 if d2 < 0.0 else -1.0
        if not (lo < nx < hi):
            nx = math.sqrt(lo * hi)
        if abs(nx - x) <= 1e-13 * x:
            return nx
        x = nx
    return x


@numba.njit(cache=True)
def _ars_rows(par, u, out, status):
    n = par.shape[0]
    tries = u.shape[1] // 3
    for i in range(n):
        a, p, b, c, e, k = par[i, 0], par[i, 1], par[i, 2], par[i, 3], par[i, 4], par[i, 5]
        m = _mode(a, p, b, c, e, k)
        if m <= 0.0:
            status[i] = 2
            continue
        d2 = _d2h(m, a, p, b, c, e, k)
        if not d2 < 0.0:
            status[i] = 2
            continue
        s = 1.0 / math.sqrt(-d2)
        # concavity spot check over the bulk of the density
        concave = True
        for j in range(-8, 17):
            t = m + 0.5 * j * s
            if t > 0.0 and _d2h(t, a, p, b, c, e, k) > 0.0:
                concave = False
        if not concave:
            status[i] = 2
            continue
        z1 = m - s if m - s > 0.25 * m else 0.25 * m
        z3 = m + s
        hm = _h(m, a, p, b, c, e, k)
        h1 = _h(z1, a, p, b, c, e, k) - hm
        s1 = _dh(z1, a, p, b, c, e, k)
        h3 = _h(z3, a, p, b, c, e, k) - hm
        s3 = _dh(z3, a, p, b, c, e, k)
        x12 = z1 - h1 / s1
        x23 = z3 - h3 / s3
        if x12 < 0.0:
            x12 = 0.0
        areaA = -math.expm1(-s1 * x12) / s1
        areaB = x23 - x12
        areaC = -1.0 / s3
        total = areaA + areaB + areaC
        status[i] = 1
        for j in range(tries):
            v = u[i, 3 * j] * total
            w = u[i, 3 * j + 1]
            if v < areaA:
                # exponential piece rising towards x12
                t = x12 + math.log1p(-w * -math.expm1(-s1 * x12)) / s1
                env = h1 + s1 * (t - z1)
            elif v < areaA + areaB:
                t = x12 + w * areaB
                env = 0.0
            else:
                t = x23 + math.log1p(-w) / s3
                env = h3 + s3 * (t - z3)
            if t <= 0.0:
                continue
            if math.log(u[i, 3 * j + 2]) < _h(t, a, p, b, c, e, k) - hm - env:
                out[i] = t
                status[i] = 0
                break


def radial_params(a, p, b=0.0, c=0.0, e=0.0, k=0.0, n: Optional[int] = None) -> np.ndarray:
    """Per-row parameter table ``(n, 6)`` for :func:`sample_radius_fast`."""
    cols = np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in (a, p, b, c, e, k)])
    par = np.stack([np.ravel(col) for col in cols], axis=-1)
    if n is not None and par.shape[0] == 1:
        par = np.repeat(par, n, axis=0)
    # fold the quadratic term into the power term when they coincide
    two = par[:, 1] == 2.0
    par[two, 0] += par[two, 2]
    par[two, 2] = 0.0
    return np.ascontiguousarray(par)


def _g_from_params(t, par):
    a, p, b, c, e, k = (par[:, j : j + 1] for j in range(6))
    return a * t ** p + b * t * t + c * t + e * np.sqrt(t * t + k * k)


def sample_radius_fast(par: np.ndarray, u: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
                       extra: Optional[Callable[[int], np.random.Generator]] = None) -> np.ndarray:
    """Draws from ``t^3 exp(-g(t))`` for rows of a :func:`radial_params` table.

    ``u`` holds ``3 * RADIUS_TRIES`` uniforms per row.  Rows that exhaust them
    continue with ``extra(row)`` (or ``rng``); rows whose log-density is not
    concave fall back to the tabulated inversion.
    """
    par = np.ascontiguousarray(par, dtype=float)
    n = par.shape[0]
    if u is None:
        u = rng.uniform(size=(n, 3 * RADIUS_TRIES))
    u = np.ascontiguousarray(u, dtype=float)
    out = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    _ars_rows(par, u, out, status)
    for i in np.nonzero(status == 1)[0]:
        g = extra(int(i)) if extra is not None else rng
        one = np.zeros(1)
        st = np.ones(1, dtype=np.int8)
        while st[0] == 1:
            _ars_rows(par[i : i + 1], g.uniform(size=(1, 3 * RADIUS_TRIES)), one, st)
        out[i] = one[0]
        status[i] = st[0]
    bad = np.nonzero(status == 2)[0]
    if bad.size:
        g = extra(int(bad[0])) if extra is not None else rng
        out[bad] = sample_radius(_g_from_params, par[bad], g)
    return out
