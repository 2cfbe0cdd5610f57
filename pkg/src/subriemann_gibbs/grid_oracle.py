"""Brute-force CC distance on a discrete subgroup, independent of the helix solver.

With step ``h`` the points ``(i h, j h, k h^2 / 2)`` for integers ``i, j, k``
form a subgroup: the product of two such points has vertical index
``k + k' + (i j' - j i')``.  Right multiplication by a short horizontal
segment ``(m h, n h, 0)`` is a left-invariant edge of length
``h sqrt(m^2 + n^2)``.  Using every primitive direction with
``max(|m|, |n|) <= 3`` makes the graph metric a polygonal sub-Finsler norm
within about 1.3% of ``d``; restricting to the four axis moves would converge
to the l1 (taxicab) version of the metric instead.

Distances are computed by Dijkstra from the identity up to a radius ``R`` and
joined through a midpoint: ``D(t) = min_y D(y) + D(y^{-1} t)``, which is exact
whenever ``D(t) <= 2 (R - w_max)``.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence, Tuple

import numba
import numpy as np

DEFAULT_BOX = ((-4.0, 4.0), (-4.0, 4.0), (-8.0, 8.0))
DEFAULT_STEPS = (0.2, 0.1, 0.05)
MAX_MOVE = 3
# polygon of 32 directions overestimates Euclidean length by at most ~1.3%
_SLACK = 1.02


def primitive_moves(max_move: int = MAX_MOVE) -> np.ndarray:
    moves = [
        (m, n)
        for m in range(-max_move, max_move + 1)
        for n in range(-max_move, max_move + 1)
        if (m, n) != (0, 0) and math.gcd(m, n) == 1
    ]
    return np.array(moves, dtype=np.int64)


@numba.njit(cache=True)
def _sift_up(heap, keys, pos, idx):
    node = heap[idx]
    key = keys[idx]
    while idx > 0:
        parent = (idx - 1) >> 1
        if keys[parent] <= key:
            break
        heap[idx] = heap[parent]
        keys[idx] = keys[parent]
        pos[heap[idx]] = idx
        idx = parent
    heap[idx] = node
    keys[idx] = key
    pos[node] = idx


@numba.njit(cache=True)
def _sift_down(heap, keys, pos, idx, size):
    node = heap[idx]
    key = keys[idx]
    while True:
        child = 2 * idx + 1
        if child >= size:
            break
        if child + 1 < size and keys[child + 1] < keys[child]:
            child += 1
        if keys[child] >= key:
            break
        heap[idx] = heap[child]
        keys[idx] = keys[child]
        pos[heap[idx]] = idx
        idx = child
    heap[idx] = node
    keys[idx] = key
    pos[node] = idx


@numba.njit(cache=True)
def _dijkstra(ni, nj, nk, moves, weights, radius):
    """Graph distance from the identity (the centre node) for every node within ``radius``."""
    n = ni * nj * nk
    ci, cj, ck = ni // 2, nj // 2, nk // 2
    dist = np.full(n, np.inf)
    pos = np.full(n, -1, dtype=np.int32)  # -1 unseen, -2 settled
    heap = np.empty(n, dtype=np.int32)
    keys = np.empty(n)
    src = (ci * nj + cj) * nk + ck
    dist[src] = 0.0
    heap[0] = src
    keys[0] = 0.0
    pos[src] = 0
    size = 1
    while size > 0:
        u = heap[0]
        du = keys[0]
        size -= 1
        pos[u] = -2
        if size > 0:
            heap[0] = heap[size]
            keys[0] = keys[size]
            pos[heap[0]] = 0
            _sift_down(heap, keys, pos, 0, size)
        if du > radius:
            dist[u] = np.inf
            break
        a = u // (nj * nk) - ci
        b = (u // nk) % nj - cj
        c = u % nk - ck
        for e in range(moves.shape[0]):
            m = moves[e, 0]
            q = moves[e, 1]
            ia = a + m + ci
            jb = b + q + cj
            kc = c + a * q - b * m + ck
            if ia < 0 or ia >= ni or jb < 0 or jb >= nj or kc < 0 or kc >= nk:
                continue
            v = (ia * nj + jb) * nk + kc
            if pos[v] == -2:
                continue
            nd = du + weights[e]
            if nd < dist[v]:
                dist[v] = nd
                if pos[v] == -1:
                    heap[size] = v
                    keys[size] = nd
                    pos[v] = size
                    size += 1
                    _sift_up(heap, keys, pos, size - 1)
                else:
                    keys[pos[v]] = nd
                    _sift_up(heap, keys, pos, pos[v])
    # anything not settled within the radius is unreliable
    for v in range(n):
        if pos[v] != -2 or dist[v] > radius:
            dist[v] = np.inf
    return dist


@numba.njit(cache=True)
def _join(dist, ni, nj, nk, ti, tj, tk):
    """min over y of D(y) + D(y^{-1} t) on the lattice."""
    ci, cj, ck = ni // 2, nj // 2, nk // 2
    best = np.inf
    for u in range(dist.shape[0]):
        du = dist[u]
        if du >= best or du == np.inf:
            continue
        a = u // (nj * nk) - ci
        b = (u // nk) % nj - cj
        c = u % nk - ck
        # y^{-1} t
        i2 = ti - a + ci
        j2 = tj - b + cj
        k2 = tk - c - a * tj + b * ti + ck
        if i2 < 0 or i2 >= ni or j2 < 0 or j2 >= nj or k2 < 0 or k2 >= nk:
            continue
        tot = du + dist[(i2 * nj + j2) * nk + k2]
        if tot < best:
            best = tot
    return best


def _lattice_index(x, h: float) -> Tuple[int, int, int]:
    return (int(round(x[0] / h)), int(round(x[1] / h)), int(round(2.0 * x[2] / (h * h))))


def on_lattice(x, h: float, tol: float = 1e-9) -> bool:
    i, j, k = _lattice_index(x, h)
    return abs(i * h - x[0]) <= tol and abs(j * h - x[1]) <= tol and abs(0.5 * k * h * h - x[2]) <= tol


def _check_box(pts: np.ndarray, box) -> None:
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    outside = np.any((pts < lo) | (pts > hi), axis=1)
    if np.any(outside):
        raise ValueError(f"point {tuple(pts[np.argmax(outside)])} lies outside the oracle box {box}")


def grid_oracle_many(points, grid_step: float, box=DEFAULT_BOX, max_move: int = MAX_MOVE) -> np.ndarray:
    """Lattice distances for several targets sharing one shortest-path tree.

    Targets are snapped to the nearest lattice point of step ``grid_step``.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    _check_box(pts, box)
    h = float(grid_step)
    moves = primitive_moves(max_move)
    weights = h * np.hypot(moves[:, 0], moves[:, 1])
    w_max = float(weights.max())
    targets = [_lattice_index(p, h) for p in pts]
    # a cheap upper bound for d: go across horizontally, then draw a circle
    upper = max(math.hypot(p[0], p[1]) + 2.0 * math.sqrt(math.pi * abs(p[2])) for p in pts)
    radius = _SLACK * 0.5 * upper + 2.0 * w_max
    out = np.full(len(pts), np.inf)
    todo = list(range(len(pts)))
    while todo:
        reach = radius + w_max
        half_ij = int(math.ceil(reach / h)) + 1
        half_k = int(math.ceil(reach * reach / (2.0 * math.pi) / (0.5 * h * h))) + 1
        ni = nj = 2 * half_ij + 1
        nk = 2 * half_k + 1
        dist = _dijkstra(ni, nj, nk, moves, weights, radius)
        retry = []
        for t in todo:
            ti, tj, tk = targets[t]
            val = 0.0 if (ti, tj, tk) == (0, 0, 0) else _join(dist, ni, nj, nk, ti, tj, tk)
            if val <= 2.0 * (radius - w_max):
                out[t] = val
            else:
                retry.append(t)
        todo = retry
        radius *= 1.25
    return out


def cc_distance_grid_oracle(x, grid_step: float, box=DEFAULT_BOX) -> float:
    """Shortest horizontal lattice path from the identity to ``x``."""
    return float(grid_oracle_many([x], grid_step, box)[0])


def richardson(steps: Sequence[float], values: Sequence[float]) -> float:
    """Value at zero step of the polynomial through ``(steps, values)``."""
    steps = np.asarray(steps, dtype=float)
    values = np.asarray(values, dtype=float)
    coef = np.polyfit(steps, values, len(steps) - 1)
    return float(coef[-1])


def oracle_table(points, steps: Iterable[float] = DEFAULT_STEPS, box=DEFAULT_BOX):
    """Oracle values per step (rows follow ``steps``) and their extrapolation."""
    steps = list(steps)
    vals = np.array([grid_oracle_many(points, h, box) for h in steps])
    extrap = np.array([richardson(steps, vals[:, i]) for i in range(vals.shape[1])])
    return vals, extrap
