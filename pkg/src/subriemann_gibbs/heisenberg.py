"""Heisenberg group arithmetic and horizontal differential operators.

Points are triples ``(x1, x2, x3)``.  Every function here accepts either a
single point (anything of shape ``(3,)``) or a stack of points of shape
``(..., 3)`` and broadcasts like numpy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

DEFAULT_STEP = 1e-4


class GroupElement(NamedTuple):
    x1: float
    x2: float
    x3: float

    def __array__(self, dtype=None, copy=None):
        return np.array((self.x1, self.x2, self.x3), dtype=dtype or float)


class HorizontalVector(NamedTuple):
    v1: float
    v2: float

    @property
    def norm(self) -> float:
        return float(np.hypot(self.v1, self.v2))


IDENTITY = GroupElement(0.0, 0.0, 0.0)


def _as_points(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"expected trailing dimension 3, got shape {arr.shape}")
    return arr


def _wrap(arr: np.ndarray):
    if arr.ndim == 1:
        return GroupElement(float(arr[0]), float(arr[1]), float(arr[2]))
    return arr


def _mul(a, b) -> np.ndarray:
    a = _as_points(a)
    b = _as_points(b)
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 0] + b[..., 0]
    out[..., 1] = a[..., 1] + b[..., 1]
    out[..., 2] = a[..., 2] + b[..., 2] + 0.5 * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    return out


def mul(a, b):
    """Group product ``a . b``."""
    return _wrap(_mul(a, b))


def inverse(a):
    return _wrap(-_as_points(a))


def dilate(lam, a):
    """Anisotropic dilation ``(lam x1, lam x2, lam^2 x3)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("dilation factor must be positive")
    a = _as_points(a)
    lam = lam[..., None]
    scale = np.concatenate([lam, lam, lam * lam], axis=-1)
    return _wrap(a * scale)


def horizontal_step(k: int, t) -> np.ndarray:
    """The one-parameter subgroup ``e_k(t)`` generating ``X_k`` (k = 1, 2)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (3,))
    out[..., k - 1] = t
    return out


def vector_fields(x) -> np.ndarray:
    """Coefficients of X1, X2, X3 in the Euclidean basis at ``x``.

    Returns an array of shape ``(..., 3, 3)`` whose row ``k`` is ``X_{k+1}(x)``.
    """
    x = _as_points(x)
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 0, 2] = -0.5 * x[..., 1]
    out[..., 1, 1] = 1.0
    out[..., 1, 2] = 0.5 * x[..., 0]
    out[..., 2, 2] = 1.0
    return out


@dataclass(frozen=True)
class Observable:
    """A scalar function on the group, optionally with its horizontal gradient.

    ``func`` and ``grad`` must accept arrays of shape ``(..., 3)``; ``grad``
    returns shape ``(..., 2)`` holding ``(X1 f, X2 f)``.
    """

    func: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "f"

    def __call__(self, x):
        return self.func(_as_points(x))

    @property
    def eval(self):
        return self.func

    @property
    def analytic_gradient(self):
        return self.grad

    def without_gradient(self) -> "Observable":
        return Observable(self.func, None, self.name)


def _checked(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("observable returned non-finite values")
    return values


def horizontal_derivative(f, x, k: int, h: float = DEFAULT_STEP):
    """Central difference for ``X_k f(x)`` along left translations.

    ``(f(x . e_k(h)) - f(x . e_k(-h))) / 2h``; exact for polynomials of degree
    two in the translation parameter, O(h^2) otherwise.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    x = _as_points(x)
    plus = _checked(f(_mul(x, horizontal_step(k, h))))
    minus = _checked(f(_mul(x, horizontal_step(k, -h))))
    return (plus - minus) / (2.0 * h)


def fd_sub_gradient(f, x, h: float = DEFAULT_STEP) -> np.ndarray:
    """Finite-difference ``(X1 f, X2 f)`` with shape ``(..., 2)``."""
    return np.stack([horizontal_derivative(f, x, 1, h), horizontal_derivative(f, x, 2, h)], axis=-1)


def richardson_sub_gradient(f, x, h: float = DEFAULT_STEP) -> np.ndarray:
    """Sub-gradient from steps h and h/2 combined to cancel the O(h^2) term."""
    coarse = fd_sub_gradient(f, x, h)
    fine = fd_sub_gradient(f, x, h / 2)
    return (4.0 * fine - coarse) / 3.0


def sub_gradient(f, x, h: float = DEFAULT_STEP):
    """``(X1 f, X2 f)`` at ``x``; uses the analytic gradient when ``f`` carries one."""
    x = _as_points(x)
    if isinstance(f, Observable) and f.grad is not None:
        g = np.asarray(f.grad(x), dtype=float)
    else:
        g = fd_sub_gradient(f, x, h)
    if g.ndim == 1:
        return HorizontalVector(float(g[0]), float(g[1]))
    return g


def sub_laplacian(f, x, h: float = DEFAULT_STEP):
    """Second-order central difference for ``(X1^2 + X2^2) f(x)``."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = _as_points(x)
    centre = _checked(f(x))
    total = np.zeros_like(centre)
    for k in (1, 2):
        plus = _checked(f(_mul(x, horizontal_step(k, h))))
        minus = _checked(f(_mul(x, horizontal_step(k, -h))))
        total = total + (plus - 2.0 * centre + minus) / (h * h)
    return total if total.ndim else float(total)


def left_translate(f, g) -> Callable[[np.ndarray], np.ndarray]:
    """``f o L_g``: the function ``x -> f(g . x)``."""
    g = np.asarray(g, dtype=float)
    return lambda x: f(_mul(g, x))
