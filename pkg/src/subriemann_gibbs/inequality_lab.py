"""Entropy/energy functionals and Monte Carlo checks of functional inequalities.

Estimators work on two kinds of samples:

* single-site samples, an array of shape ``(n, 3)``, paired with an
  :class:`~subriemann_gibbs.heisenberg.Observable`;
* lattice samples, an array of shape ``(n, n_sites, 3)``, paired with a
  :class:`TrialFunction` that knows its localisation and per-site gradients.

All error bars come from batch means or a block jackknife over contiguous
sample blocks, so samplers must emit chain-major output.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np

from .heisenberg import Observable, _as_points, _mul, horizontal_step, mul, sub_gradient
from .stats import N_BATCHES, batch_means, jackknife

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


class DegenerateEstimateError(ValueError):
    """Raised for trial functions on which an estimator is 0/0."""


class EstimatorBugError(RuntimeError):
    """An estimate violated a sign constraint by more than 3 standard errors."""


def verdict(margin: float, se: float) -> str:
    """pass if ``margin > 3 se``, fail if ``margin < -3 se``, else inconclusive."""
    if abs(margin) <= 3.0 * se:
        return INCONCLUSIVE
    return PASS if margin > 0 else FAIL


@dataclass
class EstimateReport:
    name: str
    value: float
    se: float
    n: int
    seed: int
    params: Dict[str, object] = field(default_factory=dict)
    verdict: str = INCONCLUSIVE
    table: List[Dict[str, object]] = field(default_factory=list)

    def as_record(self) -> Dict[str, object]:
        return {
            "estimator": self.name,
            "value": self.value,
            "se": self.se,
            "n": self.n,
            "seed": self.seed,
            "params": self.params,
            "verdict": self.verdict,
            "table": self.table,
        }


# --------------------------------------------------------------------------
# lattice observables


@dataclass(frozen=True)
class TrialFunction:
    """Observable of a lattice configuration localised on a set of sites.

    ``func`` maps configurations ``(n, n_sites, 3)`` to ``(n,)``.
    ``site_gradient(configs, i)`` returns ``(n, 2)``; when omitted a central
    difference along the left-invariant fields at site ``i`` is used.
    """

    func: Callable[[np.ndarray], np.ndarray]
    localization: FrozenSet[int]
    site_gradient: Optional[Callable[[np.ndarray, int], np.ndarray]] = None
    name: str = "F"
    h: float = 1e-4

    def __call__(self, configs) -> np.ndarray:
        return np.asarray(self.func(np.asarray(configs, dtype=float)), dtype=float)

    def gradient(self, configs, i: int) -> np.ndarray:
        configs = np.asarray(configs, dtype=float)
        if i not in self.localization:
            return np.zeros(configs.shape[:-2] + (2,))
        if self.site_gradient is not None:
            return np.asarray(self.site_gradient(configs, i), dtype=float)
        return fd_site_gradient(self.func, configs, i, self.h)

    @staticmethod
    def lift(obs: Observable, site: int, name: Optional[str] = None) -> "TrialFunction":
        """``F(config) = obs(x_site)``."""
        def func(c, site=site):
            return obs(c[..., site, :])

        def grad(c, i, site=site):
            return np.asarray(sub_gradient(obs, c[..., site, :]), dtype=float)

        return TrialFunction(func, frozenset({site}), grad, name or f"{obs.name}@{site}")

    def __mul__(self, other: "TrialFunction") -> "TrialFunction":
        a, b = self, other

        def func(c):
            return a(c) * b(c)

        def grad(c, i):
            return a.gradient(c, i) * b(c)[..., None] + b.gradient(c, i) * a(c)[..., None]

        return TrialFunction(func, a.localization | b.localization, grad, f"{a.name}*{b.name}")

    def __add__(self, other: "TrialFunction") -> "TrialFunction":
        a, b = self, other
        return TrialFunction(
            lambda c: a(c) + b(c),
            a.localization | b.localization,
            lambda c, i: a.gradient(c, i) + b.gradient(c, i),
            f"{a.name}+{b.name}",
        )


def fd_site_gradient(func, configs: np.ndarray, i: int, h: float = 1e-4) -> np.ndarray:
    out = np.empty(configs.shape[:-2] + (2,))
    for k in (1, 2):
        vals = []
        for sgn in (1.0, -1.0):
            c = configs.copy()
            c[..., i, :] = mul(configs[..., i, :], horizontal_step(k, sgn * h))
            vals.append(np.asarray(func(c), dtype=float))
        out[..., k - 1] = (vals[0] - vals[1]) / (2.0 * h)
    return out


# --------------------------------------------------------------------------
# functionals


def _values(samples, f) -> np.ndarray:
    vals = np.asarray(f(samples), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError(f"trial function {getattr(f, 'name', f)} returned non-finite values")
    return vals


def gradient_power(samples, f, q: float) -> np.ndarray:
    """Per-sample ``sum_i |grad_i f|^q`` (a single term for single-site samples)."""
    if isinstance(f, TrialFunction):
        total = np.zeros(samples.shape[0])
        for i in sorted(f.localization):
            g = f.gradient(samples, i)
            total += np.hypot(g[..., 0], g[..., 1]) ** q
        return total
    g = np.asarray(sub_gradient(f, samples), dtype=float).reshape(-1, 2)
    return np.hypot(g[:, 0], g[:, 1]) ** q


def _ent(g: np.ndarray) -> float:
    m = g.mean()
    if m <= 0:
        return 0.0
    r = g / m
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(r > 0, r * np.log(r), 0.0)
    return float(m * t.mean())


def entropy_of(g: np.ndarray, n_batches: int = N_BATCHES):
    """Ent(g) = E[g log g] - E[g] log E[g] for nonnegative per-sample values."""
    g = np.asarray(g, dtype=float)
    if np.all(g == 0):
        raise DegenerateEstimateError("entropy of the zero function")
    val, se = jackknife(_ent, [g], n_batches)
    if val < 0:
        if val < -3.0 * se:
            raise EstimatorBugError(f"entropy estimate {val:.3e} below -3 SE ({se:.3e})")
        val = 0.0
    return val, se


def entropy(samples, f, q: float, n_batches: int = N_BATCHES):
    """``mu(|f|^q log(|f|^q / mu|f|^q))`` with a block-jackknife SE."""
    _check_q(q)
    return entropy_of(np.abs(_values(samples, f)) ** q, n_batches)


def energy(samples, f, q: float, n_batches: int = N_BATCHES):
    """``mu(sum_i |grad_i f|^q)`` with a batch-means SE."""
    _check_q(q)
    return batch_means(gradient_power(samples, f, q), n_batches)


def q_variance(samples, f, q: float, n_batches: int = N_BATCHES):
    """``mu|f - mu f|^q`` with a block-jackknife SE."""
    v = _values(samples, f)
    return jackknife(lambda a: float(np.mean(np.abs(a - a.mean()) ** q)), [v], n_batches)


def _check_q(q):
    if not (1.0 < q <= 2.0):
        raise ValueError("q must lie in (1, 2]")


def ratio_table(samples, family: Sequence, q: float, kind: str = "lsq", n_batches: int = N_BATCHES):
    """Per-function ``Ent/Energy`` (``kind='lsq'``) or ``q-Var/Energy`` (``'sg'``) with SEs.

    Functions whose energy vanishes or whose numerator is identically zero
    are skipped with a warning.
    """
    _check_q(q)
    rows = []
    for f in family:
        v = _values(samples, f)
        e = gradient_power(samples, f, q)
        name = getattr(f, "name", repr(f))
        if np.max(e) <= 1e-14 or np.ptp(v) <= 1e-14 * max(1.0, np.max(np.abs(v))):
            warnings.warn(f"trial function {name} is degenerate (0/0); excluded", RuntimeWarning)
            continue
        if kind == "lsq":
            num = lambda a: _ent(np.abs(a) ** q)
        elif kind == "sg":
            num = lambda a: float(np.mean(np.abs(a - a.mean()) ** q))
        else:
            raise ValueError(f"unknown ratio kind {kind!r}")
        ratio, se = jackknife(lambda a, b: num(a) / b.mean(), [v, e], n_batches)
        n_val, n_se = jackknife(num, [v], n_batches)
        if kind == "lsq" and n_val < -3.0 * n_se:
            raise EstimatorBugError(f"negative entropy for {name}: {n_val:.3e} +- {n_se:.3e}")
        rows.append({"name": name, "numerator": n_val, "numerator_se": n_se, "energy": float(e.mean()), "ratio": ratio, "se": se})
    return rows


def scan_max(rows) -> tuple:
    if not rows:
        raise DegenerateEstimateError("no admissible trial functions in the family")
    best = max(rows, key=lambda r: r["ratio"])
    return best["ratio"], best["se"]


def lsq_ratio_scan(sampler, family: Sequence, q: float, n: int, seed: int = 0) -> EstimateReport:
    """Largest ``Ent(|f|^q) / mu(sum_i |grad_i f|^q)`` over ``family``.

    ``sampler(n, seed)`` returns samples; all functions share them.
    """
    family = list(family)
    if not family:
        raise DegenerateEstimateError("empty trial family")
    samples = sampler(n, seed)
    rows = ratio_table(samples, family, q, "lsq")
    c_hat, se = scan_max(rows)
    return EstimateReport("lsq_ratio_scan", c_hat, se, len(samples), seed, {"q": q}, PASS, rows)


# --------------------------------------------------------------------------
# concentration


def gradient_sup(samples, f, q: float) -> float:
    """Largest ``sum_i |grad_i f|^q`` seen on ``samples`` (probe certificate)."""
    return float(np.max(gradient_power(samples, f, q)))


def exp_moment_check(samples, f, lambdas: Iterable[float], C: float, q: float, grad_bound: Optional[float] = None,
                     n_batches: int = N_BATCHES) -> EstimateReport:
    """Compare ``log mu(e^{lambda f})`` with ``lambda mu f + C lambda^q / (q^q (q-1))``.

    The precondition ``|grad f|^q <= 1`` is certified from ``grad_bound`` when
    an analytic bound is known, otherwise by probing the samples.  Equality is
    admitted: the bound for ``(1 - delta) f`` is continuous as ``delta -> 0``.
    """
    _check_q(q)
    sup = gradient_sup(samples, f, q) if grad_bound is None else grad_bound
    if not sup <= 1.0:
        raise ValueError(f"gradient certificate failed: sup |grad f|^q = {sup:.4f} > 1")
    v = _values(samples, f)
    rows = []
    worst = math.inf
    worst_se = 0.0
    for lam in lambdas:
        if lam <= 0:
            raise ValueError("lambda grid must be positive")

        def gap(a, lam=lam):
            m = a.mean()
            shifted = lam * (a - m)
            top = shifted.max()
            log_mgf = lam * m + top + math.log(np.mean(np.exp(shifted - top)))
            bound = lam * m + C * lam ** q / (q ** q * (q - 1.0))
            return bound - log_mgf

        margin, se = jackknife(gap, [v], n_batches)
        rows.append({"lambda": lam, "margin": margin, "se": se, "verdict": verdict(margin, se) if margin <= 3 * se else PASS})
        if margin < worst:
            worst, worst_se = margin, se
    status = FAIL if any(r["margin"] < -3.0 * r["se"] for r in rows) else PASS
    return EstimateReport("exp_moment_check", worst, worst_se, len(v), -1, {"C": C, "q": q, "grad_sup": sup}, status, rows)


def tail_envelope(h, C: float, p: float, q: float):
    h = np.asarray(h, dtype=float)
    return 2.0 * np.exp(-((q - 1.0) ** p) * h ** p / C ** (p - 1.0))


def tail_decay_check(samples, f, h_grid: Iterable[float], C: float, p: float, q: float,
                     min_hits: int = 10, n_batches: int = N_BATCHES) -> EstimateReport:
    """Empirical ``mu{|f - mu f| >= h}`` against ``2 exp(-(q-1)^p h^p / C^(p-1))``.

    Grid points with fewer than ``min_hits`` exceedances are inconclusive.
    """
    v = _values(samples, f)
    centred = np.abs(v - v.mean())
    rows = []
    status = PASS
    worst = math.inf
    worst_se = 0.0
    for h in h_grid:
        hits = centred >= h
        freq, se = batch_means(hits.astype(float), n_batches)
        env = float(tail_envelope(h, C, p, q))
        margin = env - freq
        if hits.sum() < min_hits and freq < env:
            row_v = INCONCLUSIVE
        elif margin < -3.0 * se:
            row_v = FAIL
        else:
            row_v = PASS
        rows.append({"h": h, "empirical": freq, "se": se, "envelope": env, "verdict": row_v})
        if row_v == FAIL:
            status = FAIL
        if margin < worst:
            worst, worst_se = margin, se
    if status != FAIL and all(r["verdict"] == INCONCLUSIVE for r in rows):
        status = INCONCLUSIVE
    return EstimateReport("tail_decay_check", worst, worst_se, len(v), -1, {"C": C, "p": p, "q": q}, status, rows)


# --------------------------------------------------------------------------
# classical Sobolev inequality for Lebesgue measure


def bump(center=(0.0, 0.0, 0.0), radius: float = 1.0, scale: float = 1.0) -> Observable:
    """Smooth bump ``exp(1 - 1/(1 - (d(c^{-1}x)/R)^2))`` supported in a CC ball.

    Composition with the dilation ``delta_{1/scale}`` is folded into ``radius``.
    """
    from .cc_distance import distance

    c = np.asarray(center, dtype=float)
    R = radius * scale

    def func(x):
        x = _as_points(x)
        y = _mul(-c, x)
        s = np.asarray(distance(y)) / R
        with np.errstate(divide="ignore", over="ignore"):
            out = np.where(s < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - s * s, 1e-300)), 0.0)
        return out

    return Observable(func, None, f"bump(c={tuple(c)},R={R:g})")


def _polar_nodes(R: float, n: int):
    """Gauss-Legendre nodes/weights of Lebesgue measure on the CC ball of radius R."""
    from .single_site import sphere_parametrisation

    tn, tw = np.polynomial.legendre.leggauss(n)
    t = 0.5 * R * (tn + 1.0)
    wt = 0.5 * R * tw * t ** 3
    pn, pw = np.polynomial.legendre.leggauss(n)
    phi = 0.5 * math.pi * (pn + 1.0)
    wp = 0.5 * math.pi * pw
    r, z, jac = sphere_parametrisation(phi)
    vt = np.linspace(0.0, 2.0 * math.pi, 2 * n, endpoint=False)
    wv = np.full(vt.size, 2.0 * math.pi / vt.size)
    T, P, V, S = np.meshgrid(np.arange(n), np.arange(n), np.arange(vt.size), [1.0, -1.0], indexing="ij")
    x = np.stack(
        [t[T] * r[P] * np.cos(vt[V]), t[T] * r[P] * np.sin(vt[V]), S * t[T] ** 2 * z[P]], axis=-1
    ).reshape(-1, 3)
    w = (wt[T] * wp[P] * jac[P] * wv[V]).reshape(-1)
    return x, w


def sobolev_sides(f: Observable, R: float, t: float = 1.0, n: int = 48, h: float = 1e-5):
    """``((int |f|^{1+t})^{1/(1+t)}, int |grad f|, int |f|)`` over the ball of radius R.

    ``f`` must vanish outside the ball; a nonzero value on its boundary
    shell signals that the domain is too small.
    """
    x, w = _polar_nodes(R, n)
    v = np.asarray(f(x), dtype=float)
    from .cc_distance import distance

    near = np.asarray(distance(x)) > 0.98 * R
    if np.any(np.abs(v[near]) > 1e-12):
        raise ValueError("quadrature domain too small for the trial function")
    g = np.asarray(sub_gradient(f.without_gradient(), x, h), dtype=float)
    lhs = np.sum(w * np.abs(v) ** (1.0 + t)) ** (1.0 / (1.0 + t))
    return float(lhs), float(np.sum(w * np.hypot(g[:, 0], g[:, 1]))), float(np.sum(w * np.abs(v)))


def classical_sobolev_probe(f_family: Sequence[Observable], R: float, t: float = 1.0, n: int = 48,
                            grid: Optional[np.ndarray] = None) -> EstimateReport:
    """Smallest ``(a, b)`` on a log grid with ``||f||_{1+t} <= a ||grad f||_1 + b ||f||_1`` on the family.

    The objective is ``a + b``; the report value is the fitted ``a + b``.
    """
    rows = []
    for f in f_family:
        lhs, grad_l1, l1 = sobolev_sides(f, R, t, n)
        rows.append({"name": f.name, "lhs": lhs, "grad_l1": grad_l1, "l1": l1})
    grid = np.concatenate([[0.0], np.geomspace(1e-4, 1e4, 161)]) if grid is None else grid
    A, B = np.meshgrid(grid, grid, indexing="ij")
    ok = np.ones(A.shape, dtype=bool)
    for r in rows:
        ok &= r["lhs"] <= A * r["grad_l1"] + B * r["l1"] + 1e-15
    if not ok.any():
        return EstimateReport("classical_sobolev_probe", math.inf, 0.0, len(rows), -1, {"t": t}, FAIL, rows)
    cost = np.where(ok, A + B, np.inf)
    k = np.unravel_index(np.argmin(cost), cost.shape)
    a, b = float(A[k]), float(B[k])
    return EstimateReport("classical_sobolev_probe", a + b, 0.0, len(rows), -1, {"t": t, "a": a, "b": b}, PASS, rows)
