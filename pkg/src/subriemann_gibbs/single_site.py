"""One-site conditional measures, their samplers and integration oracles.

The full conditional at a site with neighbour values ``omega_j`` has density
proportional to ``exp(-U)`` with

    U(x) = alpha d(x)^p + eps sum_j (d(x) + rho d(omega_j))^2 + theta sum_j phi(x, omega_j)

and the reduced potential keeps only the part that matters for the U-bound,

    U~(x) = alpha d^p + 2 N eps d^2 + 2 eps rho d S,     S = sum_j d(omega_j).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import radial
from .cc_distance import distance, gradient as d_gradient
from .heisenberg import Observable, _as_points, dilate, mul
from .inequality_lab import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    EstimateReport,
    _ent,
    gradient_power,
    ratio_table,
    scan_max,
)
from .stats import N_BATCHES, batch_means, jackknife


class SamplerError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


class BoxTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class PotentialSpec:
    alpha: float
    p: float = 2.0
    epsilon: float = 0.0
    rho: float = 0.0
    theta: float = 0.0
    N: int = 1
    M: float = 0.0
    q: float = field(init=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.p >= 2:
            raise ValueError("p must be at least 2")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if self.M < 0:
            raise ValueError("M must be nonnegative")
        if self.epsilon != 0 and not self.epsilon * self.rho > 0:
            raise ValueError("epsilon * rho must be positive when epsilon != 0")
        if self.p == 2 and not self.epsilon > -self.alpha / (2 * self.N):
            raise ValueError("p = 2 requires epsilon > -alpha / (2N)")
        object.__setattr__(self, "q", self.p / (self.p - 1.0))

    def radial(self, t, dn):
        """Radial part ``alpha t^p + eps sum_j (t + rho d_j)^2``; ``dn`` broadcasts against ``t[..., None]``."""
        t = np.asarray(t, dtype=float)
        out = self.alpha * t ** self.p
        if self.epsilon != 0:
            out = out + self.epsilon * np.sum((t[..., None] + self.rho * dn) ** 2, axis=-1)
        return out


@dataclass(frozen=True)
class BoundarySummary:
    S: float
    neighbors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.S < 0:
            raise ValueError("S must be nonnegative")
        if self.neighbors is not None:
            nb = _as_points(self.neighbors).reshape(-1, 3)
            object.__setattr__(self, "neighbors", nb)
            total = float(np.sum(distance(nb))) if nb.size else 0.0
            if abs(total - self.S) > 1e-9 * max(1.0, self.S):
                raise ValueError(f"S = {self.S} does not match the neighbour distances ({total})")

    @classmethod
    def from_neighbors(cls, neighbors) -> "BoundarySummary":
        nb = _as_points(neighbors).reshape(-1, 3)
        return cls(float(np.sum(distance(nb))) if nb.size else 0.0, nb)

    @classmethod
    def constant(cls, S: float, N: int) -> "BoundarySummary":
        """``2N`` neighbours on the x1 axis sharing the total distance ``S``."""
        nb = np.zeros((2 * N, 3))
        nb[:, 0] = S / (2 * N)
        return cls(float(np.sum(nb[:, 0])), nb)

    def neighbor_distances(self, N: int) -> np.ndarray:
        if self.neighbors is None:
            nb = np.full(2 * N, self.S / (2 * N))
            return nb
        if self.neighbors.shape[0] > 2 * N:
            raise ValueError("more than 2N neighbours")
        return np.asarray(distance(self.neighbors)).reshape(-1)


@dataclass(frozen=True)
class BoundedInteraction:
    """Range-one interaction ``phi(x, y)`` with ``|phi| <= M``."""

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    M: float
    name: str = "phi"

    def __call__(self, x, y):
        return self.func(np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def check(self, probes_x, probes_y):
        v = np.asarray(self(probes_x, probes_y))
        if np.max(np.abs(v)) > self.M * (1 + 1e-12):
            raise ContractViolation(f"|{self.name}| exceeds M = {self.M}: found {np.max(np.abs(v)):.4g}")


def cosine_interaction(M: float = 1.0) -> BoundedInteraction:
    """``phi(x, y) = M cos(x1 - y1)``, smooth with bounded mixed derivatives."""
    return BoundedInteraction(lambda x, y: M * np.cos(x[..., 0] - y[..., 0]), M, "M cos(x1 - y1)")


def constant_interaction(M: float = 1.0) -> BoundedInteraction:
    return BoundedInteraction(lambda x, y: M * np.ones(np.broadcast_shapes(x.shape, y.shape)[:-1]), M, "M")


def _resolve_phi(spec: PotentialSpec, phi: Optional[BoundedInteraction]) -> Optional[BoundedInteraction]:
    if spec.theta == 0:
        return None
    if phi is None:
        phi = cosine_interaction(spec.M)
    if phi.M > spec.M:
        raise ContractViolation(f"interaction bound {phi.M} exceeds spec.M = {spec.M}")
    return phi


# --------------------------------------------------------------------------
# potentials


def reduced_potential(spec: PotentialSpec, x, b: BoundarySummary):
    """``alpha d^p + 2 N eps d^2 + 2 eps rho d S``."""
    d = np.asarray(distance(x))
    out = spec.alpha * d ** spec.p + 2 * spec.N * spec.epsilon * d * d + 2 * spec.epsilon * spec.rho * d * b.S
    return out if np.ndim(out) else float(out)


def _neighbors(b) -> np.ndarray:
    return b.neighbors if isinstance(b, BoundarySummary) else _as_points(b)


def full_potential(spec: PotentialSpec, x, b, phi: Optional[BoundedInteraction] = None):
    """Full conditional potential at ``x`` given the neighbours in ``b``.

    ``b`` is a :class:`BoundarySummary` or an array of neighbour values of
    shape ``(k, 3)`` or, for per-chain neighbours, ``(..., k, 3)`` matching
    the leading shape of ``x``.
    """
    x = _as_points(x)
    nb = _neighbors(b)
    if nb is None:
        raise ValueError("full_potential needs the neighbour values")
    if nb.shape[-2] > 2 * spec.N:
        raise ValueError("more than 2N neighbours")
    d = np.asarray(distance(x))
    dn = np.asarray(distance(nb)) if nb.shape[-2] else np.zeros(nb.shape[:-1])
    out = spec.radial(d, dn)
    phi = _resolve_phi(spec, phi)
    if phi is not None and nb.shape[-2]:
        vals = np.asarray(phi(x[..., None, :], nb))
        if np.any(np.abs(vals) > phi.M * (1 + 1e-12)):
            raise ContractViolation(f"|{phi.name}| exceeds M on the evaluated points")
        out = out + spec.theta * vals.sum(axis=-1)
    return out if np.ndim(out) else float(out)


# --------------------------------------------------------------------------
# samplers


@dataclass
class SampleBatch:
    points: np.ndarray
    seed: int
    n_burnin: int
    n_kept: int
    acceptance_rate: float
    sigma: float = float("nan")
    n_chains: int = 1
    flagged: bool = False

    def __len__(self):
        return self.points.shape[0]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2 ** 64 - 1), *key]))


def metropolis(potential: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, n_keep: int, n_burnin: int,
               thin: int, rng: np.random.Generator, sigma0: float = 1.0, target: float = 0.4, window: int = 50):
    """Ensemble of independent random-walk chains with left-invariant proposals.

    Each chain moves ``x -> x . (s xi1, s xi2, s^2 xi3)``.  The increment law is
    symmetric under inversion and Lebesgue measure is bi-invariant, so the
    acceptance ratio is ``exp(U(x) - U(x'))``.  The shared scale ``s`` is
    tuned during burn-in towards the target acceptance and then frozen.

    Returns ``(samples (chains, n_keep, 3), acceptance_rate, sigma)``.
    """
    x = np.array(x0, dtype=float)
    c = x.shape[0]
    u = np.asarray(potential(x), dtype=float)
    if not np.all(np.isfinite(u)):
        raise SamplerError("potential is not finite at the initial states")
    sigma = float(sigma0)
    scale = np.array([1.0, 1.0, 1.0])
    acc_window = 0
    bad = 0
    n_steps = n_burnin + n_keep * thin
    out = np.empty((c, n_keep, 3))
    accepted = 0
    for step in range(n_steps):
        xi = rng.standard_normal((c, 3))
        g = xi * np.array([sigma, sigma, sigma * sigma])
        y = mul(x, g)
        uy = np.asarray(potential(y), dtype=float)
        finite = np.isfinite(uy)
        bad += c - int(finite.sum())
        logu = np.log(rng.uniform(size=c))
        with np.errstate(invalid="ignore", over="ignore"):
            acc = finite & (logu < u - uy)
        x[acc] = y[acc]
        u[acc] = uy[acc]
        if step < n_burnin:
            acc_window += int(acc.sum())
            if (step + 1) % window == 0:
                rate = acc_window / (window * c)
                sigma *= math.exp(2.0 * (rate - target))
                acc_window = 0
        else:
            accepted += int(acc.sum())
            k = step - n_burnin
            if (k + 1) % thin == 0:
                out[:, k // thin] = x
    if bad > 0.5 * c * n_steps:
        raise SamplerError("potential was non-finite on most proposals")
    rate = accepted / (c * n_keep * thin) if n_keep else float("nan")
    return out, rate, sigma


def typical_radius(spec: PotentialSpec, dn) -> float:
    """Mode of the radial density ``t^3 exp(-U(t))`` for the given neighbour distances."""
    t = np.geomspace(1e-6, 1e6, 601)
    logf = 3 * np.log(t) - spec.radial(t, np.asarray(dn, dtype=float))
    return float(t[np.argmax(logf)])


def sample_site(spec: PotentialSpec, b: BoundarySummary, phi: Optional[BoundedInteraction] = None, n: int = 50_000,
                seed: int = 0, n_burnin: int = 5_000, thin: int = 5, n_chains: int = 250) -> SampleBatch:
    """Metropolis sampler for ``exp(-full_potential)`` w.r.t. Lebesgue (Haar) measure.

    Output is chain-major: the first ``n_kept / n_chains`` rows belong to
    chain 0 and so on, which is the layout the batch-means error bars expect.
    """
    rng = _rng(seed, 0)
    nb = b.neighbors if b.neighbors is not None else BoundarySummary.constant(b.S, spec.N).neighbors
    dn = np.asarray(distance(nb)).reshape(-1) if nb.size else np.zeros(0)
    t0 = typical_radius(spec, dn)
    per_chain = max(1, -(-n // n_chains))
    x0 = radial.sphere_directions(n_chains, rng) * np.array([t0, t0, t0 * t0])
    pot = lambda x: full_potential(spec, x, nb, phi)
    chains, rate, sigma = metropolis(pot, x0, per_chain, n_burnin, thin, rng, sigma0=0.5 * t0)
    pts = chains.reshape(-1, 3)
    flagged = not (0.1 <= rate <= 0.9)
    if flagged:
        warnings.warn(f"acceptance rate {rate:.3f} outside [0.1, 0.9]", RuntimeWarning)
    return SampleBatch(pts, seed, n_burnin, pts.shape[0], rate, sigma, n_chains, flagged)


def radial_table(spec: PotentialSpec, S, n_neighbors: int) -> np.ndarray:
    """Radial parameters of ``alpha t^p + eps sum_j (t + rho d_j)^2`` given ``S = sum_j d_j``."""
    S = np.atleast_1d(np.asarray(S, dtype=float))
    return radial.radial_params(spec.alpha, spec.p, spec.epsilon * n_neighbors, 2 * spec.epsilon * spec.rho * S,
                                n=S.size)


def sample_exact(spec: PotentialSpec, neighbors, rng: np.random.Generator,
                 phi: Optional[BoundedInteraction] = None, max_rounds: int = 10_000) -> np.ndarray:
    """Independent exact draws, one per row of ``neighbors`` (shape ``(rows, k, 3)``).

    The radius is drawn from its one-dimensional law and the direction from
    the cone measure; a bounded ``theta`` term is handled by rejection with
    acceptance ``exp(-theta sum phi - k |theta| M)``.
    """
    nb = np.asarray(neighbors, dtype=float)
    rows, k = nb.shape[0], nb.shape[1]
    dn = np.asarray(distance(nb)).reshape(rows, k) if k else np.zeros((rows, 0))
    par = radial_table(spec, dn.sum(axis=1), k)
    phi = _resolve_phi(spec, phi)

    def draw(idx):
        t = radial.sample_radius_fast(par[idx], rng=rng)
        return dilate(np.maximum(t, 1e-300), radial.sphere_directions(idx.size, rng))

    if phi is None or k == 0:
        return draw(np.arange(rows))
    out = np.empty((rows, 3))
    todo = np.arange(rows)
    for _ in range(max_rounds):
        cand = draw(todo)
        vals = np.asarray(phi(cand[:, None, :], nb[todo])).sum(axis=-1)
        logacc = -(spec.theta * vals + k * abs(spec.theta) * phi.M)
        ok = np.log(rng.uniform(size=todo.size)) < logacc
        out[todo[ok]] = cand[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return out
    raise SamplerError("rejection sampler for the bounded interaction did not terminate")


def sample_reduced(spec: PotentialSpec, S: float, n: int, seed: int = 0) -> np.ndarray:
    """Independent draws from ``exp(-U~)`` (the reduced single-site measure)."""
    rng = _rng(seed, 1)
    par = np.repeat(radial_table(spec, S, 2 * spec.N), n, axis=0)
    t = radial.sample_radius_fast(par, rng=rng)
    return dilate(np.maximum(t, 1e-300), radial.sphere_directions(n, rng))


# --------------------------------------------------------------------------
# quadrature oracle


def sphere_parametrisation(phi):
    """Unit CC sphere ``(r cos v, r sin v, +-z)`` by the half-turn ``phi`` in ``[0, pi]``.

    Returns ``(r, z, J)`` with ``dx = t^3 J(phi) dt dphi dv`` for
    ``x = delta_t(sigma(phi, v, +-))``.
    """
    phi = np.asarray(phi, dtype=float)
    s, c = np.sin(phi), np.cos(phi)
    small = phi < 1e-3
    ph = np.where(small, 1.0, phi)
    r = np.where(small, 1.0 - phi ** 2 / 6.0, s / ph)
    num = ph - s * c
    z = np.where(small, phi / 6.0, num / (4.0 * ph * ph))
    dr = np.where(small, -phi / 3.0, (ph * c - s) / (ph * ph))
    dz = np.where(small, 1.0 / 6.0, (ph * s * s - num) / (2.0 * ph ** 3))
    jac = r * np.abs(r * dz - 2.0 * z * dr)
    return r, z, jac


@dataclass
class QuadratureResult:
    Z: float
    moments: Dict[str, float]
    expectations: Dict[str, float]
    t_max: float
    tail_change: float


def _polar_integrate(U, p, observables, t_max, n_t, n_phi, n_v):
    tn, tw = np.polynomial.legendre.leggauss(n_t)
    t = 0.5 * t_max * (tn + 1.0)
    wt = 0.5 * t_max * tw * t ** 3
    pn, pw = np.polynomial.legendre.leggauss(n_phi)
    ph = 0.5 * math.pi * (pn + 1.0)
    wp = 0.5 * math.pi * pw
    r, z, jac = sphere_parametrisation(ph)
    v = np.linspace(0.0, 2.0 * math.pi, n_v, endpoint=False)
    wv = 2.0 * math.pi / n_v
    Z = 0.0
    sums = np.zeros(len(observables) + 3)
    for sgn in (1.0, -1.0):
        T, P, V = np.meshgrid(t, np.arange(n_phi), v, indexing="ij")
        x = np.stack([T * r[P] * np.cos(V), T * r[P] * np.sin(V), sgn * T * T * z[P]], axis=-1).reshape(-1, 3)
        w = (wt[:, None, None] * (wp * jac)[None, :, None] * wv * np.ones_like(V)).reshape(-1)
        u = np.asarray(U(x), dtype=float)
        dens = w * np.exp(-u)
        Z += dens.sum()
        dist = T.reshape(-1)
        vals = [dist, dist ** 2, None] + [np.asarray(f(x), dtype=float) for f in observables]
        for i, val in enumerate(vals):
            if val is not None:
                sums[i] += np.sum(dens * val)
        sums[2] += np.sum(dens * dist ** p)
    return Z, sums / Z


def partition_quadrature(spec: PotentialSpec, b: BoundarySummary, phi: Optional[BoundedInteraction] = None,
                         box: Optional[float] = None, n_cells: int = 64, observables: Sequence[Observable] = (),
                         reduced: bool = False, tail_tol: float = 1e-6) -> QuadratureResult:
    """Tensor Gauss quadrature of ``exp(-U)`` in homogeneous polar coordinates.

    ``box`` is the radial cutoff ``t_max`` (CC radius of the integration
    ball); by default it is where the radial log-density has fallen 40 below
    its peak (plus the worst case of the bounded term).  The result is
    recomputed on a ball of twice the radius with twice the radial nodes and
    the relative change of ``Z`` must be below ``tail_tol``.
    """
    nb = b.neighbors if b.neighbors is not None else BoundarySummary.constant(b.S, spec.N).neighbors
    dn = np.asarray(distance(nb)).reshape(-1) if nb.size else np.zeros(0)
    if reduced:
        pot = lambda x: reduced_potential(spec, x, b)
        g_rad = lambda t: spec.alpha * t ** spec.p + 2 * spec.N * spec.epsilon * t * t + 2 * spec.epsilon * spec.rho * b.S * t
        slack = 0.0
    else:
        phi_r = _resolve_phi(spec, phi)
        pot = lambda x: full_potential(spec, x, nb, phi_r)
        g_rad = lambda t: spec.radial(t, dn)
        slack = 2.0 * len(dn) * abs(spec.theta) * (phi_r.M if phi_r is not None else 0.0)
    if box is None:
        t = np.geomspace(1e-6, 1e6, 1201)
        logf = 3 * np.log(t) - g_rad(t)
        top = int(np.argmax(logf))
        beyond = np.nonzero(logf[top:] < logf[top] - 40.0 - slack)[0]
        if beyond.size == 0:
            raise BoxTooSmallError("integrand does not decay within the scan range")
        box = float(t[top + beyond[0]])
    n_v = n_cells if (not reduced and spec.theta != 0) or observables else 8
    Z1, m1 = _polar_integrate(pot, spec.p, observables, box, n_cells, n_cells, n_v)
    Z2, _ = _polar_integrate(pot, spec.p, (), 2.0 * box, 2 * n_cells, n_cells, n_v)
    change = abs(Z2 - Z1) / abs(Z2)
    if not change < tail_tol:
        raise BoxTooSmallError(f"tail check failed: doubling the ball changed Z by {change:.2e}")
    moments = {"d^1": float(m1[0]), "d^2": float(m1[1]), "d^p": float(m1[2])}
    exps = {f.name: float(m1[3 + i]) for i, f in enumerate(observables)}
    return QuadratureResult(float(Z1), moments, exps, box, float(change))


def partition_importance(spec: PotentialSpec, b: BoundarySummary, phi: Optional[BoundedInteraction] = None,
                         n: int = 400_000, seed: int = 0, df: float = 4.0):
    """Importance-sampling estimate of ``Z`` with a Cartesian Student-t proposal.

    Independent of the polar quadrature: it never uses the sphere
    parametrisation.  Returns ``(Z, se)``.
    """
    from scipy import stats as st

    rng = _rng(seed, 2)
    nb = b.neighbors if b.neighbors is not None else BoundarySummary.constant(b.S, spec.N).neighbors
    dn = np.asarray(distance(nb)).reshape(-1) if nb.size else np.zeros(0)
    s = typical_radius(spec, dn)
    scales = np.array([s, s, 0.5 * s * s])
    prop = st.t(df)
    x = prop.rvs(size=(n, 3), random_state=rng) * scales
    logq = np.sum(prop.logpdf(x / scales), axis=1) - np.sum(np.log(scales))
    u = np.asarray(full_potential(spec, x, nb, phi))
    w = np.exp(-u - logq)
    return batch_means(w)


# --------------------------------------------------------------------------
# trial family and per-site estimators


def _d_power(k: float, name: str) -> Observable:
    def func(x):
        return np.asarray(distance(x)) ** k

    def grad(x):
        d = np.asarray(distance(x))[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            return k * d ** (k - 1) * d_gradient(x)

    return Observable(func, grad, name)


def default_trial_family(p: float = 2.0) -> List[Observable]:
    """Unbounded coordinate, radial and bounded observables with analytic gradients."""
    def rad(name, f, df):
        def func(x):
            return f(np.asarray(distance(x)))

        def grad(x):
            return df(np.asarray(distance(x)))[..., None] * d_gradient(x)

        return Observable(func, grad, name)

    zero = lambda x: np.zeros(x.shape[:-1])
    one = lambda x: np.ones(x.shape[:-1])
    return [
        Observable(lambda x: x[..., 0], lambda x: np.stack([one(x), zero(x)], -1), "x1"),
        Observable(lambda x: x[..., 1], lambda x: np.stack([zero(x), one(x)], -1), "x2"),
        Observable(lambda x: x[..., 2], lambda x: np.stack([-0.5 * x[..., 1], 0.5 * x[..., 0]], -1), "x3"),
        _d_power(1.0, "d"),
        _d_power(0.5 * p, f"d^{0.5 * p:g}"),
        Observable(lambda x: np.tanh(x[..., 0]), lambda x: np.stack([1 / np.cosh(x[..., 0]) ** 2, zero(x)], -1), "tanh(x1)"),
        rad("tanh(d-1)", lambda d: np.tanh(d - 1), lambda d: 1 / np.cosh(d - 1) ** 2),
        rad("exp(-d^2)", lambda d: np.exp(-d * d), lambda d: -2 * d * np.exp(-d * d)),
        Observable(lambda x: 1 + 0.5 * np.sin(x[..., 0]), lambda x: np.stack([0.5 * np.cos(x[..., 0]), zero(x)], -1),
                   "1+sin(x1)/2"),
    ]


def _samples_for(spec, b, n, seed, samples=None):
    if samples is not None:
        return samples
    return sample_reduced(spec, b.S, n, seed)


def ubound_terms(spec: PotentialSpec, S: float, family: Sequence[Observable], samples: np.ndarray):
    """Per-sample arrays ``(|f|^q W, |grad f|^q, |f|^q)`` with ``W = d^p + d S``."""
    q = spec.q
    d = np.asarray(distance(samples))
    W = d ** spec.p + d * S
    out = []
    for f in family:
        fq = np.abs(np.asarray(f(samples), dtype=float)) ** q
        out.append((f.name, fq * W, gradient_power(samples, f, q), fq))
    return out


def fit_ab(terms_by_S, grid: Optional[np.ndarray] = None, n_batches: int = N_BATCHES):
    """Smallest ``A + B`` on a log grid with ``L <= A R_A + B R_B + 3 SE`` for all terms.

    ``terms_by_S`` is a list of lists of ``(name, l, ra, rb)`` per-sample
    arrays.  Returns ``(A, B, worst_ratio, worst_margin_in_se)``.
    """
    grid = np.concatenate([[0.0], np.geomspace(1e-3, 1e4, 281)]) if grid is None else grid
    A, B = np.meshgrid(grid, grid, indexing="ij")
    ok = np.ones(A.shape, dtype=bool)
    flat = [t for ts in terms_by_S for t in ts]
    stats = []
    for name, l, ra, rb in flat:
        n = l.shape[0]
        blocks = np.array_split(np.arange(n), n_batches)
        bm = np.array([[l[i].mean(), ra[i].mean(), rb[i].mean()] for i in blocks])
        mean = bm.mean(axis=0)
        cov = np.cov(bm.T) / len(blocks)
        stats.append((name, mean, cov))
        margin = A * mean[1] + B * mean[2] - mean[0]
        var = (cov[0, 0] + A * A * cov[1, 1] + B * B * cov[2, 2]
               - 2 * A * cov[0, 1] - 2 * B * cov[0, 2] + 2 * A * B * cov[1, 2])
        ok &= margin >= -3.0 * np.sqrt(np.maximum(var, 0.0))
    if not ok.any():
        return math.inf, math.inf, math.inf, -math.inf
    cost = np.where(ok, A + B, np.inf)
    k = np.unravel_index(np.argmin(cost), cost.shape)
    a, b = float(A[k]), float(B[k])
    worst_ratio = 0.0
    worst_margin = math.inf
    for name, mean, cov in stats:
        rhs = a * mean[1] + b * mean[2]
        worst_ratio = max(worst_ratio, mean[0] / rhs if rhs > 0 else math.inf)
        var = cov[0, 0] + a * a * cov[1, 1] + b * b * cov[2, 2] - 2 * a * cov[0, 1] - 2 * b * cov[0, 2] + 2 * a * b * cov[1, 2]
        se = math.sqrt(max(var, 0.0))
        worst_margin = min(worst_margin, (rhs - mean[0]) / se if se > 0 else math.inf)
    return a, b, worst_ratio, worst_margin


def ubound_check(spec: PotentialSpec, boundary_grid: Iterable[float], trial_family: Sequence[Observable],
                 n: int = 50_000, seed: int = 0) -> EstimateReport:
    """Fit ``(A, B)`` per boundary sum and jointly; report stability across ``S``.

    ``value`` is the ratio of the largest to the smallest per-S ``A + B``.
    """
    grid = list(boundary_grid)
    family = list(trial_family)
    if not family:
        raise ValueError("trial_family must be nonempty")
    per_s = []
    all_terms = []
    for k, S in enumerate(grid):
        samples = sample_reduced(spec, S, n, seed + 7919 * k)
        terms = ubound_terms(spec, S, family, samples)
        all_terms.append(terms)
        a, b, ratio, margin = fit_ab([terms])
        per_s.append({"S": S, "A_hat": a, "B_hat": b, "worst_ratio": ratio, "worst_margin_se": margin})
    A, B, ratio, margin = fit_ab(all_terms)
    sizes = np.array([r["A_hat"] + r["B_hat"] for r in per_s])
    stability = float(sizes.max() / sizes.min()) if np.all(np.isfinite(sizes)) and sizes.min() > 0 else math.inf
    status = PASS if np.isfinite(A) and stability <= 2.0 else FAIL
    params = {"A_hat": A, "B_hat": B, "worst_ratio": ratio, "worst_margin_se": margin, "p": spec.p, "q": spec.q}
    return EstimateReport("ubound_check", stability, 0.0, n, seed, params, status, per_s)


def sg_estimate(spec: PotentialSpec, b: BoundarySummary, trial_family: Sequence[Observable], n: int = 50_000,
                seed: int = 0, samples: Optional[np.ndarray] = None) -> EstimateReport:
    """Largest ``E|f - Ef|^q / E|grad f|^q`` over the family under the reduced measure."""
    x = _samples_for(spec, b, n, seed, samples)
    rows = ratio_table(x, trial_family, spec.q, "sg")
    val, se = scan_max(rows)
    return EstimateReport("sg_estimate", val, se, x.shape[0], seed, {"S": b.S, "q": spec.q}, PASS, rows)


def lsq_estimate(spec: PotentialSpec, b: BoundarySummary, trial_family: Sequence[Observable], n: int = 50_000,
                 seed: int = 0, samples: Optional[np.ndarray] = None) -> EstimateReport:
    """Largest ``Ent(|f|^q) / E|grad f|^q`` over the family under the reduced measure."""
    x = _samples_for(spec, b, n, seed, samples)
    rows = ratio_table(x, trial_family, spec.q, "lsq")
    val, se = scan_max(rows)
    return EstimateReport("lsq_estimate", val, se, x.shape[0], seed, {"S": b.S, "q": spec.q}, PASS, rows)


def rothaus_check(spec: PotentialSpec, b: BoundarySummary, f: Observable, n: int = 50_000, seed: int = 0,
                  samples: Optional[np.ndarray] = None) -> EstimateReport:
    """Slack of ``Ent(|f|^q) <= Ent(|f - Ef|^q) + 2^{q+1} E|f - Ef|^q`` (+3 SE)."""
    q = spec.q
    x = _samples_for(spec, b, n, seed, samples)
    v = np.asarray(f(x), dtype=float)

    def slack(a):
        c = a - a.mean()
        return _ent(np.abs(c) ** q) + 2 ** (q + 1) * np.mean(np.abs(c) ** q) - _ent(np.abs(a) ** q)

    val, se = jackknife(slack, [v])
    status = FAIL if val < -3.0 * se else PASS
    return EstimateReport("rothaus_check", float(val), se, x.shape[0], seed, {"S": b.S, "q": q, "f": f.name}, status)
