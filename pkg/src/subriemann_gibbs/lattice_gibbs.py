"""Finite-box Gibbs measures on H^Lambda and the checkerboard sweep.

Configurations are stored as arrays of shape ``(n_rows, 3)`` (or
``(replicas, n_rows, 3)`` for ensembles) whose first ``n_interior`` rows are
the sites of the box and whose remaining rows are the boundary shell.

Both Hamiltonians share one edge list.  In quadratic mode an edge between two
interior sites carries ``eps (d_i^2 + 2 rho d_i d_j + d_j^2)`` and an edge to
the shell carries ``eps (d_i + rho d_j)^2``; this symmetric reading keeps every
single-site conditional equal to the one-site full potential.  In general
mode an edge carries ``J_ij V(x_i, x_j)`` and each site ``alpha d^p``.

Sweeps draw each conditional exactly: all conditionals are radial up to a
bounded interaction, so the radius is drawn by log-concave rejection and the
direction from the cone measure.  Random numbers are keyed by
``(seed, replica, sweep, parity)`` and sliced by site, so the result does not
depend on the order in which sites of one parity are visited.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import radial
from .cc_distance import distance, gradient as d_gradient
from .heisenberg import GroupElement, _as_points, _mul, dilate, horizontal_step, mul
from .inequality_lab import INCONCLUSIVE, PASS, FAIL, TrialFunction, gradient_power
from .single_site import (
    BoundedInteraction,
    BoundarySummary,
    PotentialSpec,
    _rng,
    _resolve_phi,
    full_potential,
    sample_exact,
    sample_site,
)
from .stats import autocorrelation_time, ks_2samp

GAMMA0, GAMMA1 = 0, 1
DIR_CANDIDATES = 16
REJECTION_TRIES = 8
FALLBACK_CANDIDATES = 16


@dataclass(frozen=True, eq=False)
class LatticeSpec:
    """Box ``{0..side-1}^N`` with its outer shell and checkerboard parity."""

    N: int
    side: int
    interior: Tuple[Tuple[int, ...], ...] = field(init=False)
    boundary_shell: Tuple[Tuple[int, ...], ...] = field(init=False)
    index: Dict[Tuple[int, ...], int] = field(init=False)
    parity: Dict[Tuple[int, ...], int] = field(init=False)
    nbr: np.ndarray = field(init=False)
    edges: np.ndarray = field(init=False)
    interior_edge: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.N not in (1, 2):
            raise ValueError("only N = 1 and N = 2 are supported")
        if self.side < 1:
            raise ValueError("side must be positive")
        inner = tuple(itertools.product(range(self.side), repeat=self.N))
        inside = set(inner)
        shell = []
        for s in inner:
            for nb in _lattice_neighbors(s):
                if nb not in inside and nb not in shell:
                    shell.append(nb)
        shell = tuple(sorted(shell))
        sites = inner + shell
        index = {s: k for k, s in enumerate(sites)}
        parity = {s: sum(abs(c) for c in s) % 2 for s in sites}
        nbr = np.array([[index[nb] for nb in _lattice_neighbors(s)] for s in inner], dtype=np.int64)
        edges = []
        for a, s in enumerate(inner):
            for nb in _lattice_neighbors(s):
                b = index[nb]
                if b >= len(inner) or b > a:
                    edges.append((a, b))
        edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
        for name, val in [("interior", inner), ("boundary_shell", shell), ("index", index), ("parity", parity),
                          ("nbr", nbr), ("edges", edges), ("interior_edge", edges[:, 1] < len(inner))]:
            object.__setattr__(self, name, val)

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    @property
    def n_rows(self) -> int:
        return len(self.interior) + len(self.boundary_shell)

    def gamma(self, c: int) -> np.ndarray:
        """Interior row indices of parity class ``c``."""
        return np.array([k for k, s in enumerate(self.interior) if self.parity[s] == c], dtype=np.int64)

    def center(self) -> int:
        return self.index[tuple([self.side // 2] * self.N)]


def _lattice_neighbors(s):
    for axis in range(len(s)):
        for step in (-1, 1):
            t = list(s)
            t[axis] += step
            yield tuple(t)


def brute_force_edges(lat: LatticeSpec) -> set:
    """Unordered nearest-neighbour pairs with at least one end in the box (reference enumerator)."""
    inside = set(lat.interior)
    pairs = set()
    for a in lat.interior:
        for b in lat.interior + lat.boundary_shell:
            if sum(abs(x - y) for x, y in zip(a, b)) == 1:
                pairs.add(frozenset((a, b)))
    assert all(any(s in inside for s in p) for p in pairs)
    return pairs


@dataclass
class Configuration:
    lat: LatticeSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.lat.n_rows, 3):
            raise ValueError(f"configuration must have shape {(self.lat.n_rows, 3)}, got {self.values.shape}")

    def __getitem__(self, site) -> GroupElement:
        return GroupElement(*map(float, self.values[self.lat.index[tuple(site)]]))

    @property
    def boundary(self) -> np.ndarray:
        return self.values[self.lat.n_interior:]

    @classmethod
    def from_boundary(cls, lat: LatticeSpec, boundary, interior=None) -> "Configuration":
        vals = np.zeros((lat.n_rows, 3))
        vals[lat.n_interior:] = boundary
        if interior is not None:
            vals[: lat.n_interior] = interior
        return cls(lat, vals)


def make_boundary(lat: LatticeSpec, mode: str = "identity", value: float = 1.0, seed: int = 0) -> np.ndarray:
    """Shell values: ``identity``, ``constant-d`` (all at distance ``value``) or ``random`` (seeded)."""
    n = len(lat.boundary_shell)
    if mode == "identity":
        return np.zeros((n, 3))
    if mode == "constant-d":
        out = np.zeros((n, 3))
        out[:, 0] = value
        return out
    if mode == "random":
        rng = _rng(seed, 11)
        sig = radial.sphere_directions(n, rng)
        t = value * rng.uniform(0.0, 2.0, size=n)
        return dilate(np.maximum(t, 1e-12), sig)
    raise ValueError(f"unknown boundary mode {mode!r}")


# --------------------------------------------------------------------------
# interactions


def smoothed_distance(x, kappa: float):
    d = np.asarray(distance(x))
    return np.sqrt(d * d + kappa * kappa)


@dataclass(frozen=True)
class InteractionSpec:
    """Edge interaction for the lattice measure.

    ``mode='quadratic'``: the distance-squared coupling of the potential spec
    plus ``theta`` times a bounded pair interaction ``phi``.
    ``mode='general'``: ``J_ij V(x_i, x_j)`` with ``V`` defaulting to
    ``d_kappa(x) d_kappa(y)``, ``d_kappa = sqrt(d^2 + kappa^2)``; ``J`` is a
    per-edge array aligned with ``LatticeSpec.edges`` or ``None`` for
    ``J_ij = J0``.
    """

    mode: str = "quadratic"
    J0: float = 0.0
    J: Optional[np.ndarray] = None
    V: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    kappa: float = 1e-3
    M: float = 1.0
    phi: Optional[BoundedInteraction] = None

    def __post_init__(self):
        if self.mode not in ("quadratic", "general"):
            raise ValueError(f"unknown interaction mode {self.mode!r}")
        if self.J0 < 0:
            raise ValueError("J0 must be nonnegative")
        if self.J is not None and np.any(np.abs(self.J) > self.J0 * (1 + 1e-12)):
            raise ValueError("|J_ij| must not exceed J0")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    def couplings(self, lat: LatticeSpec) -> np.ndarray:
        if self.J is None:
            return np.full(lat.edges.shape[0], self.J0)
        J = np.asarray(self.J, dtype=float)
        if J.shape != (lat.edges.shape[0],):
            raise ValueError("J must have one entry per edge")
        return J

    def pair(self, x, y):
        if self.V is not None:
            return np.asarray(self.V(x, y))
        return smoothed_distance(x, self.kappa) * smoothed_distance(y, self.kappa)


def mixed_gradient_norm(V: Callable, x, y, h: float = 1e-4) -> np.ndarray:
    """Operator norm of the 2x2 matrix ``X_k^(x) X_l^(y) V`` by central differences."""
    x = _as_points(x)
    y = _as_points(y)
    H = np.empty(x.shape[:-1] + (2, 2))
    for k in (1, 2):
        for l in (1, 2):
            acc = 0.0
            for sx in (1.0, -1.0):
                for sy in (1.0, -1.0):
                    acc = acc + sx * sy * np.asarray(V(_mul(x, horizontal_step(k, sx * h)), _mul(y, horizontal_step(l, sy * h))))
            H[..., k - 1, l - 1] = acc / (4 * h * h)
    return np.linalg.norm(H, ord=2, axis=(-2, -1))


def probe_h1(inter: InteractionSpec, pot: PotentialSpec, n: int = 500, seed: int = 0, scale: float = 3.0) -> float:
    """Largest probed mixed gradient of the pair interaction (off the vertical axes)."""
    rng = _rng(seed, 13)
    x = radial.sphere_directions(n, rng) * 1.0
    y = radial.sphere_directions(n, rng) * 1.0
    tx = rng.uniform(0.05, scale, n)
    ty = rng.uniform(0.05, scale, n)
    x = dilate(tx, x)
    y = dilate(ty, y)
    if inter.mode == "general":
        V = inter.pair
    else:
        V = lambda a, b: pot.epsilon * (np.asarray(distance(a)) + pot.rho * np.asarray(distance(b))) ** 2
    return float(np.max(mixed_gradient_norm(V, x, y)))


def check_h1(inter: InteractionSpec, pot: PotentialSpec, n: int = 500, seed: int = 0, tol: float = 1e-2) -> float:
    sup = probe_h1(inter, pot, n, seed)
    bound = inter.M if inter.mode == "general" else 2 * abs(pot.epsilon * pot.rho)
    if sup > bound * (1 + tol) + 1e-9:
        raise ValueError(f"(H1) probe failed: mixed gradient {sup:.4g} exceeds M = {bound:.4g}")
    return sup


# --------------------------------------------------------------------------
# energy


def _ensemble(config) -> Tuple[np.ndarray, bool]:
    if isinstance(config, Configuration):
        return config.values[None], True
    arr = np.asarray(config, dtype=float)
    if arr.ndim == 2:
        return arr[None], True
    return arr, False


def hamiltonian(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, config):
    """Energy of the box: site terms over the interior, each edge meeting the box once."""
    X, single = _ensemble(config)
    if X.shape[1:] != (lat.n_rows, 3):
        raise ValueError(f"configuration must cover all {lat.n_rows} interior and shell sites")
    d = np.asarray(distance(X))
    n_int = lat.n_interior
    a, b = lat.edges[:, 0], lat.edges[:, 1]
    total = pot.alpha * np.sum(d[:, :n_int] ** pot.p, axis=1)
    if inter.mode == "quadratic":
        da, db = d[:, a], d[:, b]
        inner = lat.interior_edge
        e = np.where(inner, da * da + 2 * pot.rho * da * db + db * db, (da + pot.rho * db) ** 2)
        total = total + pot.epsilon * e.sum(axis=1)
        phi = _resolve_phi(pot, inter.phi)
        if phi is not None:
            total = total + pot.theta * np.asarray(phi(X[:, a], X[:, b])).sum(axis=1)
    else:
        J = inter.couplings(lat)
        total = total + np.sum(J * inter.pair(X[:, a], X[:, b]), axis=1)
    return float(total[0]) if single else total


def _edge_couplings_per_site(lat: LatticeSpec, inter: InteractionSpec) -> np.ndarray:
    """``J`` for each (interior site, neighbour slot) pair, shape ``(n_interior, 2N)``."""
    J = inter.couplings(lat)
    lookup = {}
    for (a, b), j in zip(lat.edges, J):
        lookup[(a, b)] = j
        lookup[(b, a)] = j
    return np.array([[lookup[(i, int(k))] for k in lat.nbr[i]] for i in range(lat.n_interior)])


# --------------------------------------------------------------------------
# exact conditional draws


_TRY_WIDTH = 1 + 3 * radial.RADIUS_TRIES + 3 * DIR_CANDIDATES


def _block_width(pot: PotentialSpec, inter: InteractionSpec) -> int:
    tries = REJECTION_TRIES if (inter.mode == "quadratic" and pot.theta != 0) else 1
    return tries * _TRY_WIDTH


def _radial_model(lat, inter, pot, X, rows):
    """Radial parameter table for the conditionals at ``rows`` and the neighbour values."""
    nb = X[:, lat.nbr[rows]]  # (R, n, 2N, 3)
    dn = np.asarray(distance(nb))
    if inter.mode == "quadratic":
        S = dn.sum(axis=-1).reshape(-1)
        par = radial.radial_params(pot.alpha, pot.p, pot.epsilon * lat.nbr.shape[1], 2 * pot.epsilon * pot.rho * S)
    else:
        if inter.V is not None:
            raise NotImplementedError("exact conditionals need the default radial pair interaction")
        Jsite = _edge_couplings_per_site(lat, inter)[rows]  # (n, 2N)
        T = np.sum(Jsite[None] * np.sqrt(dn * dn + inter.kappa ** 2), axis=-1).reshape(-1)
        par = radial.radial_params(pot.alpha, pot.p, 0.0, 0.0, T, inter.kappa)
    if par.shape[0] == 1 and dn.size > dn.shape[-1]:
        par = np.repeat(par, dn.size // dn.shape[-1], axis=0)
    return par, nb.reshape(-1, nb.shape[-2], 3)


def _draw_rows(par, U, extra, log_accept=None):
    """Exact draws for each row of the radial table ``par`` using the uniforms in ``U``.

    Each try uses one acceptance uniform, the radius block and the direction
    candidates.  ``extra(row, k)`` supplies a keyed generator once a row has
    exhausted its block; later rejection rounds draw whole blocks from one
    persistent generator per row.
    """
    rows = par.shape[0]
    nr = 3 * radial.RADIUS_TRIES
    tries = U.shape[1] // _TRY_WIDTH
    out = np.empty((rows, 3))
    todo = np.arange(rows)
    k = 0
    fallback = {}
    while todo.size:
        if k < tries:
            idx = todo
            blk = U[todo, k * _TRY_WIDTH : (k + 1) * _TRY_WIDTH]
            radius_extra = lambda r: extra(int(todo[r]), 2 * k)
            dir_extra = lambda r: extra(int(todo[r]), 2 * k + 1)
        else:
            if k > tries + 10_000:
                raise RuntimeError("rejection sampler did not terminate")
            # several candidates per remaining row from its persistent stream
            idx = np.repeat(todo, FALLBACK_CANDIDATES)
            gens = [fallback.setdefault(int(r), extra(int(r), 2 * tries)) for r in todo]
            blk = np.concatenate([g.uniform(size=(FALLBACK_CANDIDATES, _TRY_WIDTH)) for g in gens])
            radius_extra = dir_extra = lambda c, gens=gens: gens[c // FALLBACK_CANDIDATES]
        t = radial.sample_radius_fast(par[idx], blk[:, 1 : 1 + nr], extra=radius_extra)
        sig = radial.directions_from_uniforms(blk[:, 1 + nr :], dir_extra)
        x = dilate(np.maximum(t, 1e-300), sig)
        if log_accept is None:
            out[todo] = x
            return out
        ok = np.log(blk[:, 0]) < log_accept(x, idx)
        if k >= tries:
            ok = ok.reshape(todo.size, FALLBACK_CANDIDATES)
            first = np.argmax(ok, axis=1)
            x = x.reshape(todo.size, FALLBACK_CANDIDATES, 3)[np.arange(todo.size), first]
            ok = ok.any(axis=1)
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
        k += 1
    return out


def _resample_sites(lat, inter, pot, X, rows, U, extra):
    """Replace ``X[:, rows]`` by exact conditional draws (in place)."""
    R, n = X.shape[0], len(rows)
    par, nb = _radial_model(lat, inter, pot, X, rows)
    log_accept = None
    phi = _resolve_phi(pot, inter.phi) if inter.mode == "quadratic" else None
    if phi is not None:
        k = nb.shape[1]

        def log_accept(x, idx):
            vals = np.asarray(phi(x[:, None, :], nb[idx])).sum(axis=-1)
            return -(pot.theta * vals + k * abs(pot.theta) * phi.M)

    new = _draw_rows(par, U.reshape(R * n, -1), extra, log_accept)
    X[:, rows] = new.reshape(R, n, 3)


def _keyed_uniforms(seed, replica_ids, sweep_index, parity, n_sites, width):
    return np.stack([_rng(seed, int(r), sweep_index, parity).uniform(size=(n_sites, width)) for r in replica_ids])


def _keyed_extra(seed, replica_ids, sweep_index, parity, n_sites):
    def extra(row, k):
        r, pos = divmod(row, n_sites)
        return _rng(seed, int(replica_ids[r]), sweep_index, parity, pos, 1 + k)

    return extra


def sweep(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, config, parity_class: int, seed: int = 0,
          sweep_index: int = 0, replica_offset: int = 0, order: Optional[Sequence[int]] = None):
    """Resample every interior site of one parity from its exact conditional.

    ``order`` (positions within the parity class) visits sites one at a time;
    with keyed streams the result is identical to the vectorised update.
    """
    if parity_class not in (GAMMA0, GAMMA1):
        raise ValueError("parity_class must be 0 or 1")
    X, single = _ensemble(config)
    X = X.copy()
    rows = lat.gamma(parity_class)
    if rows.size == 0:
        return _wrap(lat, config, X, single)
    R = X.shape[0]
    ids = np.arange(replica_offset, replica_offset + R)
    width = _block_width(pot, inter)
    U = _keyed_uniforms(seed, ids, sweep_index, parity_class, rows.size, width)
    if order is None:
        _resample_sites(lat, inter, pot, X, rows, U, _keyed_extra(seed, ids, sweep_index, parity_class, rows.size))
    else:
        if sorted(order) != list(range(rows.size)):
            raise ValueError("order must be a permutation of the parity class")
        for pos in order:
            extra = lambda row, k, pos=pos: _rng(seed, int(ids[row]), sweep_index, parity_class, pos, 1 + k)
            _resample_sites(lat, inter, pot, X, rows[[pos]], U[:, [pos]], extra)
    return _wrap(lat, config, X, single)


def _wrap(lat, config, X, single):
    if isinstance(config, Configuration):
        return Configuration(lat, X[0])
    return X[0] if single else X


def conditional_resample(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, config, i,
                         rng: np.random.Generator, method: str = "exact", **mh) -> GroupElement:
    """Draw ``x_i`` from its conditional given the current neighbours.

    ``method='exact'`` draws the radius and direction exactly; ``method='mh'`` runs
    :func:`single_site.sample_site` with the neighbour values (quadratic mode).
    """
    X, _ = _ensemble(config)
    if X.shape[0] != 1:
        raise ValueError("conditional_resample acts on a single configuration")
    row = lat.index[tuple(i)] if not isinstance(i, (int, np.integer)) else int(i)
    if row >= lat.n_interior:
        raise ValueError("site must be interior")
    if method == "mh":
        if inter.mode != "quadratic":
            raise ValueError("MH conditional draws are only wired for quadratic mode")
        b = BoundarySummary.from_neighbors(X[0, lat.nbr[row]])
        batch = sample_site(pot, b, inter.phi, n=1, seed=int(rng.integers(2 ** 63)), n_chains=1, **mh)
        return GroupElement(*map(float, batch.points[-1]))
    width = _block_width(pot, inter)
    U = rng.uniform(size=(1, 1, width))
    seeds = rng.integers(2 ** 63, size=4)
    extra = lambda r, k: np.random.default_rng([int(s) for s in seeds] + [k])
    Y = X.copy()
    _resample_sites(lat, inter, pot, Y, np.array([row]), U, extra)
    return GroupElement(*map(float, Y[0, row]))


def apply_P(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, config, seed: int = 0, step: int = 0,
            replica_offset: int = 0):
    """One application of the sweep kernel dual to ``E_Gamma1 E_Gamma0``.

    As a kernel acting on observables from the left, ``E_Gamma1 E_Gamma0 f``
    resamples Gamma1 first and then Gamma0.
    """
    X = sweep(lat, inter, pot, config, GAMMA1, seed, 2 * step, replica_offset)
    return sweep(lat, inter, pot, X, GAMMA0, seed, 2 * step + 1, replica_offset)


# --------------------------------------------------------------------------
# chains


@dataclass
class ChainResult:
    samples: np.ndarray  # (n_replicas * n_kept, n_rows, 3), replica-major
    n_replicas: int
    n_kept: int
    tau: Dict[str, float]
    non_mixing: bool
    final: np.ndarray  # (n_replicas, n_rows, 3)


def initial_state(lat: LatticeSpec, omega, n_replicas: int) -> np.ndarray:
    X = np.zeros((n_replicas, lat.n_rows, 3))
    X[:, lat.n_interior:] = np.asarray(omega, dtype=float)
    return X


def run_chain(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, omega, n_sweeps: int,
              n_replicas: int = 16, seed: int = 0, burnin: Optional[int] = None, thin: int = 1,
              init: Optional[np.ndarray] = None) -> ChainResult:
    """Replica-parallel chains of the sweep kernel with boundary ``omega`` held fixed.

    The autocorrelation time is measured on ``d`` at the centre site and on
    the energy; chains are flagged non-mixing when it exceeds
    ``n_sweeps / 10``.
    """
    burnin = n_sweeps // 5 if burnin is None else burnin
    if n_sweeps < burnin or n_sweeps <= 0:
        raise ValueError("n_sweeps must be positive and at least the burn-in")
    X = initial_state(lat, omega, n_replicas) if init is None else np.array(init, dtype=float)
    kept = []
    trace_d, trace_h = [], []
    c = lat.center()
    for s in range(n_sweeps):
        X = apply_P(lat, inter, pot, X, seed, s)
        if s >= burnin:
            trace_d.append(np.asarray(distance(X[:, c])))
            trace_h.append(hamiltonian(lat, inter, pot, X))
            if (s - burnin) % thin == 0:
                kept.append(X.copy())
    tau = {}
    if len(trace_d) >= 4:
        tau["d_center"] = autocorrelation_time(np.array(trace_d).T)
        tau["energy"] = autocorrelation_time(np.array(trace_h).T)
    non_mixing = any(t > n_sweeps / 10 for t in tau.values())
    samples = np.stack(kept, axis=1) if kept else np.empty((n_replicas, 0, lat.n_rows, 3))
    return ChainResult(samples.reshape(-1, lat.n_rows, 3), n_replicas, samples.shape[1], tau, non_mixing, X)


# --------------------------------------------------------------------------
# diagnostics


def dlr_check(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, omega, site, n_sweeps: int = 400,
              n_replicas: int = 100, seed: int = 0, burnin: int = 50, thin: int = 2) -> dict:
    """Finite-volume DLR check ``nu E_i = nu`` for ``d(x_i)``.

    Chain samples of the whole box are compared with fresh draws of ``x_i``
    from :func:`single_site.sample_exact` given the sampled neighbours (a
    code path independent of the sweep kernel).  Quadratic mode only.
    """
    if inter.mode != "quadratic":
        raise ValueError("the direct single-site conditional is defined for quadratic mode")
    row = lat.index[tuple(site)] if not isinstance(site, (int, np.integer)) else int(site)
    if row >= lat.n_interior:
        raise ValueError("site must be interior")
    chain = run_chain(lat, inter, pot, omega, n_sweeps, n_replicas, seed, burnin=burnin, thin=thin)
    X = chain.samples
    direct = sample_exact(pot, X[:, lat.nbr[row]], _rng(seed, 23), inter.phi)
    d_chain = np.asarray(distance(X[:, row]))
    d_direct = np.asarray(distance(direct))
    pvalue = ks_2samp(d_chain, d_direct)
    return {"site": row, "pvalue": pvalue, "n": int(X.shape[0]), "mean_chain": float(d_chain.mean()),
            "mean_direct": float(d_direct.mean()), "tau": chain.tau, "non_mixing": chain.non_mixing,
            "verdict": PASS if pvalue > 0.01 else FAIL}



def contraction_estimate(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec, f: TrialFunction,
                         n_max: int = 5, replicas: int = 32, seed: int = 0, n_outer: int = 256,
                         burnin: int = 50, omega=None) -> dict:
    """Estimate ``nu |P^n f - P^{n+1} f|^2`` for ``n = 0..n_max`` by nested simulation.

    Outer states come from a stationary run; from each, ``replicas`` inner
    chains are continued.  Along one inner chain ``f(X_n) - f(X_{n+1})`` has
    conditional mean ``P^n f(x) - P^{n+1} f(x)``, so the pair average
    ``sum_{r != r'} D_r D_r' / (R (R - 1))`` is unbiased for its square.  The
    exponent of ``|.|`` is therefore fixed to 2 here.
    """
    if replicas < 2:
        raise ValueError("need at least two inner replicas")
    omega = make_boundary(lat, "identity") if omega is None else omega
    outer = run_chain(lat, inter, pot, omega, burnin, n_outer, seed, burnin=burnin).final
    X = np.repeat(outer, replicas, axis=0)
    vals = [np.asarray(f(X)).reshape(n_outer, replicas)]
    for n in range(n_max + 1):
        X = apply_P(lat, inter, pot, X, seed + 1, n, replica_offset=0)
        vals.append(np.asarray(f(X)).reshape(n_outer, replicas))
    table = []
    R = replicas
    for n in range(n_max + 1):
        D = vals[n] - vals[n + 1]
        s1 = D.sum(axis=1)
        s2 = (D * D).sum(axis=1)
        u = (s1 * s1 - s2) / (R * (R - 1))
        est = float(u.mean())
        se = float(u.std(ddof=1) / math.sqrt(n_outer))
        table.append({"n": n, "estimate": est, "se": se, "above_floor": bool(est > 3 * se)})
    fit = _fit_decay(table)
    floor_from = next((r["n"] for r in table if not r["above_floor"]), None)
    return {"eta_hat": fit["eta2"], "d_tilde_hat": fit["intercept"], "slope": fit["slope"],
            "slope_se": fit["slope_se"], "slope_ci_excludes_0": fit["excludes_0"], "decay_table": table,
            "floor_from": floor_from, "wide_ci": fit["n_points"] < 2, "J0": inter.J0, "replicas": replicas,
            "n_outer": n_outer}


def _fit_decay(table) -> dict:
    # the contiguous run of significant points from n = 0
    pts = []
    for r in table:
        if not r["above_floor"]:
            break
        pts.append(r)
    if len(pts) < 2:
        return {"eta2": float("nan"), "intercept": float("nan"), "slope": float("nan"), "slope_se": float("inf"),
                "excludes_0": False, "n_points": len(pts)}
    n = np.array([r["n"] for r in pts], dtype=float)
    y = np.log([r["estimate"] for r in pts])
    w = 1.0 / np.array([(r["se"] / r["estimate"]) ** 2 for r in pts])
    W = np.sum(w)
    nbar = np.sum(w * n) / W
    ybar = np.sum(w * y) / W
    sxx = np.sum(w * (n - nbar) ** 2)
    slope = float(np.sum(w * (n - nbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * nbar)
    slope_se = float(math.sqrt(1.0 / sxx))
    return {"eta2": math.exp(slope), "intercept": math.exp(intercept), "slope": slope, "slope_se": slope_se,
            "excludes_0": bool(slope + 1.96 * slope_se < 0), "n_points": len(pts)}


def edge_gradient_i(inter: InteractionSpec, pot: PotentialSpec, xi, xj) -> np.ndarray:
    """``grad_i`` of the edge term ``V(x_i, x_j)``; shape ``(..., 2)``."""
    xi = _as_points(xi)
    xj = _as_points(xj)
    di = np.asarray(distance(xi))[..., None]
    dj = np.asarray(distance(xj))[..., None]
    gi = d_gradient(xi)
    if inter.mode == "quadratic":
        return 2 * pot.epsilon * (di + pot.rho * dj) * gi
    if inter.V is not None:
        V = lambda a: inter.V(a, xj)
        from .heisenberg import fd_sub_gradient

        return fd_sub_gradient(V, xi)
    k2 = inter.kappa ** 2
    return np.sqrt(dj * dj + k2) * di / np.sqrt(di * di + k2) * gi


def covariance_bound_check(lat: LatticeSpec, inter: InteractionSpec, pot: PotentialSpec,
                           family: Sequence[TrialFunction], config, i, n: int = 20_000, seed: int = 0) -> dict:
    """Fit the smallest ``kappa`` in the covariance bound under ``E_{~i}``.

    ``E_{~i}`` resamples the neighbours of ``i`` (an independent product of
    exact single-site conditionals) with ``x_i`` frozen at its value in
    ``config``.  The covariance of ``|f|^q`` with the vector ``W_i`` is
    measured by its Euclidean norm.
    """
    X, _ = _ensemble(config)
    row = lat.index[tuple(i)] if not isinstance(i, (int, np.integer)) else int(i)
    nbrs = lat.nbr[row]
    interior_nbrs = np.array([k for k in nbrs if k < lat.n_interior], dtype=np.int64)
    q, p = pot.q, pot.p
    Y = np.repeat(X[:1], n, axis=0)
    if interior_nbrs.size:
        width = _block_width(pot, inter)
        U = _keyed_uniforms(seed, np.arange(n), 0, 7, interior_nbrs.size, width)
        _resample_sites(lat, inter, pot, Y, interior_nbrs, U, _keyed_extra(seed, np.arange(n), 0, 7, interior_nbrs.size))
    xi = Y[:, row]
    W = sum(edge_gradient_i(inter, pot, xi, Y[:, k]) for k in nbrs)
    rows = []
    kappas = []
    for f in family:
        if not set(f.localization) <= set(int(k) for k in nbrs):
            raise ValueError(f"{f.name} is not localised in the neighbourhood of the site")
        fq = np.abs(f(Y)) ** q
        cov = np.mean(fq[:, None] * W, axis=0) - fq.mean() * W.mean(axis=0)
        lhs = float(np.linalg.norm(cov))
        mass = float(np.mean(fq))
        en = float(np.mean(gradient_power(Y, f, q)))
        if en <= 1e-14:
            k_f = 0.0 if lhs <= 1e-12 else math.inf
        else:
            k_f = (lhs / mass ** (1 / p)) ** q / en if mass > 0 else 0.0
        kappas.append(k_f)
        rows.append({"name": f.name, "covariance": lhs, "mass": mass, "energy": en, "kappa_f": k_f})
    kappa = max(kappas) if kappas else 0.0
    for r in rows:
        rhs = r["mass"] ** (1 / p) * (kappa * r["energy"]) ** (1 / q)
        r["slack"] = rhs - r["covariance"]
    return {"kappa_hat": kappa, "worst_slack": min(r["slack"] for r in rows) if rows else 0.0, "table": rows}
