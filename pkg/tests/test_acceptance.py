"""Acceptance gate: one PASS/FAIL line per criterion at the stated tolerances.

Each test prints its line (visible in ``pytest -v`` output) and then asserts,
so a failing criterion shows both the line and the assertion.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from subriemann_gibbs import cli
from subriemann_gibbs.cc_distance import (
    cc_distance,
    distance,
    distance_observable,
    eikonal_residual,
    estimate_K,
    laplacian,
    sample_unit_sphere,
    sub_laplacian_d,
)
from subriemann_gibbs.grid_oracle import grid_oracle_many
from subriemann_gibbs.heisenberg import dilate, inverse, mul
from subriemann_gibbs.inequality_lab import (
    PASS,
    TrialFunction,
    exp_moment_check,
    lsq_ratio_scan,
    ratio_table,
    scan_max,
    tail_decay_check,
)
from subriemann_gibbs.lattice_gibbs import (
    InteractionSpec,
    LatticeSpec,
    contraction_estimate,
    dlr_check,
    make_boundary,
    run_chain,
)
from subriemann_gibbs.single_site import (
    BoundarySummary,
    PotentialSpec,
    cosine_interaction,
    default_trial_family,
    lsq_estimate,
    partition_quadrature,
    sample_reduced,
    sample_site,
    sg_estimate,
    ubound_check,
)
from subriemann_gibbs.stats import batch_means


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
        assert ok, f"criterion {k}: {detail}"

    return emit


def test_criterion_01_group_law(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    # unit-scale elements: an absolute 1e-12 sits near one ulp once |x3| ~ 1e4
    a, b, c = (rng.uniform(-1, 1, size=(1000, 3)) for _ in range(3))
    lam = rng.uniform(0.5, 2, size=1000)
    assoc = np.max(np.abs(mul(mul(a, b), c) - mul(a, mul(b, c))))
    inv = max(np.max(np.abs(mul(a, inverse(a)))), np.max(np.abs(mul(inverse(a), a))))
    hom = np.max(np.abs(dilate(lam, mul(a, b)) - mul(dilate(lam, a), dilate(lam, b))))
    elapsed = time.perf_counter() - t0
    err = max(assoc, inv, hom)
    report(1, err <= 1e-12 and elapsed < 1.0,
           f"max abs error {err:.2e} (assoc {assoc:.1e}, inverse {inv:.1e}, dilation {hom:.1e}), {elapsed:.3f} s")


def test_criterion_02_eikonal(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    sig = sample_unit_sphere(1000, rng)
    x = dilate(np.exp(rng.uniform(np.log(0.1), np.log(10), 1000)), sig)
    worst = float(np.max(eikonal_residual(x)))
    elapsed = time.perf_counter() - t0
    report(2, worst <= 1e-4 and elapsed < 30.0, f"max | |grad d| - 1 | = {worst:.2e} on 1000 points, {elapsed:.2f} s")


def test_criterion_03_homogeneity_symmetry(report):
    rng = np.random.default_rng(3)
    x = rng.uniform(-5, 5, size=(1000, 3))
    lam = np.exp(rng.uniform(np.log(0.1), np.log(10), 1000))
    d = distance(x)
    hom = np.max(np.abs(distance(dilate(lam, x)) - lam * d) / (lam * d))
    sym = np.max(np.abs(distance(inverse(x)) - d) / d)
    err = max(hom, sym)
    report(3, err <= 1e-6, f"max relative error {err:.2e} (homogeneity {hom:.1e}, symmetry {sym:.1e})")


def _corpus():
    axis = [(0, 0, z) for z in (0.05, 0.25, -0.5, 1.0)]
    plane = [(1, 0, 0), (0.6, 0.8, 0), (-0.3, 0.4, 0), (0, -1.5, 0)]
    generic = [(1, 0, 0.2), (0.5, -0.2, 0.3), (-0.7, 0.1, -0.4), (0.2, 0.2, 0.6), (1.2, -0.5, 0.1),
               (-0.4, -0.9, -0.25), (0.3, 0.0, 0.35), (0.05, 0.1, -0.3), (0.8, 0.6, -0.7), (-1.0, 0.3, 0.45),
               (0.1, -0.6, 0.05), (0.6, 0.2, -0.05)]
    return np.array(axis + plane + generic, dtype=float)


def test_criterion_04_oracle_equivalence(report):
    pts = _corpus()
    assert len(pts) == 20
    d = distance(pts)
    oracle = grid_oracle_many(pts, 0.05)
    gap = np.abs(oracle - d) / d
    z1 = cc_distance((0.0, 0.0, 1.0), tol=1e-8)
    solver_gap = abs(z1.d - 2 * math.sqrt(math.pi))
    o1 = grid_oracle_many([(0.0, 0.0, 1.0)], 0.05)[0]
    o1_gap = abs(o1 - z1.d) / z1.d
    ok = gap.max() <= 0.10 and solver_gap <= 1e-8 and o1_gap <= 0.10
    report(4, ok, f"max oracle gap {gap.max():.3%} on 20 points (h = 0.05); |d(0,0,1) - 2 sqrt(pi)| = "
                  f"{solver_gap:.1e}, oracle gap there {o1_gap:.2%}")


def test_criterion_05_laplacian_bound(report):
    K = estimate_K()
    rng = np.random.default_rng(5)
    y = sample_unit_sphere(10_000, rng)
    lam = np.exp(rng.uniform(np.log(0.1), np.log(10), 10_000))
    x = dilate(lam, y)
    dl = distance(x) * laplacian(x)
    sup = float(np.max(dl))
    # scaling identity with the finite-difference operator on a subsample
    sub = y[:500]
    base = sub_laplacian_d(sub)
    scal = 0.0
    for s in (0.1, 3.0, 10.0):
        scal = max(scal, float(np.max(np.abs(sub_laplacian_d(dilate(s, sub)) * s - base) / np.abs(base))))
    ok = sup <= 1.01 * K and scal <= 1e-3
    report(5, ok, f"K_hat = {K:.6f}, max d*Lap d = {sup:.6f} on 1e4 points (d in [0.1, 10]); "
                  f"scaling identity rel. error {scal:.1e}")


SINGLE_SITE_GRID = [
    dict(alpha=1.0, p=2.0),
    dict(alpha=0.5, p=3.0),
    dict(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=2),
    dict(alpha=2.0, p=3.0, epsilon=0.2, rho=0.5, N=1),
    dict(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=2, theta=0.5, M=1.0),
    dict(alpha=0.5, p=4.0, epsilon=0.05, rho=2.0, N=1, theta=-0.3, M=1.0),
]


def test_criterion_06_single_site_oracle(report):
    t0 = time.perf_counter()
    rows = []
    ok = True
    for k, kw in enumerate(SINGLE_SITE_GRID):
        spec = PotentialSpec(**kw)
        nb = np.random.default_rng(60 + k).normal(size=(2 * spec.N, 3))
        b = BoundarySummary.from_neighbors(nb)
        phi = cosine_interaction(spec.M) if spec.theta else None
        quad = partition_quadrature(spec, b, phi).moments
        batch = sample_site(spec, b, phi, n=50_000, seed=k)
        d = distance(batch.points)
        worst = 0.0
        for key, vals in (("d^1", d), ("d^2", d * d), ("d^p", d ** spec.p)):
            m, se = batch_means(vals)
            z = abs(m - quad[key]) / se
            worst = max(worst, z)
        ok &= worst <= 3.0 and not batch.flagged
        rows.append(f"{worst:.2f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120.0
    report(6, ok, f"max |MC - quadrature| / SE per grid point = [{', '.join(rows)}] (limit 3), {elapsed:.1f} s")


def test_criterion_07_ubound(report):
    parts = []
    ok = True
    for p in (2.0, 3.0):
        spec = PotentialSpec(alpha=1.0, p=p, epsilon=0.1, rho=10.0, N=2)
        rep = ubound_check(spec, [0.0, 5.0, 20.0, 50.0], default_trial_family(p), n=50_000, seed=1)
        feasible = math.isfinite(rep.params["A_hat"]) and rep.params["worst_margin_se"] >= -3.0
        ok &= feasible and rep.value <= 2.0
        parts.append(f"p={p:g} (q={spec.q:g}): A={rep.params['A_hat']:.3g}, B={rep.params['B_hat']:.3g}, "
                     f"worst margin {rep.params['worst_margin_se']:.2f} SE, stability {rep.value:.2f}")
    report(7, ok, "; ".join(parts))


def test_criterion_08_uniform_sg_lsq(report):
    parts = []
    ok = True
    for p in (2.0, 3.0):
        spec = PotentialSpec(alpha=1.0, p=p, epsilon=0.01, rho=1.0, N=2)
        fam = default_trial_family(p)
        c0, c = [], []
        consistent = True
        for k, S in enumerate((0.0, 5.0, 20.0, 50.0)):
            x = sample_reduced(spec, S, 50_000, seed=2 + k)
            b = BoundarySummary.constant(S, spec.N)
            sg = sg_estimate(spec, b, fam, samples=x)
            ls = lsq_estimate(spec, b, fam, samples=x)
            c0.append(sg.value)
            c.append(ls.value)
            consistent &= sg.value <= 4.0 / math.log(2.0) * ls.value * (1.0 + 3.0 * ls.se / ls.value)
        c0, c = np.array(c0), np.array(c)
        finite = np.all(np.isfinite(c0)) and np.all(np.isfinite(c))
        s0, s1 = c0.max() / c0.min(), c.max() / c.min()
        ok &= finite and s0 <= 4.0 and s1 <= 4.0 and consistent
        parts.append(f"p={p:g}: c0 max/min {s0:.2f}, c max/min {s1:.2f}, SG-from-LS {'ok' if consistent else 'violated'}")
    report(8, ok, "; ".join(parts))


def test_criterion_09_tensorisation(report):
    pot = PotentialSpec(alpha=1.0, p=2.0)
    lat = LatticeSpec(1, 2)
    inter = InteractionSpec(mode="general", J0=0.0)
    X = run_chain(lat, inter, pot, make_boundary(lat), n_sweeps=250, n_replicas=400, seed=5, burnin=50).samples
    fam = default_trial_family(2.0)
    lifts = [[TrialFunction.lift(f, s) for f in fam] for s in (0, 1)]
    singles = [scan_max(ratio_table(X, l, pot.q)) for l in lifts]
    products = lifts[0] + lifts[1] + [a * b for a, b in itertools.product(*lifts)]
    c, se = scan_max(ratio_table(X, products, pot.q))
    k = int(np.argmax([v for v, _ in singles]))
    c_single, se_single = singles[k]
    margin = c_single + 3.0 * math.hypot(se, se_single) - c
    report(9, margin >= 0, f"product c_hat = {c:.4f} +- {se:.4f}, single-site max {c_single:.4f} +- {se_single:.4f}")


def test_criterion_10_dlr(report):
    lat = LatticeSpec(2, 2)
    pot = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=2, theta=0.3, M=1.0)
    inter = InteractionSpec(mode="quadratic", phi=cosine_interaction(1.0))
    pvals = []
    for k, mode in enumerate(("identity", "constant-d", "random")):
        res = dlr_check(lat, inter, pot, make_boundary(lat, mode, 1.0, seed=10), (0, 0), seed=10 + k)
        pvals.append(res["pvalue"])
    ok = all(p > 0.01 for p in pvals)
    report(10, ok, "KS p-values identity/constant-d/random = " + ", ".join(f"{p:.3f}" for p in pvals))


def test_criterion_11_sweep_contraction(report):
    t0 = time.perf_counter()
    lat = LatticeSpec(2, 8)
    pot = PotentialSpec(alpha=0.01, p=2.0)
    f = TrialFunction.lift(distance_observable, lat.center())
    parts = []
    ok = True
    for J0 in (0.0, 0.05, 0.1):
        res = contraction_estimate(lat, InteractionSpec(mode="general", J0=J0), pot, f, n_max=5, replicas=128,
                                   n_outer=256, seed=3)
        if J0 == 0:
            good = res["floor_from"] == 1
            parts.append(f"J0=0: floor from n={res['floor_from']}")
        else:
            good = res["eta_hat"] < 1 and res["slope_ci_excludes_0"]
            parts.append(f"J0={J0:g}: eta^2 = {res['eta_hat']:.3g}, slope {res['slope']:.2f} +- "
                         f"{1.96 * res['slope_se']:.2f}")
        ok &= good
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600.0
    report(11, ok, "; ".join(parts) + f"; {elapsed:.0f} s")


def test_criterion_12_tails(report):
    lat = LatticeSpec(2, 4)
    pot = PotentialSpec(alpha=1.0, p=2.0, epsilon=0.1, rho=1.0, N=2)
    X = run_chain(lat, InteractionSpec(), pot, make_boundary(lat), n_sweeps=300, n_replicas=200, seed=6,
                  burnin=50).samples
    site = lat.index[(1, 1)]
    fam = [TrialFunction.lift(g, site) for g in default_trial_family(2.0)]
    C = lsq_ratio_scan(lambda n, s: X, fam, pot.q, len(X)).value
    f = next(g for g in fam if g.name.startswith("tanh(x1)"))
    tails = tail_decay_check(X, f, [0.5, 1.0, 1.5], C, pot.p, pot.q)
    tails_ok = all(r["empirical"] <= r["envelope"] + 3 * r["se"] for r in tails.table)
    moments = exp_moment_check(X, f, [0.1, 0.5, 1.0, 2.0], C, pot.q, grad_bound=1.0)
    ok = tails_ok and moments.verdict == PASS
    detail = ", ".join(f"h={r['h']:g}: {r['empirical']:.4f} vs {r['envelope']:.4f}" for r in tails.table)
    report(12, ok, f"C = c_hat = {C:.4f}; tails {detail}; exp-moment worst margin {moments.value:.4f}")


CLI_RUNS = [
    ("distance", None, "oracle_step = 0.2\n", ["distance.csv", "distance.json"]),
    ("verify", "eikonal", "eikonal_points = 100\n", ["verify_eikonal.json"]),
    ("verify", "ubound", "n = 5000\nepsilon = 0.1\nrho = 10\n", ["verify_ubound.json"]),
    ("verify", "sg", "n = 5000\nepsilon = 0.01\nrho = 1\n", ["verify_sg.json"]),
    ("verify", "lsq", "n = 5000\nepsilon = 0.01\nrho = 1\n", ["verify_lsq.json"]),
    ("verify", "sweep", "interaction = general\nJ0 = 0.05\nside = 3\ninner = 8\nouter = 32\nsweep_burnin = 5\n",
     ["verify_sweep.json"]),
    ("verify", "tails", "side = 2\nepsilon = 0.1\nrho = 1\nsweeps = 40\nreplicas = 8\nsweep_burnin = 10\n",
     ["verify_tails.json"]),
    ("verify", "dlr", "side = 2\nepsilon = 0.1\nrho = 1\nsweeps = 30\nreplicas = 8\nsweep_burnin = 5\n",
     ["verify_dlr.json"]),
    ("verify", "sobolev", "sobolev_nodes = 16\n", ["verify_sobolev.json"]),
    ("sample", "site", "n = 2000\nsampler = mh\nburnin = 500\n", ["sample_site.csv", "sample_site.json"]),
    ("sample", "lattice", "side = 2\nreplicas = 2\nsweeps = 20\nsweep_burnin = 5\n",
     ["sample_lattice.csv", "sample_lattice.json"]),
]


def test_criterion_13_cli_reproducibility(report, tmp_path, capsys):
    pts = tmp_path / "points.csv"
    pts.write_text("1,0,0.2\n0,0,1\n3,4,0\n", encoding="utf-8")
    bad = []
    for command, arg, text, outputs in CLI_RUNS:
        cfg = tmp_path / f"{command}_{arg}.txt"
        cfg.write_text(text + "seed = 42\n", encoding="utf-8")
        first, second = tmp_path / f"{command}_{arg}_1", tmp_path / f"{command}_{arg}_2"
        argv = [command] + ([arg] if arg else [str(pts)])
        codes = [cli.main(argv + ["--config", str(cfg), "--out", str(first)])]
        report_json = next(o for o in outputs if o.endswith(".json"))
        rerun = [command] + ([arg] if arg else [])
        codes.append(cli.main(rerun + ["--config", str(first / report_json), "--out", str(second)]))
        same = all((first / o).read_bytes() == (second / o).read_bytes() for o in outputs)
        embedded = json.loads((first / report_json).read_text())["config"]
        if not same or codes[0] != codes[1] or codes[0] in (cli.EXIT_CONFIG, cli.EXIT_SOLVER) \
                or set(embedded) != set(cli.DEFAULTS):
            bad.append(f"{command} {arg or ''}".strip())
    capsys.readouterr()
    report(13, not bad, f"{len(CLI_RUNS) - len(bad)}/{len(CLI_RUNS)} commands byte-identical on rerun from the "
                        f"embedded config" + (f"; differing: {', '.join(bad)}" if bad else ""))
