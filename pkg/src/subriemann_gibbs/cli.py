"""Command-line front end: ``subriemann-gibbs <command> --config <path> [--seed] [--out]``.

Configuration files are UTF-8 text with one ``key = value`` per line and
``#`` comments.  Every report embeds the fully materialised configuration, so
``--config report.json`` reruns an experiment exactly.

Exit codes: 0 success (verify: every check passed or was inconclusive with at
least one pass), 1 a verify check failed, 2 parse error or invalid
configuration, 3 distance solver failure, 4 every verify check inconclusive.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

SCHEMA = "1"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER, EXIT_INCONCLUSIVE = 0, 1, 2, 3, 4
SUITES = ("eikonal", "ubound", "sg", "lsq", "sweep", "tails", "dlr", "sobolev")

DEFAULTS: Dict[str, object] = {
    # geometry
    "tol": 1e-10,
    "oracle": True,
    "oracle_step": 0.1,
    "points": "",
    "eikonal_points": 1000,
    "eikonal_h": 1e-4,
    "eikonal_tol": 1e-4,
    # potential
    "alpha": 1.0,
    "p": 2.0,
    "epsilon": 0.0,
    "rho": 0.0,
    "theta": 0.0,
    "N": 2,
    "M": 1.0,
    # lattice
    "side": 4,
    "boundary": "identity",
    "boundary_value": 1.0,
    "interaction": "quadratic",
    "J0": 0.0,
    "kappa": 1e-3,
    # mc
    "n": 50000,
    "burnin": 5000,
    "thin": 5,
    "replicas": 16,
    "sweeps": 200,
    "sweep_burnin": 50,
    "seed": 0,
    "sampler": "exact",
    # experiments
    "S": 0.0,
    "S_grid": [0.0, 5.0, 20.0, 50.0],
    "n_max": 5,
    "inner": 32,
    "outer": 256,
    "lambdas": [0.1, 0.5, 1.0, 2.0],
    "h_grid": [0.5, 1.0, 1.5],
    "sobolev_t": 1.0,
    "sobolev_R": 2.0,
    "sobolev_nodes": 32,
}

CHOICES = {
    "boundary": ("identity", "constant-d", "random"),
    "interaction": ("quadratic", "general"),
    "sampler": ("exact", "mh"),
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if isinstance(default, int):
            value = int(raw, 0)
            if key == "seed" and not 0 <= value < 2 ** 64:
                raise ValueError("seed must be an unsigned 64-bit integer")
            return value
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    if key in CHOICES and raw not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(CHOICES[key])}")
    return raw


def _check_key(key: str, where: str):
    if key == "q":
        raise ConfigError(f"{where}: q is derived from p by conjugacy and cannot be set")
    if key not in DEFAULTS:
        raise ConfigError(f"{where}: unknown key {key!r}")


def parse_config(text: str) -> Dict[str, object]:
    """Parse ``key = value`` lines into a dict of explicit settings."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        _check_key(key, f"line {lineno}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path: Optional[str]) -> Dict[str, object]:
    """Read a config file or the embedded config of a JSON report."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            embedded = json.loads(text)["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError("JSON config must be a report with a 'config' object") from None
        out = {}
        for key, value in embedded.items():
            _check_key(key, "embedded config")
            out[key] = _parse_value(key, _format_value(value))
        return out
    return parse_config(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def materialise(explicit: Dict[str, object], seed: Optional[int]) -> Dict[str, object]:
    cfg = dict(DEFAULTS)
    cfg.update(explicit)
    if seed is not None:
        cfg["seed"] = _parse_value("seed", str(seed))
    return cfg


# --------------------------------------------------------------------------
# output helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def write_report(out_dir: str, name: str, report: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_clean(report), sort_keys=True, allow_nan=False) + "\n")
    return path


def _fmt(v) -> str:
    v = float(v)
    return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))


def write_csv(out_dir: str, name: str, header: Sequence[str], rows) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, (str, int, np.integer)) else _fmt(c) for c in row])
    return path


def _envelope(command: str, cfg: dict, **body) -> dict:
    return {"schema": SCHEMA, "command": command, "config": cfg, "seed": cfg["seed"], **body}


# --------------------------------------------------------------------------
# builders


def _potential(cfg):
    from .single_site import PotentialSpec

    return PotentialSpec(alpha=cfg["alpha"], p=cfg["p"], epsilon=cfg["epsilon"], rho=cfg["rho"], theta=cfg["theta"],
                         N=cfg["N"], M=cfg["M"] if cfg["theta"] else 0.0)


def _phi(cfg):
    from .single_site import cosine_interaction

    return cosine_interaction(cfg["M"]) if cfg["theta"] else None


def _lattice(cfg):
    from .lattice_gibbs import InteractionSpec, LatticeSpec

    lat = LatticeSpec(cfg["N"], cfg["side"])
    inter = InteractionSpec(mode=cfg["interaction"], J0=cfg["J0"], kappa=cfg["kappa"], M=cfg["M"], phi=_phi(cfg))
    return lat, inter


def _boundary(cfg, lat, mode=None):
    from .lattice_gibbs import make_boundary

    return make_boundary(lat, mode or cfg["boundary"], cfg["boundary_value"], cfg["seed"])


# --------------------------------------------------------------------------
# distance


def read_points(path: str) -> np.ndarray:
    """Rows ``x1,x2,x3`` (comma or whitespace separated); ``#`` comments and a header are allowed."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read points: {exc}") from None
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f for f in line.replace(",", " ").split()]
        if not rows and [f.lower() for f in fields] == ["x1", "x2", "x3"]:
            continue
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ConfigError(f"line {lineno}: non-numeric field") from None
        if len(vals) != 3 or not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"line {lineno}: expected three finite numbers")
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 3)


def cmd_distance(cfg: dict, out_dir: str) -> int:
    from .cc_distance import DistanceSolverError, cc_distance
    from .grid_oracle import DEFAULT_BOX, grid_oracle_many

    if not cfg["points"]:
        raise ConfigError("distance needs a points file (positional argument or 'points' key)")
    pts = read_points(cfg["points"])
    rows = []
    try:
        for x in pts:
            r = cc_distance(x, tol=cfg["tol"])
            rows.append([x[0], x[1], x[2], r.d, r.theta])
    except DistanceSolverError as exc:
        print(f"error: distance solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    oracle = np.full(len(rows), np.nan)
    if cfg["oracle"] and len(rows):
        lo = np.array([b[0] for b in DEFAULT_BOX])
        hi = np.array([b[1] for b in DEFAULT_BOX])
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        if inside.any():
            oracle[inside] = grid_oracle_many(pts[inside], cfg["oracle_step"])
    out = []
    for row, o in zip(rows, oracle):
        d = row[3]
        gap = abs(o - d) / d if d > 0 else abs(o - d)
        out.append(row + [o, gap])
    path = write_csv(out_dir, "distance.csv", ["x1", "x2", "x3", "d", "theta", "oracle_d", "gap"], out)
    finite = [r[-1] for r in out if math.isfinite(r[-1])]
    write_report(out_dir, "distance.json", _envelope("distance", cfg, n_points=len(out),
                                                       max_gap=max(finite) if finite else float("nan")))
    print(f"distance: {len(out)} rows -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify suites; each returns a list of check records with a 'verdict'


def _suite_eikonal(cfg):
    from .cc_distance import eikonal_residual, sample_unit_sphere
    from .heisenberg import dilate

    rng = np.random.default_rng(cfg["seed"])
    n = cfg["eikonal_points"]
    sig = sample_unit_sphere(n, rng)
    lam = np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=n))
    res = np.asarray(eikonal_residual(dilate(lam, sig), cfg["eikonal_h"]))
    worst = float(res.max()) if res.size else 0.0
    return [{"name": "eikonal", "max_residual": worst, "tol": cfg["eikonal_tol"], "n": n,
             "verdict": "pass" if worst <= cfg["eikonal_tol"] else "fail"}]


def _suite_ubound(cfg):
    from .single_site import default_trial_family, ubound_check

    spec = _potential(cfg)
    rep = ubound_check(spec, cfg["S_grid"], default_trial_family(spec.p), cfg["n"], cfg["seed"])
    return [dict(rep.as_record(), name="ubound")]


def _per_s_estimates(cfg):
    from .single_site import BoundarySummary, default_trial_family, lsq_estimate, sample_reduced, sg_estimate

    spec = _potential(cfg)
    family = default_trial_family(spec.p)
    out = []
    for k, S in enumerate(cfg["S_grid"]):
        x = sample_reduced(spec, S, cfg["n"], cfg["seed"] + 7919 * k)
        b = BoundarySummary.constant(S, spec.N)
        out.append((S, sg_estimate(spec, b, family, samples=x, seed=cfg["seed"]),
                    lsq_estimate(spec, b, family, samples=x, seed=cfg["seed"])))
    return out


def _uniformity(name, values):
    values = np.asarray(values, dtype=float)
    spread = float(values.max() / values.min()) if np.all(values > 0) and np.all(np.isfinite(values)) else math.inf
    return {"name": name, "values": values, "max_over_min": spread, "limit": 4.0,
            "verdict": "pass" if spread <= 4.0 else "fail"}


def _suite_sg(cfg):
    est = _per_s_estimates(cfg)
    checks = [_uniformity("sg_uniform_in_S", [e[1].value for e in est])]
    rows = []
    for S, sg, ls in est:
        c = ls.value
        bound = 4.0 / math.log(2.0) * c * (1.0 + 3.0 * ls.se / c)
        rows.append({"S": S, "c0_hat": sg.value, "c0_se": sg.se, "c_hat": c, "c_se": ls.se, "bound": bound,
                     "ok": sg.value <= bound})
    checks.append({"name": "sg_from_lsq", "table": rows, "verdict": "pass" if all(r["ok"] for r in rows) else "fail"})
    checks[0]["per_S"] = [{"S": S, "c0_hat": sg.value, "se": sg.se} for S, sg, _ in est]
    return checks


def _suite_lsq(cfg):
    est = _per_s_estimates(cfg)
    check = _uniformity("lsq_uniform_in_S", [e[2].value for e in est])
    check["per_S"] = [{"S": S, "c_hat": ls.value, "se": ls.se, "table": ls.table} for S, _, ls in est]
    return [check]


def _suite_sweep(cfg):
    from .cc_distance import distance_observable
    from .inequality_lab import TrialFunction
    from .lattice_gibbs import contraction_estimate

    lat, inter = _lattice(cfg)
    pot = _potential(cfg)
    f = TrialFunction.lift(distance_observable, lat.center())
    res = contraction_estimate(lat, inter, pot, f, n_max=cfg["n_max"], replicas=cfg["inner"], seed=cfg["seed"],
                               n_outer=cfg["outer"], burnin=cfg["sweep_burnin"], omega=_boundary(cfg, lat))
    product = (inter.mode == "general" and inter.J0 == 0) or (inter.mode == "quadratic" and pot.epsilon == 0
                                                               and pot.theta == 0)
    if product:
        verdict = "pass" if res["floor_from"] == 1 else "fail"
    elif res["wide_ci"]:
        verdict = "inconclusive"
    else:
        verdict = "pass" if res["eta_hat"] < 1 and res["slope_ci_excludes_0"] else "fail"
    return [dict(res, name="contraction", product_case=product, verdict=verdict)]


def _suite_tails(cfg):
    from .inequality_lab import TrialFunction, exp_moment_check, lsq_ratio_scan, tail_decay_check
    from .lattice_gibbs import run_chain
    from .single_site import default_trial_family

    lat, inter = _lattice(cfg)
    pot = _potential(cfg)
    chain = run_chain(lat, inter, pot, _boundary(cfg, lat), cfg["sweeps"], cfg["replicas"], cfg["seed"],
                      burnin=cfg["sweep_burnin"], thin=1)
    X = chain.samples
    c = lat.center()
    family = [TrialFunction.lift(g, c) for g in default_trial_family(pot.p)]
    scan = lsq_ratio_scan(lambda n, s: X, family, pot.q, len(X), cfg["seed"])
    f = next(g for g in family if g.name.startswith("tanh(x1)"))
    tails = tail_decay_check(X, f, cfg["h_grid"], scan.value, pot.p, pot.q)
    moments = exp_moment_check(X, f, cfg["lambdas"], scan.value, pot.q, grad_bound=1.0)
    return [dict(scan.as_record(), name="c_hat", verdict="pass"),
            dict(tails.as_record(), name="tail_decay"),
            dict(moments.as_record(), name="exp_moment"),
            {"name": "mixing", "tau": chain.tau, "non_mixing": chain.non_mixing,
             "verdict": "inconclusive" if chain.non_mixing else "pass"}]


def _suite_dlr(cfg):
    from .lattice_gibbs import dlr_check

    lat, inter = _lattice(cfg)
    pot = _potential(cfg)
    checks = []
    for mode in CHOICES["boundary"]:
        res = dlr_check(lat, inter, pot, _boundary(cfg, lat, mode), 0, cfg["sweeps"], cfg["replicas"], cfg["seed"],
                        burnin=cfg["sweep_burnin"])
        checks.append(dict(res, name=f"dlr_{mode}"))
    return checks


def _suite_sobolev(cfg):
    from .heisenberg import dilate
    from .inequality_lab import bump, classical_sobolev_probe

    centers = [(0.0, 0.0, 0.0), (0.3, 0.0, 0.0), (0.0, 0.3, 0.1), (-0.2, 0.2, -0.1), (0.1, -0.1, 0.2)]
    radii = [1.0, 0.8, 0.6, 0.7, 0.5]
    checks = []
    for lam in (0.5, 1.0, 2.0):
        # the whole family and the probe domain are dilated together
        family = [bump(dilate(lam, c), r, lam) for c, r in zip(centers, radii)]
        R = cfg["sobolev_R"] * lam
        rep = classical_sobolev_probe(family, R, cfg["sobolev_t"], cfg["sobolev_nodes"])
        checks.append(dict(rep.as_record(), name=f"sobolev_scale_{lam:g}",
                           verdict="pass" if math.isfinite(rep.value) else "fail"))
    return checks


SUITE_FUNCS = {
    "eikonal": _suite_eikonal,
    "ubound": _suite_ubound,
    "sg": _suite_sg,
    "lsq": _suite_lsq,
    "sweep": _suite_sweep,
    "tails": _suite_tails,
    "dlr": _suite_dlr,
    "sobolev": _suite_sobolev,
}


def overall_verdict(checks: List[dict]) -> str:
    verdicts = [c["verdict"] for c in checks]
    if "fail" in verdicts:
        return "fail"
    if verdicts and all(v == "inconclusive" for v in verdicts):
        return "inconclusive"
    return "pass"


def cmd_verify(suite: str, cfg: dict, out_dir: str) -> int:
    checks = SUITE_FUNCS[suite](cfg)
    verdict = overall_verdict(checks)
    path = write_report(out_dir, f"verify_{suite}.json", _envelope("verify", cfg, suite=suite, checks=checks,
                                                                    verdict=verdict))
    print(f"verify {suite}: {verdict} -> {path}")
    return {"pass": EXIT_OK, "fail": EXIT_FAIL, "inconclusive": EXIT_INCONCLUSIVE}[verdict]


# --------------------------------------------------------------------------
# sampling


def cmd_sample(target: str, cfg: dict, out_dir: str) -> int:
    from .cc_distance import distance
    from .stats import autocorrelation_time

    if target == "site":
        from .single_site import BoundarySummary, partition_quadrature, sample_exact, sample_reduced, sample_site, _rng

        spec = _potential(cfg)
        b = BoundarySummary.constant(cfg["S"], spec.N)
        if cfg["sampler"] == "mh":
            batch = sample_site(spec, b, _phi(cfg), n=cfg["n"], seed=cfg["seed"], n_burnin=cfg["burnin"],
                                thin=cfg["thin"])
            pts = batch.points
            d = np.asarray(distance(pts)).reshape(batch.n_chains, -1)
            tau = autocorrelation_time(d)
            diag = {"sampler": "mh", "acceptance_rate": batch.acceptance_rate, "sigma": batch.sigma,
                    "autocorrelation_time": tau, "flagged": batch.flagged}
            flagged = batch.flagged or tau > d.shape[1] / 10
        else:
            if spec.theta:
                nb = np.repeat(b.neighbors[None], cfg["n"], axis=0)
                pts = sample_exact(spec, nb, _rng(cfg["seed"], 2), _phi(cfg))
            else:
                pts = sample_reduced(spec, cfg["S"], cfg["n"], cfg["seed"])
            diag = {"sampler": "exact", "acceptance_rate": 1.0, "autocorrelation_time": 1.0}
            flagged = False
        d = np.asarray(distance(pts))
        diag["moments"] = {"d^1": float(d.mean()), "d^2": float((d * d).mean()), "d^p": float((d ** spec.p).mean())}
        quad = partition_quadrature(spec, b, _phi(cfg))
        diag["quadrature_moments"] = quad.moments
        diag["Z"] = quad.Z
        csv_path = write_csv(out_dir, "sample_site.csv", ["x1", "x2", "x3"], pts.tolist())
    else:
        from .lattice_gibbs import run_chain

        lat, inter = _lattice(cfg)
        pot = _potential(cfg)
        chain = run_chain(lat, inter, pot, _boundary(cfg, lat), cfg["sweeps"], cfg["replicas"], cfg["seed"],
                          burnin=cfg["sweep_burnin"], thin=cfg["thin"])
        X = chain.samples[:, : lat.n_interior]
        rows = []
        for k, conf in enumerate(X):
            for s, site in enumerate(lat.interior):
                ij = list(site) + [0] * (2 - len(site))
                rows.append([k, ij[0], ij[1], conf[s, 0], conf[s, 1], conf[s, 2]])
        csv_path = write_csv(out_dir, "sample_lattice.csv", ["sample", "site_i", "site_j", "x1", "x2", "x3"], rows)
        d = np.asarray(distance(X))
        diag = {"autocorrelation_time": chain.tau, "non_mixing": chain.non_mixing, "n_kept": chain.n_kept,
                "n_replicas": chain.n_replicas, "mean_d_per_site": d.mean(axis=0)}
        flagged = chain.non_mixing
    verdict = "inconclusive" if flagged else "pass"
    path = write_report(out_dir, f"sample_{target}.json", _envelope("sample", cfg, target=target, diagnostics=diag,
                                                                     verdict=verdict, csv=os.path.basename(csv_path)))
    print(f"sample {target}: {verdict} -> {csv_path}, {path}")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file, or a JSON report to rerun")
    common.add_argument("--seed", type=int, help="overrides the config seed (unsigned 64-bit)")
    common.add_argument("--out", default=".", help="output directory")
    parser = _Parser(prog="subriemann-gibbs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    d = sub.add_parser("distance", parents=[common], help="CC distances of the points in a CSV file")
    d.add_argument("points", nargs="?", help="CSV of x1,x2,x3 rows")
    v = sub.add_parser("verify", parents=[common], help="run an estimator battery")
    v.add_argument("suite", choices=SUITES)
    s = sub.add_parser("sample", parents=[common], help="dump samples with diagnostics")
    s.add_argument("target", choices=("site", "lattice"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        explicit = load_config(args.config)
        if args.command == "distance" and args.points:
            explicit["points"] = os.path.abspath(args.points)
        cfg = materialise(explicit, args.seed)
        if args.command == "distance":
            return cmd_distance(cfg, args.out)
        if args.command == "verify":
            return cmd_verify(args.suite, cfg, args.out)
        return cmd_sample(args.target, cfg, args.out)
    except ValueError as exc:
        # ConfigError and PotentialSpec/LatticeSpec validation errors are both invalid configurations
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
