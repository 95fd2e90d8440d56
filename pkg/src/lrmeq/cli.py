"""Benchmark command line: generate instances, run solvers, compare traces.

Subcommands:

*   ``generate`` -- build a problem family instance and write it to disk,
*   ``solve``    -- run a solver configuration, writing trace.csv and
    summary.json into the output directory,
*   ``compare``  -- align several run summaries into one CSV table,
*   ``verify``   -- run the dense-oracle self-check suite on a tiny
    instance.

Exit codes: 0 success, 2 solver non-convergence (or failed verify),
3 invalid configuration, 4 I/O failure.  ``LRMEQ_OUT`` sets the default
output directory.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time

import numpy as np

from . import geometry as geo
from . import io as inst_io
from . import precond as pc
from . import problems as pb
from .solver_rnlcg import RnlcgOptions, rnlcg_solve
from .solver_rram import RramOptions, rram_solve
from .trunc_cg import TruncationPolicy, truncated_cg_solve

_ENV_OUT = "LRMEQ_OUT"

_CONFIG_DEFAULTS = {
    "solver": "rram",
    "precond": "P2",
    "kron_mode": "metric",
    "rank": 12,
    "r0": 3,
    "r_up": 3,
    "tol": 1e-6,
    "seed": 0,
    "max_iters": 500,
    "adi_shifts": 8,
    "adi_steps": 8,
    "rank_cap": None,
    "check_every": 1,
}


class ConfigError(ValueError):
    pass


def _default_out(name):
    base = os.environ.get(_ENV_OUT, "runs")
    return os.path.join(base, name)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args):
    if args.family == "fd-diffusion":
        inst = pb.gen_fd_diffusion_paper(args.n, alpha=args.alpha, lk=args.lk)
    elif args.family == "stoch-galerkin":
        inst = pb.gen_stoch_galerkin(args.n, args.q, args.p, theta=args.theta)
    elif args.family == "synthetic":
        inst = pb.gen_synthetic(args.m, args.n, args.l, seed=args.seed)
    else:
        raise ConfigError(f"unknown family {args.family!r}")
    out = args.out or _default_out(f"instance-{args.family}")
    manifest = inst_io.export_instance(inst, out)
    print(f"wrote {args.family} instance ({manifest['ell']} terms, "
          f"{manifest['m']}x{manifest['n']}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _load_config(args):
    cfg = dict(_CONFIG_DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(_CONFIG_DEFAULTS) - {"instance", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in _CONFIG_DEFAULTS:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    if args.instance:
        cfg["instance"] = args.instance
    if "instance" not in cfg:
        raise ConfigError("no instance directory given (flag --instance or config)")
    if args.out:
        cfg["out"] = args.out
    cfg.setdefault("out", _default_out("solve"))
    if cfg["solver"] not in ("rnlcg", "rram", "trunc_cg"):
        raise ConfigError(f"unknown solver {cfg['solver']!r}")
    if cfg["precond"] not in ("identity", "P1", "P2", "tangadi"):
        raise ConfigError(f"unknown preconditioner {cfg['precond']!r}")
    return cfg


def _wachspress_for(spec, J):
    a, b = pc.spectral_interval(spec["A"], spec.get("E"))
    c, d = pc.spectral_interval(spec["B"], spec.get("D"))
    return pc.wachspress_shifts(a, b, c, d, J)


def _build_tangent_setup(inst, cfg):
    """Metric and tangent-space preconditioner for the Riemannian solvers."""
    m, n = inst.op.m, inst.op.n
    label = cfg["precond"]
    identity = geo.KroneckerMetric.identity(m, n)
    if label == "identity":
        return identity, pc.IdentityPrecond()
    if label == "tangadi":
        spec = inst.p2 if inst.p2 is not None else inst.p1
        if spec is None or spec["kind"] != "gen_sylv":
            raise ConfigError("tangADI needs a generalized-Sylvester preconditioner spec")
        shifts = _wachspress_for(spec, cfg["adi_shifts"])
        return identity, pc.TangAdiPrecond(
            spec["A"], spec["B"], spec["D"], spec["E"], shifts, cfg["adi_steps"]
        )
    spec = inst.p1 if label == "P1" else inst.p2
    if spec is None:
        raise ConfigError(f"instance provides no {label} preconditioner")
    kind = spec["kind"]
    if kind == "sylv":
        return identity, pc.SylvesterPrecond(spec["A"], spec["B"])
    if kind == "gen_sylv":
        metric = geo.KroneckerMetric(spec["E"], spec["D"])
        return metric, pc.GenSylvesterPrecond(spec["A"], spec["B"], spec["D"], spec["E"])
    if kind == "kron":
        if cfg["kron_mode"] == "metric":
            metric = geo.KroneckerMetric(spec["E"], spec["D"], m=m, n=n)
            return metric, pc.IdentityPrecond()
        return identity, pc.KronPrecond(spec["E"], spec["D"])
    raise ConfigError(f"unsupported preconditioner kind {kind!r}")


def _build_ambient_precond(inst, cfg, norm_F):
    """Ambient preconditioner for truncated CG."""
    label = cfg["precond"]
    if label == "identity":
        return pc.IdentityPrecond()
    spec = inst.p1 if label == "P1" else inst.p2
    if label == "tangadi":
        spec = inst.p2 if inst.p2 is not None else inst.p1
    if spec is None:
        raise ConfigError(f"instance provides no {label} preconditioner")
    kind = spec["kind"]
    if kind == "kron":
        return pc.KronPrecond(spec["E"], spec["D"])
    if kind in ("sylv", "gen_sylv"):
        shifts = _wachspress_for(spec, cfg["adi_shifts"])
        policy = TruncationPolicy.from_tol(cfg["tol"], rank_cap=cfg["rank_cap"])

        def trunc(Z):
            from .trunc_cg import truncate_factored

            out, _ = truncate_factored(
                Z, policy.eps_rel_r, policy.eps_abs_r, norm_F, policy.rank_cap
            )
            return out

        return pc.FadiAmbientPrecond(
            spec["A"], spec["B"], spec.get("D"), spec.get("E"),
            shifts=shifts, steps=cfg["adi_steps"], truncate_fn=trunc,
        )
    raise ConfigError(f"unsupported preconditioner kind {kind!r}")


def run_solve(cfg):
    """Run one solver configuration; returns (summary dict, trace)."""
    inst = inst_io.import_instance(cfg["instance"])
    t0 = time.perf_counter()
    if cfg["solver"] == "rnlcg":
        metric, precond = _build_tangent_setup(inst, cfg)
        opts = RnlcgOptions(
            rank=cfg["rank"], max_iters=cfg["max_iters"], tol=cfg["tol"],
            seed=cfg["seed"], check_every=cfg["check_every"],
        )
        X, trace, status = rnlcg_solve(inst.op, inst.F, opts, metric=metric, precond=precond)
        final_rank = X.r
    elif cfg["solver"] == "rram":
        metric, precond = _build_tangent_setup(inst, cfg)
        opts = RramOptions(
            r0=cfg["r0"], r_up=cfg["r_up"], tol=cfg["tol"], seed=cfg["seed"],
            max_total_iters=cfg["max_iters"],
            inner=RnlcgOptions(rank=cfg["r0"], tol=cfg["tol"], seed=cfg["seed"]),
        )
        X, trace, status = rram_solve(inst.op, inst.F, opts, metric=metric, precond=precond)
        final_rank = X.r
    else:
        norm_F = geo.factored_norm(inst.F)
        precond = _build_ambient_precond(inst, cfg, norm_F)
        policy = TruncationPolicy.from_tol(cfg["tol"], rank_cap=cfg["rank_cap"])
        X, trace, status = truncated_cg_solve(
            inst.op, inst.F, precond, policy, cfg["tol"], cfg["max_iters"]
        )
        final_rank = X.k
    wall = time.perf_counter() - t0
    exact_rows = [r for r in trace.rows if r["res_kind"] == "exact"]
    final_res = exact_rows[-1]["res_rel"] if exact_rows else ""
    summary = {
        "status": status,
        "iters": trace.last()["iter"],
        "final_res": final_res,
        "final_rank": final_rank,
        "wall_s": wall,
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "seed": cfg["seed"],
    }
    return summary, trace


def _solve_one(cfg):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    summary, trace = run_solve(cfg)
    trace.to_csv(os.path.join(out, "trace.csv"))
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"[{cfg['solver']}/{cfg['precond']}] status={summary['status']} "
          f"iters={summary['iters']} res={summary['final_res']} "
          f"rank={summary['final_rank']} -> {out}")
    return 0 if summary["status"] == "converged" else 2


def cmd_solve(args):
    if args.configs:
        cfgs = []
        for path in args.configs:
            with open(path) as fh:
                file_cfg = json.load(fh)
            cfg = dict(_CONFIG_DEFAULTS)
            cfg.update(file_cfg)
            if "instance" not in cfg:
                raise ConfigError(f"{path}: missing instance")
            cfg.setdefault("out", _default_out(os.path.splitext(os.path.basename(path))[0]))
            cfgs.append(cfg)
        if args.jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as ex:
                codes = list(ex.map(_solve_one, cfgs))
        else:
            codes = [_solve_one(c) for c in cfgs]
        return max(codes)
    cfg = _load_config(args)
    return _solve_one(cfg)


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def cmd_compare(args):
    if len(args.summaries) < 2:
        raise ConfigError("compare needs at least two run summaries")
    rows = []
    for path in args.summaries:
        with open(path) as fh:
            s = json.load(fh)
        cfg = s.get("config", {})
        rows.append(
            [cfg.get("solver", ""), cfg.get("precond", ""), s["iters"],
             s["wall_s"], s["final_rank"], s["final_res"]]
        )
    header = ["solver", "precond", "iters", "time_s", "final_rank", "final_res"]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        print(f"wrote comparison table to {args.out}")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(_args):
    """Dense-oracle self-checks on tiny seeded instances."""
    rng = np.random.default_rng(0)
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1

    def rand_spd(k):
        Q, _ = np.linalg.qr(rng.standard_normal((k, k)))
        return Q @ np.diag(np.geomspace(1.0, 10.0, k)) @ Q.T

    m, n, r = 8, 7, 2
    E, D = rand_spd(m), rand_spd(n)
    met = geo.KroneckerMetric(E, D)
    Z = rng.standard_normal((m, n))
    U, s, V = geo.weighted_svd(Z, met)
    check(
        "weighted SVD reconstruction",
        np.linalg.norm(U @ np.diag(s) @ V.T - Z) <= 1e-12 * np.linalg.norm(Z),
    )
    X = geo.random_point(m, n, r, met, rng)
    xi = geo.project(X, Z)
    xi2 = geo.project(X, xi.embed())
    check(
        "projection idempotence",
        max(np.linalg.norm(xi2.M - xi.M), np.linalg.norm(xi2.Up - xi.Up)) <= 1e-11,
    )
    A, B = rand_spd(m), rand_spd(n)
    eta = geo.project(X, rng.standard_normal((m, n)))
    out = pc.solve_gen_sylvester(X, eta, A, B, D, E)
    dense = out.point.U @ out.M @ out.point.V.T + out.Up @ out.point.V.T + out.point.U @ out.Vp.T
    back = geo.project(X, np.linalg.solve(E, A @ dense) + dense @ B @ np.linalg.inv(D))
    eta_norm = geo.norm(eta)
    check(
        "generalized Sylvester solve forward-check",
        geo.norm(back.plus(eta, -1.0)) <= 1e-9 * eta_norm,
    )
    met_id = geo.KroneckerMetric.identity(m, n)
    Xs = geo.random_point(m, n, r, met_id, rng)
    eta_s = geo.project(Xs, rng.standard_normal((m, n)))
    xi_star = geo.project(Xs, rng.standard_normal((m, n)))
    dense_star = Xs.U @ xi_star.M @ Xs.V.T + xi_star.Up @ Xs.V.T + Xs.U @ xi_star.Vp.T
    PX = geo.project(Xs, A @ dense_star @ D + E @ dense_star @ B)
    sh = pc.ShiftSet(((2.0, -2.0),), (1, 1), (1, 1))
    again = pc.tangadi_apply(Xs, PX, A, B, D, E, sh, steps=80)
    check(
        "tangADI converges to the exact preimage",
        geo.norm(again.plus(xi_star, -1.0)) <= 1e-8 * geo.norm(xi_star),
    )
    inst = pb.gen_synthetic(6, 6, 3, seed=1)
    K = inst.op.dense_kron()
    x = np.linalg.solve(K, inst.F.densify(force=True).reshape(-1, order="F"))
    opts = RnlcgOptions(rank=6, tol=1e-10, max_iters=300)
    kron = pc.KronPrecond(inst.p1["E"], inst.p1["D"])
    Xr, _, status = rnlcg_solve(inst.op, inst.F, opts, precond=kron)
    err = np.linalg.norm(
        Xr.densify(force=True) - x.reshape((6, 6), order="F")
    ) / np.linalg.norm(x)
    check("tiny instance matches dense Kronecker solve", status == "converged" and err <= 1e-7)
    print("verify:", "all checks passed" if failures == 0 else f"{failures} check(s) FAILED")
    return 0 if failures == 0 else 2


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lrmeq",
        description="Low-rank multiterm matrix equation solver benchmark harness",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="generate a problem instance directory")
    g.add_argument("--family", required=True,
                   choices=["fd-diffusion", "stoch-galerkin", "synthetic"])
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--m", type=int, default=6)
    g.add_argument("--alpha", type=float, default=10.0)
    g.add_argument("--lk", type=int, default=3)
    g.add_argument("--q", type=int, default=4)
    g.add_argument("--p", type=int, default=3)
    g.add_argument("--theta", type=float, default=0.55)
    g.add_argument("--l", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="run a solver configuration")
    s.add_argument("configs", nargs="*", help="config JSON files (batch mode)")
    s.add_argument("--config", help="single config JSON, overridden by flags")
    s.add_argument("--instance")
    s.add_argument("--solver", choices=["rnlcg", "rram", "trunc_cg"])
    s.add_argument("--precond", choices=["identity", "P1", "P2", "tangadi"])
    s.add_argument("--kron-mode", dest="kron_mode", choices=["metric", "gradient"])
    s.add_argument("--rank", type=int)
    s.add_argument("--r0", type=int)
    s.add_argument("--r-up", dest="r_up", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-iters", dest="max_iters", type=int)
    s.add_argument("--adi-shifts", dest="adi_shifts", type=int)
    s.add_argument("--adi-steps", dest="adi_steps", type=int)
    s.add_argument("--rank-cap", dest="rank_cap", type=int)
    s.add_argument("--check-every", dest="check_every", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("compare", help="tabulate run summaries")
    c.add_argument("summaries", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="run dense-oracle self-checks")
    v.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
