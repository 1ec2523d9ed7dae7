"""Command-line front end.

Exit codes: 0 success or pass, 2 infeasible or failing verdict, 1 operational
error (bad config, missing file, numerical failure).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ProjectConfig, _floats
from .controller import (DifferentialFeedback, GeodesicFeedback, LinearFeedback, MinNormFeedback,
                         TrajectorySource)
from .geodesic import geodesic
from .manifold import ManifoldSpec, check_corollary2
from .metric import (CERTIFICATE_SCOPE, DualMetric, MetricEvaluator, check_ccm_rho,
                     check_ccm_weak, check_killing, verify_bounds)
from .polydyn import PolyMatrix
from .simulate import SimConfig, check_energy_decay, check_envelope, simulate
from .synthesis import (LQRProblem, SynthesisProblem, killing_safe_variables, load_metric_text,
                        monomial_basis, solve_are, synthesize)

logger = logging.getLogger("ccmkit")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class _Run:
    """Per-invocation context: config, output directory and header lines."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.cfg = ProjectConfig.load(args.config)
        if args.out_dir:
            self.out = Path(args.out_dir)
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            self.out = Path("runs") / f"{command}-{stamp}-{os.getpid()}"
        self.out.mkdir(parents=True, exist_ok=True)
        self.rng = np.random.default_rng(args.seed)

    def header(self) -> dict:
        import scipy

        return {"command": self.command, "config": str(self.args.config),
                "config_hash": self.cfg.digest, "seed": self.args.seed,
                "ccmkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__}

    def write(self, name: str, body: str, comment: bool = True) -> Path:
        path = self.out / name
        head = "".join(f"# {k}: {v}\n" for k, v in self.header().items()) if comment else ""
        path.write_text(head + body, encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# helpers


def problem_from_config(cfg: ProjectConfig, grid_scale: float = 1.0) -> SynthesisProblem:
    sys_ = cfg.build_system()
    syn = cfg.synthesis
    wdeg = int(syn.get("W_degree", 2))
    rdeg = int(syn.get("rho_degree", 2))
    wvars = cfg.W_variables()
    if wvars is None:
        wvars = killing_safe_variables(sys_)
    rvars = cfg.rho_variables()
    W_anchor = rho_anchor = None
    if syn.get("anchor", "none").strip().lower() == "lqr":
        Q, R, x0 = cfg.anchor_matrices()
        A, B = sys_.linearize(x0)
        P, _ = solve_are(LQRProblem(A, B, Q, R))
        r = float(R[0, 0])
        if not np.allclose(R, r * np.eye(R.shape[0])):
            raise ConfigError("a scalar multiplier anchor needs R = r * identity")
        W_anchor = (x0, np.linalg.inv(P))
        rho_anchor = (x0, 2.0 / r)
    return SynthesisProblem(
        sys=sys_, lam=cfg.lam, grid=cfg.grid(grid_scale),
        W_basis=monomial_basis(sys_.n, wdeg, wvars),
        rho_basis=monomial_basis(sys_.n, rdeg, rvars),
        margin=float(syn.get("margin", 1e-3)), alpha1=float(syn.get("alpha1", 1e-3)),
        W_anchor=W_anchor, rho_anchor=rho_anchor,
        rho_weight=float(syn.get("rho_weight", 0.1)))


def _load_metric(path, cfg: ProjectConfig, grid_scale: float = 1.0):
    with open(path, encoding="utf-8") as fh:
        W, rho, kv = load_metric_text(fh.read())
    n = cfg.build_system().n
    if W.rows != n:
        raise ConfigError(f"metric is {W.rows}x{W.rows} but the system has n = {n}")
    factor = int(cfg.synthesis.get("verify_factor", 2))
    vgrid = cfg.grid(grid_scale).refined(factor)
    return W, rho, vgrid


def _metric_evaluator(W: PolyMatrix, vgrid) -> MetricEvaluator:
    return MetricEvaluator(DualMetric.certify(W, vgrid))


def _controller(name: str, cfg: ProjectConfig, W, rho, vgrid, traj):
    sys_ = cfg.build_system()
    N = int(cfg.controller.get("N", 32))
    lam = cfg.lam
    if name == "lqr":
        Q, R, x0 = cfg.anchor_matrices()
        A, B = sys_.linearize(x0)
        _, K = solve_are(LQRProblem(A, B, Q, R))
        return LinearFeedback(K, traj), None
    metric = _metric_evaluator(W, vgrid)
    if name == "ccm":
        fb = DifferentialFeedback(sys_, metric, lam, rho=rho, form="strong")
        return GeodesicFeedback(fb, traj, N), metric
    if name == "ccm-sontag":
        fb = DifferentialFeedback(sys_, metric, lam, form="sontag")
        return GeodesicFeedback(fb, traj, N), metric
    if name == "min-norm":
        return MinNormFeedback(sys_, metric, traj, lam, N), metric
    raise ConfigError(f"unknown controller {name!r}")


def _sim_config(cfg: ProjectConfig) -> SimConfig:
    s = cfg.simulation
    return SimConfig(dt=float(s.get("dt", 1e-3)), horizon=float(s.get("horizon", 10.0)),
                     energy_every=int(s.get("energy_every", 10)),
                     geodesic_N=int(cfg.controller.get("N", 32)))


def _target(cfg: ProjectConfig) -> TrajectorySource:
    sys_ = cfg.build_system()
    xs = _floats(cfg.simulation.get("target", ",".join(["0"] * sys_.n)))
    us = _floats(cfg.simulation.get("target_input", ",".join(["0"] * sys_.m))) if sys_.m else []
    return TrajectorySource.equilibrium(xs, us, sys_)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    run = _Run(args, "synth")
    prob = problem_from_config(run.cfg, args.grid_scale)
    res = synthesize(prob, verify_factor=int(run.cfg.synthesis.get("verify_factor", 2)))
    run.write("metric.txt", res.to_text())
    lines = [f"status: {res.status}", f"achieved_margin: {res.achieved_margin!r}",
             f"grid_value: {res.grid_value!r}", f"solve_time: {res.solve_time:.2f}",
             f"scope: {CERTIFICATE_SCOPE}"]
    for rep in res.reports.values():
        lines.append(rep.to_text())
    run.write("synth_report.txt", "\n".join(lines) + "\n")
    print(f"synthesis {res.status}; margin {res.achieved_margin:.4g}; wrote {run.out}")
    return EXIT_OK if res.status == "feasible" else EXIT_FAIL


def cmd_verify(args) -> int:
    run = _Run(args, "verify")
    if not args.metric:
        raise ConfigError("verify needs --metric")
    W, rho, vgrid = _load_metric(args.metric, run.cfg, args.grid_scale)
    sys_ = run.cfg.build_system()
    lam = run.cfg.lam
    lo, hi = verify_bounds(W, vgrid, strict=False)
    verdicts = {"bounds": lo > 0}
    lines = [f"scope: {CERTIFICATE_SCOPE}", f"alpha1: {lo!r}", f"alpha2: {hi!r}"]
    weak = check_ccm_weak(sys_, W, lam, vgrid)
    verdicts["ccm_weak"] = weak.passed
    lines.append(weak.to_text())
    if not rho.rho.is_zero():
        strong = check_ccm_rho(sys_, W, rho, lam, vgrid)
        verdicts["ccm_rho"] = strong.passed
        lines.append(strong.to_text())
    else:
        lines.append("ccm_rho: skipped (zero multiplier)")
    kil = check_killing(sys_, W, vgrid)
    verdicts["killing"] = kil.passed
    lines.append(kil.to_text())
    lines += [f"verdict_{k}: {'pass' if v else 'fail'}" for k, v in verdicts.items()]
    run.write("verify_report.txt", "\n".join(lines) + "\n")
    ok = all(verdicts.values())
    print(("PASS" if ok else "FAIL") + " " + ", ".join(f"{k}={'ok' if v else 'fail'}"
                                                       for k, v in verdicts.items()))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_geodesic(args) -> int:
    run = _Run(args, "geodesic")
    if not args.metric:
        raise ConfigError("geodesic needs --metric")
    W, _, vgrid = _load_metric(args.metric, run.cfg, args.grid_scale)
    n = W.rows
    xs = _floats(args.x_star) if args.x_star else np.zeros(n)
    if not args.x:
        raise ConfigError("geodesic needs --x")
    x = _floats(args.x)
    if xs.size != n or x.size != n:
        raise ConfigError("endpoint dimension mismatch")
    metric = _metric_evaluator(W, vgrid)
    g = geodesic(xs, x, metric, int(run.cfg.controller.get("N", 32)), check_cut_locus=True,
                 seed=args.seed)
    run.write("geodesic.csv", g.to_csv(metric))
    run.write("geodesic_summary.txt",
              f"energy: {g.energy!r}\nlength: {g.length!r}\nconverged: {g.converged}\n"
              f"speed_variation: {g.speed_variation!r}\nnear_cut_locus: {g.near_cut_locus}\n")
    print(f"E = {g.energy:.6g}, L = {g.length:.6g}, converged = {g.converged}")
    return EXIT_OK if g.converged else EXIT_FAIL


def _simulate_all(run: _Run, name: str, W, rho, vgrid, tag: str | None = None):
    cfg = run.cfg
    sys_ = cfg.build_system()
    traj = _target(cfg)
    scfg = _sim_config(cfg)
    out = []
    for i, x0 in enumerate(cfg.x0_list()):
        ctl, metric = _controller(name, cfg, W, rho, vgrid, traj)
        R = None
        if metric is not None:
            src = metric.source
            R = float(np.sqrt(src.alpha2 / src.alpha1))
        tr = simulate(sys_, ctl, traj, x0, scfg, metric=metric, lam=cfg.lam, R=R)
        stem = f"{tag or name}_x0_{i}"
        run.write(f"{stem}.csv", tr.to_csv({"controller": name, "x0": list(map(float, x0))}))
        out.append((x0, tr, R))
    return out


def cmd_simulate(args) -> int:
    run = _Run(args, "simulate")
    name = args.controller
    W = rho = vgrid = None
    if name != "lqr":
        if not args.metric:
            raise ConfigError("simulate needs --metric for geodesic controllers")
        W, rho, vgrid = _load_metric(args.metric, run.cfg, args.grid_scale)
    results = _simulate_all(run, name, W, rho, vgrid)
    lines, ok = [], True
    for x0, tr, R in results:
        row = f"x0={list(map(float, x0))} diverged={tr.diverged} final_norm={np.linalg.norm(tr.errors[-1]):.4g}"
        if R is not None and not tr.diverged:
            env = check_envelope(tr, run.cfg.lam, R)
            dec = check_energy_decay(tr, run.cfg.lam)
            row += (f" envelope_violations={env.violations} energy_violations={dec.violations}"
                    f" energy_max_ratio={dec.max_ratio:.4f}")
            ok &= env.violations == 0 and dec.violations == 0
        ok &= not tr.diverged
        lines.append(row)
    run.write("simulate_summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_compare(args) -> int:
    run = _Run(args, "compare")
    if not args.metric:
        raise ConfigError("compare needs --metric")
    W, rho, vgrid = _load_metric(args.metric, run.cfg, args.grid_scale)
    ccm = _simulate_all(run, "ccm", W, rho, vgrid)
    lqr = _simulate_all(run, "lqr", W, rho, vgrid)
    table = ["x0 | ccm | ccm_final_norm | lqr | lqr_final_norm"]
    for i, ((x0, tc, _), (_, tl, _)) in enumerate(zip(ccm, lqr)):
        vc = "diverged" if tc.diverged else "converged"
        vl = "diverged" if tl.diverged else "converged"
        table.append(f"{list(map(float, x0))} | {vc} | {np.linalg.norm(tc.errors[-1]):.4g} | "
                     f"{vl} | {np.linalg.norm(tl.errors[-1]):.4g}")
        for tag, tr in (("ccm", tc), ("lqr", tl)):
            for j in range(tr.states.shape[1]):
                body = "".join(f"{t!r} {v!r}\n" for t, v in zip(tr.times, tr.states[:, j]))
                run.write(f"panel_x0_{i}_{tag}_x{j + 1}.dat", body)
    run.write("compare_verdicts.txt", "\n".join(table) + "\n")
    print("\n".join(table))
    return EXIT_OK


def cmd_manifold_check(args) -> int:
    run = _Run(args, "manifold-check")
    cfg = run.cfg
    sys_ = cfg.build_system()
    man = cfg.manifold
    if "z" not in man:
        raise ConfigError("manifold-check needs a [manifold] section with z")
    z = [p.strip().strip("\"'") for p in man["z"].split(";") if p.strip()]
    spec = ManifoldSpec.from_strings(z, sys_.n, _floats(man.get("c", "0")))
    lam = float(man.get("lambda", cfg.lam))
    if args.metric:
        W, _, _ = _load_metric(args.metric, cfg, args.grid_scale)
    else:
        W = PolyMatrix.identity(sys_.n, sys_.n)
    rep = check_corollary2(sys_, spec, W, lam, cfg.grid(args.grid_scale))
    run.write("manifold_report.txt", rep.to_text() + f"\nscope: {CERTIFICATE_SCOPE}\n")
    print(f"max eigenvalue {rep.max_eig:.6g} at {rep.worst_point}: "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


COMMANDS = {"synth": cmd_synth, "verify": cmd_verify, "geodesic": cmd_geodesic,
            "simulate": cmd_simulate, "compare": cmd_compare,
            "manifold-check": cmd_manifold_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccmkit", description="Control contraction metric toolkit")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--metric")
        s.add_argument("--out-dir")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--grid-scale", type=float, default=1.0)
        if name == "simulate":
            s.add_argument("--controller", default="ccm",
                           choices=["ccm", "ccm-sontag", "lqr", "min-norm"])
        if name == "geodesic":
            s.add_argument("--x-star")
            s.add_argument("--x")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.grid_scale <= 0:
        print("error: --grid-scale must be positive", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
    except (ConfigError, ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
