"""Command-line front end: ``gexpect {expect,represent,simulate,verify,check}``.

Flags override values from ``--config``; every output embeds the fully
resolved configuration so a run can be reproduced from it.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import warnings

from gexpect.config import ConfigError, RunConfig, load_config, parse_controls, parse_times
from gexpect.payoff import PayoffError, PayoffSyntaxError, nested_expectation, parse_payoff

_FLAGS = {
    # flag: (config field, type)
    "--payoff": ("payoff", str),
    "--times": ("times", parse_times),
    "--sigma-bar-sq": ("sigma_bar_sq", float),
    "--sigma-low-sq": ("sigma_low_sq", float),
    "--epsilon": ("epsilon", float),
    "--x-min": ("x_min", float),
    "--x-max": ("x_max", float),
    "--nx": ("nx", int),
    "--nt": ("nt", int),
    "--cfl": ("cfl", float),
    "--steps": ("steps", int),
    "--paths": ("paths", int),
    "--seed": ("seed", int),
    "--controls": ("controls", str),
    "--out": ("out", str),
    "--workers": ("workers", int),
    "--suite": ("suite", str),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (flags override it)")
    for flag, (dest, typ) in _FLAGS.items():
        p.add_argument(flag, dest=dest, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gexpect", description="G-expectations of cylinder payoffs.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("expect", help="E_G[xi] by nested G-heat solves")
    _add_common(p)
    p.add_argument("--dump-surface", action="store_true",
                   help="write the first-interval surface to <out>/surface.csv")
    p = sub.add_parser("represent", help="extract (z, eta, A) along simulated paths")
    _add_common(p)
    p = sub.add_parser("simulate", help="simulate paths and the Monte Carlo sup-estimate")
    _add_common(p)
    p = sub.add_parser("verify", help="run the estimate suite; JSON lines")
    _add_common(p)
    p = sub.add_parser("check", help="parse a payoff and print its canonical form")
    p.add_argument("text", nargs="?", help="payoff expression")
    p.add_argument("--payoff", dest="payoff", default=None)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {dest: getattr(args, dest) for dest, _ in _FLAGS.values()}
    return cfg.with_overrides(**over)


def _out_path(cfg: RunConfig, name: str) -> str | None:
    if cfg.out is None:
        return None
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _solve(cfg: RunConfig):
    cp = cfg.cylinder(warn=True)
    sg = cfg.space_grid(cp.horizon)
    return nested_expectation(cfg.driver(), cp, sg, cfl=cfg.cfl, nt=cfg.nt, workers=cfg.workers)


def _grid_meta(sol) -> dict:
    sg = sol.space_grid
    fams = sol.surfaces
    return {"x_min": sg.x_min, "x_max": sg.x_max, "nx": sg.n_points, "dx": sg.dx,
            "nt": [f.time_grid.n_steps for f in fams]}


def cmd_expect(cfg: RunConfig, dump_surface: bool = False, out=None) -> float:
    out = out if out is not None else sys.stdout
    sol = _solve(cfg)
    meta = _grid_meta(sol)
    print(f"E_G[{sol.payoff.expr.text}] = {sol.value:.6f}", file=out)
    print(f"grid: x in [{meta['x_min']:.6g}, {meta['x_max']:.6g}], nx={meta['nx']}, "
          f"dx={meta['dx']:.6g}, nt={meta['nt']}", file=out)
    path = _out_path(cfg, "expect.json")
    if path:
        _write_json(path, {"value": sol.value, "grid": meta, "config": cfg.resolved()})
    if dump_surface:
        spath = _out_path(cfg, "surface.csv")
        if spath is None:
            raise ConfigError("--dump-surface needs --out")
        sol.surfaces[0].surface(()).to_csv(spath)
    return sol.value


def _controls(cfg: RunConfig, sol):
    from gexpect.simulate import controls_from_spec

    return controls_from_spec(parse_controls(cfg.controls), cfg.driver(), sol.payoff.horizon, sol, cfg.seed)


def cmd_represent(cfg: RunConfig, out=None) -> dict:
    out = out if out is not None else sys.stdout
    from gexpect.represent import check_A_monotone, extract_representation, reconstruction_report
    from gexpect.simulate import counter_normals, payoff_path_grid, sample_paths
    from gexpect.stack import StackEvaluator

    sol = _solve(cfg)
    tg = payoff_path_grid(sol.payoff, cfg.steps)
    Z = counter_normals(cfg.seed, cfg.paths, tg.n_steps, workers=cfg.workers)
    ev = StackEvaluator(sol, tg.times)
    per_control = []
    chosen = None
    for c in _controls(cfg, sol):
        rs = extract_representation(sol, sample_paths(c, tg, cfg.paths, cfg.seed, normals=Z), ev)
        norms = reconstruction_report(rs)
        worst, _, _ = check_A_monotone(rs, 0.0)
        per_control.append({"control": c.name, "residual_l1": norms.l1, "residual_l2": norms.l2,
                            "residual_max": norms.max, "worst_dA": worst,
                            "excluded_paths": rs.n_excluded})
        if chosen is None or c.name == "feedback":
            chosen = (c.name, rs)
    name, rs = chosen
    norms = reconstruction_report(rs)
    worst, _, _ = check_A_monotone(rs, 0.0)
    report = {"expectation": sol.value, "residual_l1": norms.l1, "residual_l2": norms.l2,
              "residual_max": norms.max, "worst_dA": worst, "excluded_paths": rs.n_excluded,
              "control": name, "controls": per_control, "config": cfg.resolved()}
    print(f"E_G[{sol.payoff.expr.text}] = {sol.value:.6f}", file=out)
    for r in per_control:
        print(f"  {r['control']:>14s}: residual l2={r['residual_l2']:.6g} max={r['residual_max']:.6g} "
              f"worst dA={r['worst_dA']:.6g} excluded={r['excluded_paths']}", file=out)
    path = _out_path(cfg, "report.json")
    if path:
        _write_json(path, report)
        rs.to_csv(_out_path(cfg, "representation.csv"))
    return report


def cmd_simulate(cfg: RunConfig, out=None) -> dict:
    out = out if out is not None else sys.stdout
    from gexpect.simulate import mc_expectation, payoff_path_grid, sample_paths

    sol = _solve(cfg)
    cp = sol.payoff
    controls = _controls(cfg, sol)
    tg = payoff_path_grid(cp, cfg.steps)
    res = mc_expectation(cp, controls, cfg.paths, cfg.seed, n_steps=tg.n_steps, workers=cfg.workers)
    summary = {"estimate": res.estimate, "argmax": res.argmax, "stderr": res.stderr,
               "pde_value": sol.value, "records": res.records, "config": cfg.resolved()}
    print(f"MC sup-estimate {res.estimate:.6f} (se {res.stderr:.6f}, {res.argmax}); "
          f"PDE {sol.value:.6f}", file=out)
    path = _out_path(cfg, "mc.json")
    if path:
        _write_json(path, summary)
        best = next(c for c in controls if c.name == res.argmax)
        sample_paths(best, tg, cfg.paths, cfg.seed, workers=cfg.workers).to_csv(_out_path(cfg, "paths.csv"))
    return summary


def cmd_verify(cfg: RunConfig, out=None) -> int:
    """Stream the suite as JSON lines; returns the exit status."""
    out = out if out is not None else sys.stdout
    from gexpect.estimates import default_suite

    path = _out_path(cfg, "verify.jsonl")
    fh = open(path, "w") if path else out
    bad = 0
    try:
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        fh.write(json.dumps({"timestamp": stamp, "config": cfg.resolved()}, sort_keys=True) + "\n")
        for r in default_suite(cfg):
            fh.write(r.to_json() + "\n")
            fh.flush()
            if not r.ok:
                bad += 1
                print(f"unexpected outcome: {r.name} pass={r.passed}", file=sys.stderr)
    finally:
        if path:
            fh.close()
    return 1 if bad else 0


def cmd_check(text: str, out=None) -> int:
    out = out if out is not None else sys.stdout
    try:
        expr = parse_payoff(text, warn=False)
    except PayoffSyntaxError as e:
        print(str(e), file=out)
        return 2
    except PayoffError as e:
        print(f"invalid payoff: {e}", file=out)
        return 2
    print(expr.text, file=out)
    if expr.unbounded:
        print("warning: not globally Lipschitz; results refer to the truncated space domain", file=out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check":
        text = args.text if args.text is not None else args.payoff
        if text is None:
            print("check needs a payoff expression", file=sys.stderr)
            return 2
        return cmd_check(text)
    try:
        cfg = resolve_config(args)
    except (ConfigError, PayoffError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        if args.command == "expect":
            cmd_expect(cfg, dump_surface=args.dump_surface)
        elif args.command == "represent":
            cmd_represent(cfg)
        elif args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "verify":
            return cmd_verify(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
