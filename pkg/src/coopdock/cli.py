"""Command-line entry point.

Subcommands:

    run       simulate one scenario config -> run.csv + metrics.json
    compare   run several configs, emit a comparison table vs a baseline
    validate  check a config (incl. the docking-reference conditions)
    demo      run a bundled scenario fixture (s1 or s2)
    plotdata  print summary columns of a run.csv (quick inspection)

Exit codes: 0 success, 2 configuration error, 3 solver failure mid-run
(partial log still written), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .simulate import (
    Metrics,
    docking_time,
    evaluate,
    metrics_json,
    min_separation,
    realized_cost,
    run_closed_loop,
    validate_reference,
    write_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4


def _progress(quiet: bool):
    if quiet:
        return None

    def report(k, total, status, solve_time):
        print(
            f"\rstep {k + 1}/{total}  [{status}, {solve_time:.2f} s]",
            end="",
            file=sys.stderr,
            flush=True,
        )
        if k + 1 == total:
            print(file=sys.stderr)

    return report


def _execute_run(cfg: RunConfig, outdir: Path, quiet: bool) -> tuple[int, Metrics]:
    outdir.mkdir(parents=True, exist_ok=True)
    log = run_closed_loop(
        cfg.scenario,
        cfg.mpc,
        params1=cfg.params1,
        params2=cfg.params2,
        observer_kwargs=cfg.observer,
        progress=_progress(quiet),
    )
    metrics = evaluate(log, cfg.mpc)
    try:
        with open(outdir / "run.csv", "w") as fh:
            write_csv(log, fh)
        with open(outdir / "metrics.json", "w") as fh:
            fh.write(
                metrics_json(metrics, cfg.scenario.name, cfg.scenario.mode.value)
            )
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO, metrics
    if log.error is not None:
        print(f"solver failure: {log.error} (partial log written)", file=sys.stderr)
        return EXIT_SOLVER, metrics
    return EXIT_OK, metrics


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, mode=args.mode, reference=args.ref
        )
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, metrics = _execute_run(cfg, Path(args.out), args.quiet)
    if not args.quiet:
        print(json.dumps(metrics.to_dict(cfg.scenario.name, cfg.scenario.mode.value)))
    return code


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = []
    for rid, ref in cfg.references.items():
        verdict = validate_reference(ref, cfg.mpc.d_min)
        if not verdict:
            problems += [f"reference {rid}: {v}" for v in verdict.violations]
    init = cfg.scenario.q_init
    d0 = float(np.hypot(init[0] - init[6], init[1] - init[7]))
    if d0 < cfg.mpc.d_min:
        problems.append(
            f"initial separation {d0:.3f} m is below d_min {cfg.mpc.d_min:.3f} m"
        )
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.config}: ok ({len(cfg.references)} reference(s) valid)")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = []
    baseline_J = None
    outdir = Path(args.out)
    for path in args.configs:
        try:
            cfg = load_config(path).with_overrides(seed=args.seed)
        except (ConfigError, OSError, ValueError) as exc:
            print(f"config error in {path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        name = Path(path).stem
        code, metrics = _execute_run(cfg, outdir / name, args.quiet)
        if code not in (EXIT_OK, EXIT_SOLVER):
            return code
        rows.append((name, cfg.scenario.mode.value, metrics))
        if name == args.baseline:
            baseline_J = metrics.J_tilde
    if baseline_J is None:
        print(f"baseline id {args.baseline!r} not among runs", file=sys.stderr)
        return EXIT_CONFIG

    header = f"{'run':<24} {'mode':<12} {'dJ~ [%]':>8} {'l1 [m]':>8} {'l2 [m]':>8} {'T [s]':>7}"
    lines = [header, "-" * len(header)]
    csv_lines = ["run,mode,delta_J_rel_pct,l1_m,l2_m,docking_time_s"]
    for name, mode, m in rows:
        gain = 100.0 * (baseline_J - m.J_tilde) / baseline_J
        t_str = f"{m.docking_time:.1f}" if m.docking_time is not None else "--"
        lines.append(
            f"{name:<24} {mode:<12} {gain:8.2f} {m.l1:8.2f} {m.l2:8.2f} {t_str:>7}"
        )
        t_csv = f"{m.docking_time:.12g}" if m.docking_time is not None else ""
        csv_lines.append(f"{name},{mode},{gain:.12g},{m.l1:.12g},{m.l2:.12g},{t_csv}")
    table = "\n".join(lines)
    print(table)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "comparison.csv").write_text("\n".join(csv_lines) + "\n")
        (outdir / "comparison.txt").write_text(table + "\n")
    except OSError as exc:
        print(f"error: cannot write comparison: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def bundled_fixture(demo_id: str) -> Path:
    ref = resources.files("coopdock") / "fixtures" / f"{demo_id}.yaml"
    with resources.as_file(ref) as p:
        return Path(p)


def cmd_demo(args) -> int:
    try:
        path = bundled_fixture(args.id)
    except (FileNotFoundError, ModuleNotFoundError):
        print(f"no bundled fixture {args.id!r}", file=sys.stderr)
        return EXIT_CONFIG
    args.config = str(path)
    return cmd_run(args)


def cmd_plotdata(args) -> int:
    from .simulate import read_csv

    try:
        with open(args.input) as fh:
            data, header, statuses = read_csv(fh)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    t = data[:, 0]
    d12 = np.hypot(data[:, 1] - data[:, 7], data[:, 2] - data[:, 8])
    print(f"records: {len(t)}  span: {t[0]:.1f}..{t[-1]:.1f} s")
    print(f"final separation: {d12[-1]:.3f} m  min: {d12.min():.3f} m")
    print(f"solver statuses: {sorted(set(statuses))}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="coopdock",
        description="Cooperative MPC docking simulations for two surface vehicles",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="scenario YAML file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the RNG seed")
        p.add_argument(
            "--mode",
            choices=["coop", "baseline", "coop-nobias"],
            default=None,
            help="override the controller mode",
        )
        p.add_argument(
            "--ref", choices=["r1", "r2"], default=None, help="select the docking reference"
        )
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_run = sub.add_parser("run", help="simulate one scenario")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several configs and tabulate vs a baseline")
    p_cmp.add_argument("configs", nargs="+", help="scenario YAML files")
    p_cmp.add_argument("--baseline", required=True, help="file stem of the baseline run")
    p_cmp.add_argument("--out", default="out", help="output directory")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--quiet", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate", help="check a config without simulating")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=cmd_validate)

    p_demo = sub.add_parser("demo", help="run a bundled scenario fixture")
    p_demo.add_argument("id", choices=["s1", "s2"], help="bundled scenario id")
    add_common(p_demo, needs_config=False)
    p_demo.set_defaults(func=cmd_demo)

    p_pd = sub.add_parser("plotdata", help="summarize a run.csv")
    p_pd.add_argument("--input", required=True, help="run.csv path")
    p_pd.set_defaults(func=cmd_plotdata)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
