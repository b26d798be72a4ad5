"""Command-line entry point.

    dmrac simulate --scenario desk-attitude --mode dmrac-adaptive --seed 42 --out t.csv
    dmrac bounds --scenario structured --eps-bar 0.1
    dmrac verify
    dmrac dump-buffer --scenario desk-attitude --out buffer.csv

Exit codes: 0 success, 1 configuration/input error, 2 runtime divergence or
numeric failure, 3 I/O error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import bounds as bnd
from .closed_loop import MODES, run_baseline, run_episode, run_frozen, summarize
from .config import build, load_scenario
from .deepnet import load_network, save_network
from .errors import DmracError, DomainExit, NonFiniteDerivative, ValidationError
from .replay_buffer import dump_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("dmrac")


def _setup_logging():
    level = os.environ.get("DMRAC_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _scenario(args):
    return load_scenario(args.config or args.scenario)


def _radius(setup):
    eps_bar = setup.config.eps_bar
    if eps_bar is None:
        return 0.0
    return bnd.uub_radius(setup.gains.P, setup.gains.Q, eps_bar)


def run_mode(setup, mode, task="train", net=None, parallel=False):
    """Run one episode in ``mode``; returns (trace, trained net or None, buffer or None)."""
    cfg = replace(setup.config.dmrac, mode=mode, parallel_trainer=parallel)
    kw = setup.run_kwargs(task)
    if mode == "dmrac-adaptive":
        return run_episode(cfg, setup.plant, setup.refmodel, setup.gains, setup.net, **kw)
    if mode == "dmrac-frozen":
        return run_frozen(cfg, setup.plant, setup.refmodel, setup.gains, net, **kw), None, None
    if mode == "mrac-fixed-basis":
        if setup.basis is None:
            raise ValidationError("scenario has no [baseline] basis for mrac-fixed-basis")
        return run_baseline(cfg, setup.plant, setup.refmodel, setup.basis_gains, setup.basis, **kw), None, None
    return run_baseline(cfg, setup.plant, setup.refmodel, setup.gains, **kw), None, None


def cmd_simulate(args):
    try:
        c = _scenario(args)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        setup = build(c, **overrides)
        mode = args.mode or c.dmrac.mode
        if mode == "dmrac-frozen" and not args.net:
            raise ValidationError("dmrac-frozen needs --net")
    except (OSError,) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except DmracError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    net = None
    if mode == "dmrac-frozen":
        try:
            net = load_network(args.net)
        except OSError as exc:
            print(f"error: cannot read network file: {exc}", file=sys.stderr)
            return EXIT_IO
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        if net.n != c.n or net.m != c.m:
            print("error: network does not match the plant dimensions", file=sys.stderr)
            return EXIT_CONFIG

    try:
        trace, trained, _ = run_mode(setup, mode, args.task, net, args.parallel_trainer)
    except DomainExit as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NonFiniteDerivative, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except DmracError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = args.out or c.trace_path
    summary_path = args.summary or c.summary_path or (f"{out}.summary.json" if out else None)
    summary = summarize(trace, _radius(setup))
    try:
        if out:
            trace.write_csv(out)
        if summary_path:
            with open(summary_path, "w") as fh:
                json.dump({"scenario": c.name, "mode": mode, "seed": setup.config.dmrac.seed,
                           **summary.to_dict()}, fh, indent=2)
                fh.write("\n")
        if args.save_net and trained is not None:
            save_network(trained, args.save_net)
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{c.name} [{mode}] rows={len(trace)} rms_e={summary.rms_e:.6g} rms_e_final={summary.rms_e_final:.6g}")
    return EXIT_OK


def _empirical_eps_bar(path):
    """max ||delta_true - nu_ad|| over a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty calibration trace")
    m = sum(1 for k in rows[0] if k.startswith("delta_true"))
    worst = 0.0
    for r in rows:
        d = np.array([float(r[f"delta_true{i}"]) - float(r[f"nu_ad{i}"]) for i in range(m)])
        worst = max(worst, float(np.linalg.norm(d)))
    return worst


def cmd_bounds(args):
    try:
        c = _scenario(args)
        setup = build(c)
        label = "configured"
        if args.eps_bar is not None:
            eps_bar, label = args.eps_bar, "user"
        elif args.calibration_trace:
            eps_bar, label = _empirical_eps_bar(args.calibration_trace), "empirical"
        elif c.eps_bar is not None:
            eps_bar = c.eps_bar
        else:
            raise ValidationError("missing eps_bar: pass --eps-bar, --calibration-trace, or set [bounds] eps_bar")
        n_weights = args.n_weights if args.n_weights is not None else setup.net.n_weights()
        report = bnd.bound_report(
            setup.gains.P, setup.gains.Q, eps_bar,
            args.e_norm, args.eps if args.eps is not None else c.eps,
            args.delta if args.delta is not None else c.delta,
            args.k_bits if args.k_bits is not None else c.k_bits, n_weights,
        )
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DmracError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    doc = {"scenario": c.name, "eps_bar_source": label, "n_weights": n_weights, **report.to_dict()}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_suite

    results = run_suite(inject=args.inject_fault)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} invariants hold")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_dump_buffer(args):
    try:
        c = _scenario(args)
        overrides = {"seed": args.seed} if args.seed is not None else {}
        setup = build(c, **overrides)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DmracError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _, _, buffer = run_mode(setup, "dmrac-adaptive")
    except DomainExit as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        dump_csv(buffer, args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(buffer)} buffer entries to {args.out}")
    return EXIT_OK


def _add_scenario_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--scenario", help="built-in scenario name")
    g.add_argument("--config", help="scenario configuration file")


def build_parser():
    parser = argparse.ArgumentParser(prog="dmrac", description="Deep MRAC simulation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one closed-loop episode")
    _add_scenario_args(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="trace CSV path")
    p.add_argument("--summary", help="summary JSON path (default: <out>.summary.json)")
    p.add_argument("--net", help="network weights for dmrac-frozen")
    p.add_argument("--save-net", help="write the trained network (dmrac-adaptive)")
    p.add_argument("--task", choices=("train", "eval"), default="train", help="reference signal to track")
    p.add_argument("--parallel-trainer", action="store_true", help="retrain features on a worker thread")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bounds", help="print stability and sample-complexity bounds")
    _add_scenario_args(p)
    p.add_argument("--eps-bar", type=float, help="approximation error bound")
    p.add_argument("--calibration-trace", help="trace CSV to estimate an empirical eps_bar from")
    p.add_argument("--e-norm", type=float, default=1.0, help="tracking error norm for the generalization bound")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--k-bits", type=int)
    p.add_argument("--n-weights", type=int, help="default: weight count of the scenario network")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--inject-fault", choices=("gradient",), help="debug hook: deliberately break a component")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dump-buffer", help="run an adaptive episode and dump the replay buffer")
    _add_scenario_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_buffer)
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
