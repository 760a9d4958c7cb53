"""Command-line interface: ``trial``, ``sweep``, ``bounds``, ``calibrate``, ``replay``.

Each subcommand reads an optional ``--config`` file (see :mod:`dyncausal.config`)
and then applies ``--key value`` overrides.  Exit status is 0 on success,
2 for configuration or argument errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from . import __version__
from . import config as cfgmod
from .bounds import bounds_report, to_steps
from .detect import run_sequential, write_events_jsonl
from .errors import ConfigurationError, InvalidArgumentError
from .harness import emit_outputs, json_safe, run_sweep, run_trial
from .simulate import generate_stream, load_stream, save_stream

log = logging.getLogger("dyncausal")


def _add_config_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    for key, (group, typ) in sorted(cfgmod.key_types().items()):
        p.add_argument(f"--{key}", dest=f"opt_{key}", metavar=typ.__name__.upper(),
                       help=f"[{group}] override '{key}'")


def _collect(args):
    values = cfgmod.load(args.config) if args.config else {}
    types = cfgmod.key_types()
    for key, (_, typ) in types.items():
        raw = getattr(args, f"opt_{key}", None)
        if raw is not None:
            values[key] = cfgmod.convert(key, raw, typ)
    return values, cfgmod.build(values)


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    raise TypeError(f"not serializable: {type(x).__name__}")


def _print_json(obj):
    print(json.dumps(obj, indent=2, default=_json_default, allow_nan=False))


def cmd_trial(args):
    _, objs = _collect(args)
    sim = objs["sim"]
    if args.save_stream:
        batches, truth = generate_stream(sim)
        save_stream(args.save_stream, batches, truth, sim)
    result = run_trial(sim, objs["solver"], objs["edge"], detector_cfg=objs["detector"],
                       protocol=objs["protocol"])
    if args.events:
        write_events_jsonl(args.events, result.events)
    out = result.to_dict(with_events=args.with_events)
    out["tau_ub"] = result.tau_ub
    _print_json(json_safe(out))
    return 0


def cmd_sweep(args):
    _, objs = _collect(args)
    spec = cfgmod.sweep_spec(objs)
    out = objs["output"]
    progress = None
    if args.progress:
        progress = lambda i, n: print(f"\r{i}/{n} trials", end="\n" if i == n else "",
                                      file=sys.stderr, flush=True)
    summary = run_sweep(spec, workers=out["workers"], progress=progress)
    paths = emit_outputs(summary, out["out_dir"], out["stem"] or f"sweep_{spec.axis}")
    _print_json(paths)
    return 0


def cmd_bounds(args):
    values, objs = _collect(args)
    sim, protocol = objs["sim"], objs["protocol"]
    Delta = args.Delta if args.Delta is not None else sim.delta
    rep = bounds_report(sim.sigma, Delta, protocol.far_alpha, sim.n, sim.delta,
                        eta=args.eta, mu=args.mu, c=args.c, c_prime=args.c_prime,
                        C1=args.C1, C2=args.C2, beta=args.beta)
    out = rep.to_dict()
    out["tau_lb_steps"] = to_steps(rep.tau_lb, sim.n_batch)
    out["tau_lb_scaled_steps"] = to_steps(rep.tau_lb_scaled, sim.n_batch)
    out["n_batch"] = sim.n_batch
    _print_json(json_safe(out))
    return 0


def cmd_calibrate(args):
    _, objs = _collect(args)
    sim, protocol = objs["sim"], objs["protocol"]
    solver = objs["solver"].replace(edge_threshold=sim.edge_threshold)
    start = protocol.monitor_start
    if sim.t_star < start:
        raise ConfigurationError(f"t_star={sim.t_star} must be >= {start} for calibration")
    batches, _ = generate_stream(sim.replace(T=max(start, sim.t_star + 1)))
    _, diag = run_sequential(batches[:start], solver, objs["edge"], mode=sim.mode,
                             detector_cfg=objs["detector"], n_init=protocol.n_init,
                             n_calib=protocol.n_calib, horizon=sim.t_star - start + 1,
                             far_alpha=protocol.far_alpha, n_boot=protocol.n_boot, seed=sim.seed)
    _print_json({"c": diag.c, "eta": diag.eta, "alpha": protocol.far_alpha,
                 "horizon": sim.t_star - start + 1, "n_calib": protocol.n_calib,
                 "seed": sim.seed})
    return 0


def cmd_replay(args):
    values, objs = _collect(args)
    batches, truth, stored = load_stream(args.stream)
    sim = stored if stored is not None else objs["sim"]
    mode = values.get("mode", sim.mode)
    eps = values.get("delta", sim.delta) / 2.0
    protocol = objs["protocol"]
    solver = objs["solver"].replace(edge_threshold=eps)
    cusum = None
    if args.c is not None or args.eta is not None:
        if args.c is None or args.eta is None:
            raise ConfigurationError("--c and --eta must be given together")
        cusum = (args.c, args.eta)
    horizon = max(1, (sim.t_star if sim is not None else len(batches)) - protocol.monitor_start + 1)
    events, diag = run_sequential(batches, solver, objs["edge"], cusum, mode=mode,
                                  detector_cfg=objs["detector"], n_init=protocol.n_init,
                                  n_calib=protocol.n_calib, horizon=horizon,
                                  far_alpha=protocol.far_alpha, n_boot=protocol.n_boot,
                                  seed=sim.seed)
    write_events_jsonl(args.events if args.events else sys.stdout, events)
    log.info("replayed %d batches: %d events, first alarm %s, c=%.6g eta=%.6g",
             len(batches), len(events), diag.first_alarm, diag.c, diag.eta)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dyncausal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trial", help="run one seeded trial; JSON result on stdout")
    _add_config_flags(p)
    p.add_argument("--events", help="write the event log (JSON lines) here")
    p.add_argument("--with-events", action="store_true", help="include events in the JSON result")
    p.add_argument("--save-stream", help="also save the generated stream as JSON")
    p.set_defaults(func=cmd_trial)

    p = sub.add_parser("sweep", help="parameter sweep; writes CSV, JSON manifest and SVG")
    _add_config_flags(p)
    p.add_argument("--progress", action="store_true", help="show trial progress on stderr")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bounds", help="evaluate the delay bounds for the given inputs")
    _add_config_flags(p)
    p.add_argument("--Delta", type=float, help="minimum detectable change (default: delta)")
    p.add_argument("--eta", type=float, help="CUSUM threshold")
    p.add_argument("--mu", type=float, help="expected post-change score")
    p.add_argument("--c", type=float, help="expected pre-change score")
    p.add_argument("--c-prime", type=float, default=0.0, dest="c_prime")
    p.add_argument("--C1", type=float, default=1.0)
    p.add_argument("--C2", type=float, default=1.0)
    p.add_argument("--beta", type=float, help="detection confidence (recorded only)")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("calibrate", help="report the calibrated CUSUM drift and threshold")
    _add_config_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("replay", help="re-run detection on a saved stream; events as JSON lines")
    _add_config_flags(p)
    p.add_argument("stream", help="stream JSON written by 'trial --save-stream'")
    p.add_argument("--events", help="write events here instead of stdout")
    p.add_argument("--c", type=float, help="use this CUSUM drift (skips warm-up calibration)")
    p.add_argument("--eta", type=float, help="use this CUSUM threshold")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"dyncausal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"dyncausal {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
