#!/usr/bin/env python3
"""
metarate command-line entry point.

Subcommands: estimate, fit-dist, gen-traces, train, run, eval, plot, analyze, calibrate.
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import psutil

# Add the lab directory to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from metarate import __version__
from metarate.config import LabConfig, load_config, save_config_values
from metarate.errors import DataError, LabError, UsageError

logger = logging.getLogger("metarate")

DEFAULT_SEED = 0


# =============================================================================
# ARGUMENT PARSING
# =============================================================================

class LabArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = LabArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="KEY=VALUE configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--jobs", type=int, default=None, help="parallel workers")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = LabArgumentParser(prog="metarate", description="Trace-driven meta-RL bitrate adaptation lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    p = sub.add_parser("estimate", parents=[common], help="bandwidth estimates from feedback")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--feedback", type=Path, help="1 s feedback CSV")
    src.add_argument("--trace", type=Path, help="trace CSV; feedback is simulated with the rule baseline")
    p.add_argument("--retro", action="store_true", help="apply the offline retro adjustment")

    p = sub.add_parser("fit-dist", parents=[common], help="fit the network-state distribution")
    p.add_argument("--corpus", type=Path, required=True, help="directory of trace CSVs")
    p.add_argument("--source", choices=["estimate", "trace"], default="estimate")

    p = sub.add_parser("gen-traces", parents=[common], help="generate synthetic traces from a distribution")
    p.add_argument("--dist", type=Path, required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--length", type=int, default=60, help="seconds per trace")
    p.add_argument("--segment", type=int, default=None,
                   help="seconds per network state; traces switch state every segment")

    p = sub.add_parser("train", parents=[common], help="meta-train theta_0")
    p.add_argument("--dist", type=Path, required=True)
    p.add_argument("--corpus", type=Path, help="trace directory for collected trajectories")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    p = sub.add_parser("run", parents=[common], help="one session on one trace")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--controller", choices=["gcc", "metarate", "metarate-frozen"], default="metarate")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--no-meta-test", action="store_true", help="serve theta_0 only")
    p.add_argument("--packets", action="store_true", help="write the packet log")

    p = sub.add_parser("eval", parents=[common], help="evaluate controllers over a trace set")
    p.add_argument("--traces", type=Path, required=True)
    p.add_argument("--controllers", default="gcc,metarate,metarate-frozen")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per session")
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("plot", parents=[common], help="figures from session CSVs")
    p.add_argument("csv", type=Path, nargs="*")
    p.add_argument("--summary", type=Path)

    p = sub.add_parser("analyze", parents=[common], help="short-term continuity of a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--source", choices=["estimate", "trace"], default="trace")

    p = sub.add_parser("calibrate", parents=[common], help="calibrate the d_prop estimator from a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    return parser


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_estimate(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.bwest import estimate_series
    from metarate.rollout import simulate_feedback
    from metarate.traces import load_feedback, load_trace, save_estimates

    if args.feedback is not None:
        feedback = load_feedback(args.feedback)
        name = args.feedback.stem
    else:
        trace = load_trace(args.trace)
        feedback = simulate_feedback(trace, cfg, cfg.seed)
        name = trace.id
    log = estimate_series(feedback, cfg, retro=args.retro)
    path = save_estimates(log.estimates, args.out / f"{name}.estimates.csv")
    print(f"{len(log.estimates)} estimates written to {path}")
    return [path]


def cmd_fit_dist(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.taskspace import fit_distribution
    from metarate.traces import load_corpus

    dist = fit_distribution(load_corpus(args.corpus), cfg, source=args.source, seed=cfg.seed)
    path = dist.save(args.out / "distribution.json")
    print(f"Distribution over {dist.n_joint_bins} joint bins written to {path}")
    return [path]


def cmd_gen_traces(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.errors import TrajectoryGenerationError
    from metarate.taskspace import TaskDistribution
    from metarate.tracegen import generate_trajectory, switching_trajectory
    from metarate.traces import save_trace

    dist = TaskDistribution.load(args.dist)
    rng = np.random.default_rng(cfg.seed)
    out = args.out / "traces"
    written: List[Path] = []
    attempts = 0
    while len(written) < args.count:
        attempts += 1
        if attempts > 10 * args.count:
            raise DataError(f"only {len(written)} of {args.count} traces could be generated")
        trace_id = f"synthetic_{len(written):04d}"
        try:
            if args.segment:
                n = max(1, args.length // args.segment)
                trace = switching_trajectory([dist.sample(rng) for _ in range(n)], args.segment,
                                             cfg.max_bw_mbps, rng, cfg, trace_id)
            else:
                trace = generate_trajectory(dist.sample(rng), args.length, cfg.max_bw_mbps, rng, cfg, trace_id)
        except TrajectoryGenerationError as e:
            logger.warning(f"Skipping a sampled task: {e}")
            continue
        written.append(save_trace(trace, out / f"{trace_id}.csv"))
    print(f"{len(written)} traces written to {out}")
    return written


def cmd_train(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.meta_rl import load_checkpoint, meta_train
    from metarate.taskspace import TaskDistribution
    from metarate.traces import load_corpus

    dist = TaskDistribution.load(args.dist)
    corpus = load_corpus(args.corpus) if args.corpus else None
    init, start, seed = None, 0, cfg.seed
    if args.resume:
        init, start, seed = load_checkpoint(args.out / "checkpoints")
        print(f"Resuming after round {start} with seed {seed}")
    theta0, report = meta_train(cfg, dist, seed, out_dir=args.out, init=init, start_round=start, corpus=corpus)
    print(f"Trained {len(report.rounds)} rounds; checkpoints in {args.out / 'checkpoints'}")
    return [*sorted((args.out / "checkpoints").glob("*.bin")), args.out / "report.csv"]


def cmd_run(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.experiment import metrics_frame, run_one
    from metarate.models import ControllerKind
    from metarate.policy import load_params
    from metarate.runtime import save_events
    from metarate.simnet import save_packet_log
    from metarate.traces import load_trace

    kind = ControllerKind(args.controller)
    if args.no_meta_test and kind is ControllerKind.METARATE:
        kind = ControllerKind.FROZEN
    theta0 = None
    if kind is not ControllerKind.GCC:
        if args.checkpoint is None:
            raise UsageError(f"--checkpoint is required for controller {kind.value}")
        theta0 = load_params(args.checkpoint)
    trace = load_trace(args.trace)
    result, events = run_one(trace, kind, cfg, cfg.seed, theta0, record_packets=args.packets)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = f"{trace.id}__{kind.value}"
    session_csv = args.out / f"{stem}.csv"
    metrics_frame(result).to_csv(session_csv, index=False)
    artifacts = [session_csv, save_events(events, args.out / f"{stem}.events.csv")]
    if args.packets:
        artifacts.append(save_packet_log(result.packet_log, args.out / f"{stem}.packets.csv"))
    m = result.metrics
    print(f"{stem}: mean reward {result.mean_reward:.3f}, stalling rate {m.stalling_rate:.3f}, "
          f"bitrate jitter {m.bitrate_jitter_per_10min:.3f} Mbps/10min")
    return artifacts


def cmd_eval(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.experiment import eval_suite
    from metarate.models import ControllerKind
    from metarate.traces import load_corpus

    try:
        kinds = [ControllerKind(name.strip()) for name in args.controllers.split(",") if name.strip()]
    except ValueError as e:
        raise UsageError(str(e))
    seeds = [cfg.seed + i for i in range(args.seeds)]
    result = eval_suite(load_corpus(args.traces), kinds, cfg, seeds, args.out, args.checkpoint, cfg.jobs)
    with pd.option_context("display.width", 200, "display.max_columns", 40):
        print(result.summary.to_string(index=False))
    print(f"Manifest: {result.manifest_path}")


def cmd_plot(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.plots import plot

    if not args.csv and args.summary is None:
        raise UsageError("plot needs session CSVs and/or --summary")
    paths = plot(args.csv, args.out / "figures", args.summary)
    print(f"{len(paths)} figures written to {args.out / 'figures'}")
    return paths


def cmd_analyze(args, cfg: LabConfig) -> Optional[List[Path]]:
    from dataclasses import asdict

    from metarate.taskspace import continuity_report, estimated_series, trace_series
    from metarate.traces import load_corpus

    corpus = load_corpus(args.corpus)
    if args.source == "trace":
        series = [trace_series(t) for t in corpus]
    else:
        series = [estimated_series(t, cfg, cfg.seed + i) for i, t in enumerate(corpus)]
    df = pd.DataFrame([asdict(r) for r in continuity_report(series, cfg, delta_ts=(1, cfg.delta_t_s))])
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "continuity.csv"
    df.to_csv(path, index=False, float_format="%.6f")
    print(df.to_string(index=False))
    return [path]


def cmd_calibrate(args, cfg: LabConfig) -> Optional[List[Path]]:
    from metarate.bwest import calibrate_corpus
    from metarate.traces import load_corpus

    sigma, cap = calibrate_corpus(load_corpus(args.corpus), cfg, cfg.seed)
    target = args.config or (args.out / "metarate.env")
    target.parent.mkdir(parents=True, exist_ok=True)
    save_config_values(target, {"dprop_sigma_ms": f"{sigma:.6f}", "dprop_cap_ms": f"{cap:.6f}"})
    print(f"dprop_sigma_ms={sigma:.3f} dprop_cap_ms={cap:.3f} written to {target}")
    return [target]


def _write_manifest(args, cfg: LabConfig, artifacts: List[Path]) -> None:
    from metarate.experiment import write_manifest

    path = write_manifest(args.out, artifacts, cfg, {"command": args.command, "seed": cfg.seed})
    logger.info(f"Manifest of {len(artifacts)} artifacts written to {path}")


COMMANDS = {
    "estimate": cmd_estimate,
    "fit-dist": cmd_fit_dist,
    "gen-traces": cmd_gen_traces,
    "train": cmd_train,
    "run": cmd_run,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "analyze": cmd_analyze,
    "calibrate": cmd_calibrate,
}


# =============================================================================
# MAIN
# =============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=getattr(logging, args.log_level),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        overrides = _parse_overrides(args.set)
        seed = args.seed if args.seed is not None else DEFAULT_SEED
        overrides["seed"] = seed
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        elif "jobs" not in overrides and args.command == "eval":
            overrides["jobs"] = max(1, (psutil.cpu_count(logical=False) or 1) - 1)
        cfg = load_config(args.config, overrides)
        print(f"seed: {cfg.seed}")
        logger.info(f"metarate {__version__} {args.command} (config {cfg.config_hash()[:12]}, jobs {cfg.jobs})")
        artifacts = COMMANDS[args.command](args, cfg)
        if artifacts:
            _write_manifest(args, cfg, artifacts)
        return 0
    except LabError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
