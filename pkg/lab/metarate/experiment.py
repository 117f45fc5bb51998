"""
Evaluation harness: run every (trace, controller, seed) session, write per-second CSVs,
aggregate them into a mean +/- std summary table, and record a manifest of artifacts.

The summary is computed by reading the per-second CSVs back, so every number in it can be
re-derived from files on disk.
"""
import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil

from .config import LabConfig
from .errors import CheckpointError, DataError
from .gcc import GccController
from .models import ControllerKind, NetTrace, SecondMetrics
from .policy import PolicyParams, load_params
from .rollout import SessionResult, run_session
from .runtime import OnlineRuntime, save_events

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [f for f in SecondMetrics.__dataclass_fields__]

# Summary metric -> how one session's value is derived from its per-second CSV.
SUMMARY_METRICS = {
    "throughput": ("throughput", "mean"),
    "rtt": ("rtt", "mean"),
    "loss_rate": ("loss_ratio", "mean"),
    "fps": ("fps", "mean"),
    "stalling_rate": ("stalled", "mean"),
    "frame_delay": ("frame_delay", "mean"),
    "frame_delay_jitter": ("frame_delay_jitter", "mean"),
    "bitrate_jitter_10min": ("bitrate_change", "per_10min"),
    "reward": ("reward", "mean"),
}
SUMMARY_FLOAT_FORMAT = "%.6f"


def make_controller(kind: ControllerKind, cfg: LabConfig, theta0: Optional[PolicyParams], seed: int,
                    corpus: Optional[Sequence[NetTrace]] = None):
    if kind is ControllerKind.GCC:
        return GccController(cfg)
    if theta0 is None:
        raise CheckpointError(f"controller {kind.value} needs a checkpoint")
    return OnlineRuntime(theta0, cfg, meta_test=kind is ControllerKind.METARATE, seed=seed, corpus=corpus)


def run_one(trace: NetTrace, kind: ControllerKind, cfg: LabConfig, seed: int,
            theta0: Optional[PolicyParams] = None, record_packets: bool = False,
            corpus: Optional[Sequence[NetTrace]] = None) -> Tuple[SessionResult, list]:
    """One session; returns the result and the runtime event log (empty for the baseline)."""
    controller = make_controller(kind, cfg, theta0, seed, corpus)
    try:
        result = run_session(trace, controller, cfg, seed=seed, record_packets=record_packets)
    finally:
        if isinstance(controller, OnlineRuntime):
            controller.close()
    events = controller.events if isinstance(controller, OnlineRuntime) else []
    return result, events


def metrics_frame(result: SessionResult) -> pd.DataFrame:
    df = pd.DataFrame([asdict(r) for r in result.metrics.rows], columns=METRIC_COLUMNS)
    df["stalled"] = df["stalled"].astype(int)
    return df


def session_name(trace_id: str, kind: ControllerKind, seed: int) -> str:
    return f"{trace_id}__{kind.value}__s{seed}"


def session_summary(df: pd.DataFrame) -> Dict[str, float]:
    """Session-level values of every summary metric from one per-second table."""
    if df.empty:
        raise DataError("per-second table is empty")
    out = {}
    for name, (column, how) in SUMMARY_METRICS.items():
        if column not in df.columns:
            raise DataError(f"per-second table is missing column '{column}'")
        values = df[column].astype(float)
        out[name] = float(values.sum() * 600.0 / len(values)) if how == "per_10min" else float(values.mean())
    return out


def aggregate(session_csvs: Dict[str, Tuple[str, Path]]) -> pd.DataFrame:
    """
    Summary table from per-second CSVs: one row per controller with mean and std (ddof=0)
    across that controller's sessions. session_csvs maps session name -> (controller, path).
    """
    rows = []
    for name, (controller, path) in sorted(session_csvs.items()):
        summary = session_summary(pd.read_csv(path))
        rows.append({"controller": controller, "session": name, **summary})
    if not rows:
        raise DataError("no sessions to aggregate")
    per_session = pd.DataFrame(rows)
    grouped = per_session.groupby("controller", sort=True)
    table = pd.DataFrame({"sessions": grouped.size()})
    for metric in SUMMARY_METRICS:
        table[f"{metric}_mean"] = grouped[metric].mean()
        table[f"{metric}_std"] = grouped[metric].std(ddof=0)
    return table.reset_index()


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _artifact_path(path: Path, out_dir: Path) -> str:
    try:
        return str(Path(path).relative_to(out_dir))
    except ValueError:
        return str(Path(path).resolve())


def write_manifest(out_dir: Path, artifacts: Sequence[Path], cfg: LabConfig, extra: Optional[dict] = None) -> Path:
    """
    manifest.json: every artifact with its digest, plus the config hash and host resources.
    Artifacts outside out_dir are listed by absolute path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": cfg.config_hash(),
        "artifacts": [{"path": _artifact_path(p, out_dir), "sha256": _sha256(p)}
                      for p in sorted(artifacts)],
        "host": {
            "python": platform.python_version(),
            "cpus": psutil.cpu_count(logical=True),
            "memory_gb": round(psutil.virtual_memory().total / 1024 ** 3, 1),
        },
        **(extra or {}),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


@dataclass
class SuiteResult:
    summary: pd.DataFrame
    summary_path: Path
    session_csvs: Dict[str, Path] = field(default_factory=dict)
    manifest_path: Optional[Path] = None


def _suite_job(args) -> Tuple[str, SessionResult, list]:
    trace, kind, cfg, seed, theta0 = args
    result, events = run_one(trace, kind, cfg, seed, theta0)
    return session_name(trace.id, kind, seed), result, events


def eval_suite(traces: Sequence[NetTrace], controllers: Sequence[ControllerKind], cfg: LabConfig,
               seeds: Sequence[int], out_dir: Path, checkpoint: Optional[Path] = None,
               jobs: int = 1) -> SuiteResult:
    """Run every (trace, controller, seed) session and write CSVs, summary and manifest."""
    out_dir = Path(out_dir)
    learned = [k for k in controllers if k is not ControllerKind.GCC]
    theta0 = None
    if learned:
        if checkpoint is None or not Path(checkpoint).exists():
            raise CheckpointError(f"controllers {', '.join(k.value for k in learned)} need a checkpoint; "
                                  f"not found: {checkpoint}")
        theta0 = load_params(checkpoint)
    if not traces:
        raise DataError("no traces to evaluate")

    jobs_args = [(trace, kind, cfg, seed, theta0) for trace in traces for kind in controllers for seed in seeds]
    logger.info(f"Evaluating {len(jobs_args)} sessions with {jobs} worker(s)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_suite_job, jobs_args))
    else:
        outputs = [_suite_job(a) for a in jobs_args]

    sessions_dir = out_dir / "sessions"
    sessions_dir.mkdir(parents=True, exist_ok=True)
    csvs: Dict[str, Tuple[str, Path]] = {}
    artifacts: List[Path] = []
    for name, result, events in outputs:
        path = sessions_dir / f"{name}.csv"
        metrics_frame(result).to_csv(path, index=False)
        csvs[name] = (result.controller, path)
        artifacts.append(path)
        if events:
            artifacts.append(save_events(events, sessions_dir / f"{name}.events.csv"))

    summary = aggregate(csvs)
    summary_path = out_dir / "summary.csv"
    summary.to_csv(summary_path, index=False, float_format=SUMMARY_FLOAT_FORMAT)
    artifacts.append(summary_path)
    manifest = write_manifest(out_dir, artifacts, cfg, {
        "seeds": list(seeds), "controllers": [k.value for k in controllers],
        "traces": [t.id for t in traces],
    })
    logger.info(f"Summary written to {summary_path}")
    return SuiteResult(summary=summary, summary_path=summary_path,
                       session_csvs={k: v[1] for k, v in csvs.items()}, manifest_path=manifest)


def reward_gap(summary: pd.DataFrame, a: str, b: str) -> float:
    """Relative mean-reward advantage of controller a over b."""
    rewards = summary.set_index("controller")["reward_mean"]
    base = float(rewards[b])
    return (float(rewards[a]) - base) / abs(base) if base else float(np.sign(rewards[a] - base))
