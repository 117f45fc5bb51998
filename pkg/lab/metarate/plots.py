"""
Static figures from harness outputs: per-session timelines and summary bar charts.
"""
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import PlotError  # noqa: E402

logger = logging.getLogger(__name__)

TIMELINE_COLUMNS = ("t", "bandwidth", "target_bitrate", "rtt")
BAR_METRICS = ("reward", "throughput", "rtt", "stalling_rate", "bitrate_jitter_10min")


def _read(path: Path, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise PlotError(f"{path}: file not found")
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise PlotError(f"{path}: CSV is empty")
    if df.empty:
        raise PlotError(f"{path}: CSV has no rows")
    for column in required:
        if column not in df.columns:
            raise PlotError(f"{path}: missing column '{column}'")
    return df


def plot_timeline(csv_path: Path, out_path: Path) -> Path:
    """Three aligned panels: bandwidth vs chosen bitrate, ladder level, RTT."""
    df = _read(csv_path, TIMELINE_COLUMNS)
    fig, axes = plt.subplots(3, 1, figsize=(12, 8), sharex=True)
    axes[0].step(df["t"], df["bandwidth"], where="post", label="bandwidth", color="tab:gray")
    axes[0].set_ylabel("Bandwidth (Mbps)")
    axes[1].plot(df["t"], df["target_bitrate"], label="target bitrate", color="tab:blue")
    axes[1].step(df["t"], df["bandwidth"], where="post", color="tab:gray", alpha=0.4, label="bandwidth")
    axes[1].set_ylabel("Bitrate (Mbps)")
    axes[1].legend(loc="upper right")
    axes[2].plot(df["t"], df["rtt"], color="tab:red")
    axes[2].set_ylabel("RTT (ms)")
    axes[2].set_xlabel("Time (s)")
    fig.suptitle(Path(csv_path).stem)
    plt.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def bar_heights(summary_csv: Path, metric: str) -> Dict[str, float]:
    df = _read(summary_csv, ("controller", f"{metric}_mean"))
    return dict(zip(df["controller"], df[f"{metric}_mean"].astype(float)))


def plot_summary_bars(summary_csv: Path, out_dir: Path, metrics: Sequence[str] = BAR_METRICS) -> List[Path]:
    """One bar chart per metric, mean with std error bars, one bar per controller."""
    required = ["controller", *[f"{m}_mean" for m in metrics], *[f"{m}_std" for m in metrics]]
    df = _read(summary_csv, required)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(df["controller"], df[f"{metric}_mean"], yerr=df[f"{metric}_std"], capsize=4,
               color="tab:blue", alpha=0.8)
        ax.set_ylabel(metric)
        ax.set_title(metric.replace("_", " "))
        plt.tight_layout()
        path = out_dir / f"bar_{metric}.png"
        plt.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot(csv_paths: Sequence[Path], out_dir: Path, summary_csv: Path = None) -> List[Path]:
    """Timelines for each session CSV, plus bar charts when a summary table is given."""
    out_dir = Path(out_dir)
    outputs = [plot_timeline(p, out_dir / f"{Path(p).stem}.png") for p in csv_paths]
    if summary_csv is not None:
        outputs.extend(plot_summary_bars(summary_csv, out_dir))
    logger.info(f"Wrote {len(outputs)} figures to {out_dir}")
    return outputs
