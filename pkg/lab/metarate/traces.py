"""
Trace and feedback file formats.

Trace CSV: header ``t_s,bandwidth_mbps,prop_delay_ms``, one row per second, UTF-8, LF.
Feedback CSV: header ``t_s,throughput_mbps,loss_ratio,delay_ms`` with an optional
``jitter_ms`` column.
"""
import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence

from .errors import DataError, TraceParseError
from .models import BandwidthEstimate, BandwidthSample, LinkFeedback, NetTrace

logger = logging.getLogger(__name__)

TRACE_HEADER = ["t_s", "bandwidth_mbps", "prop_delay_ms"]
FEEDBACK_HEADER = ["t_s", "throughput_mbps", "loss_ratio", "delay_ms"]
ESTIMATE_HEADER = ["t_s", "b_hat_mbps", "full_pipe"]


def _is_numeric_row(row: Sequence[str]) -> bool:
    try:
        [float(cell) for cell in row]
    except ValueError:
        return False
    return bool(row)


def _chain_first(first, rest):
    yield first
    yield from rest


def _read_rows(path: Path, header: Sequence[str], optional: Sequence[str] = ()):
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            first = next(reader)
        except StopIteration:
            raise TraceParseError(path, 1, "empty file")
        rows = reader
        if _is_numeric_row(first):
            # Headerless file: columns in the documented order.
            columns = [*header, *optional][:len(first)]
            rows = _chain_first(first, reader)
            start = 1
        else:
            columns = [c.strip() for c in first]
            start = 2
        missing = [c for c in header if c not in columns]
        if missing:
            raise TraceParseError(path, 1, f"missing column(s): {', '.join(missing)}")
        index = {c: columns.index(c) for c in [*header, *optional] if c in columns}
        for line_num, row in enumerate(rows, start):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(columns):
                raise TraceParseError(path, line_num, f"expected {len(columns)} fields, got {len(row)}")
            try:
                yield line_num, {c: float(row[i]) for c, i in index.items()}
            except ValueError as e:
                raise TraceParseError(path, line_num, f"not a number: {e}")


def load_trace(path) -> NetTrace:
    """Parse and validate a trace CSV."""
    path = Path(path)
    samples: List[BandwidthSample] = []
    for line_num, row in _read_rows(path, TRACE_HEADER):
        t = row["t_s"]
        if samples and t <= samples[-1].t:
            raise TraceParseError(path, line_num, f"timestamp {t} is not after {samples[-1].t}")
        if samples and abs(t - samples[-1].t - 1.0) > 1e-9:
            raise TraceParseError(path, line_num, f"timestamp {t} breaks the 1 s sample spacing")
        try:
            samples.append(BandwidthSample(t, row["bandwidth_mbps"], row["prop_delay_ms"]))
        except ValueError as e:
            raise TraceParseError(path, line_num, str(e))
    if not samples:
        raise TraceParseError(path, 2, "trace has no samples")
    return NetTrace(samples=tuple(samples), id=path.stem)


def save_trace(trace: NetTrace, path) -> Path:
    """Write a trace CSV; floats use repr so load(save(x)) == x."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for s in trace.samples:
            writer.writerow([repr(float(s.t)), repr(float(s.bandwidth)), repr(float(s.prop_delay))])
    return path


def load_corpus(directory) -> List[NetTrace]:
    """Load every trace CSV in a directory, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"corpus directory not found: {directory}")
    traces = [load_trace(p) for p in sorted(directory.glob("*.csv"))]
    if not traces:
        raise DataError(f"no trace CSV files in {directory}")
    logger.info(f"Loaded {len(traces)} traces from {directory}")
    return traces


def load_feedback(path) -> List[LinkFeedback]:
    path = Path(path)
    out: List[LinkFeedback] = []
    for line_num, row in _read_rows(path, FEEDBACK_HEADER, optional=["jitter_ms"]):
        try:
            out.append(LinkFeedback(
                t=row["t_s"], throughput=row["throughput_mbps"], loss_ratio=row["loss_ratio"],
                delay=row["delay_ms"], delay_jitter=row.get("jitter_ms", 0.0),
            ))
        except ValueError as e:
            raise TraceParseError(path, line_num, str(e))
        if len(out) > 1 and out[-1].t <= out[-2].t:
            raise TraceParseError(path, line_num, "timestamps must increase")
    return out


def save_feedback(feedback: Iterable[LinkFeedback], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([*FEEDBACK_HEADER, "jitter_ms"])
        for fb in feedback:
            writer.writerow([repr(fb.t), repr(fb.throughput), repr(fb.loss_ratio), repr(fb.delay), repr(fb.delay_jitter)])
    return path


def save_estimates(estimates: Iterable[BandwidthEstimate], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ESTIMATE_HEADER)
        for e in estimates:
            writer.writerow([repr(e.t), repr(e.b_hat), int(e.full_pipe)])
    return path
