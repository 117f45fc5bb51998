"""
Network-state task space: windowed sequence statistics, task construction, the
activation test, and the task distribution p(Gamma) = p(mu, sigma, omega, Delta) * p(d_prop).
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .config import LabConfig
from .errors import DistributionError
from .models import NetTrace, NetworkState, StateRanges, WindowStats

logger = logging.getLogger(__name__)

DISTRIBUTION_FORMAT_VERSION = 1
# Absolute slack on range comparisons so boundary values in decimal units compare as written
BOUNDARY_EPS = 1e-9
# Joint dimensions: mu, sigma, omega, delta_mu, delta_sigma, delta_omega, delta_dprop
JOINT_DIMS = ("mu", "sigma", "omega", "delta_mu", "delta_sigma", "delta_omega", "delta_dprop")


def window_stats(seq: Sequence[float], d_prop: float, window: int = 8) -> Optional[WindowStats]:
    """
    Mean, population standard deviation and fluctuation (sum of absolute adjacent
    differences) of the last `window` bandwidth estimates. Returns None while warming up.
    """
    if len(seq) < window:
        return None
    x = np.asarray(seq[-window:], dtype=float)
    mu = math.fsum(x) / window
    sigma = math.sqrt(math.fsum((x - mu) ** 2) / window)
    omega = math.fsum(np.abs(np.diff(x)))
    if sigma == 0.0:
        omega = 0.0
    return WindowStats(mu=mu, sigma=sigma, omega=omega, d_prop=float(d_prop), window_len=window)


def make_task(stats_now: WindowStats, stats_then: Optional[WindowStats],
              min_delta: Tuple[float, float, float, float] = (0.2, 0.2, 2.0, 3.0)) -> NetworkState:
    now = stats_now.as_tuple()
    then = stats_then.as_tuple() if stats_then is not None else now
    delta = tuple(max(abs(a - b), floor) for a, b, floor in zip(now, then, min_delta))
    return NetworkState(mu=now[0], sigma=now[1], omega=now[2], d_prop=now[3], delta=StateRanges(*delta))


def should_activate(current: WindowStats, task: NetworkState) -> bool:
    """Fire when any attribute drifts more than half its range from the task center."""
    return any(
        abs(c - center) > half + BOUNDARY_EPS
        for c, center, half in zip(current.as_tuple(), task.center(),
                                   (d / 2.0 for d in task.delta.as_tuple()))
    )


def within_box(stats: WindowStats, task: NetworkState, include_dprop: bool = False) -> bool:
    checks = [
        abs(stats.mu - task.mu) <= task.delta.mu + BOUNDARY_EPS,
        abs(stats.sigma - task.sigma) <= task.delta.sigma + BOUNDARY_EPS,
        abs(stats.omega - task.omega) <= task.delta.omega + BOUNDARY_EPS,
    ]
    if include_dprop:
        checks.append(abs(stats.d_prop - task.d_prop) <= task.delta.dprop + BOUNDARY_EPS)
    return all(checks)


def sliding_stats(series: Sequence[float], dprop: Sequence[float], window: int) -> List[WindowStats]:
    """WindowStats for every window position (1 s stride); dprop aligned with series."""
    return [
        window_stats(series[end - window:end], dprop[end - 1], window)
        for end in range(window, len(series) + 1)
    ]


class _Histogram(BaseModel):
    """Sparse histogram with the observed extent of every occupied bin."""
    widths: List[float]
    bins: List[List[int]]
    mass: List[float]
    lo: List[List[float]]
    hi: List[List[float]]


class TaskDistribution:
    """
    Piecewise-constant density over binned task keys. Sampling picks a bin proportionally
    to its mass, then a point uniformly within the observed extent of that bin.
    """

    def __init__(self, joint: _Histogram, dprop: _Histogram, min_delta: Tuple[float, ...]):
        self.joint = joint
        self.dprop = dprop
        self.min_delta = tuple(min_delta)
        self._joint_bins = np.asarray(joint.bins, dtype=np.int64)
        self._joint_mass = np.asarray(joint.mass, dtype=float)
        self._joint_lo = np.asarray(joint.lo, dtype=float)
        self._joint_hi = np.asarray(joint.hi, dtype=float)
        self._dprop_mass = np.asarray(dprop.mass, dtype=float)
        self._dprop_lo = np.asarray(dprop.lo, dtype=float)
        self._dprop_hi = np.asarray(dprop.hi, dtype=float)

    @staticmethod
    def _histogram(values: np.ndarray, widths: Sequence[float]) -> _Histogram:
        idx = np.floor(values / np.asarray(widths)).astype(np.int64)
        keys, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        lo = np.full((len(keys), values.shape[1]), np.inf)
        hi = np.full((len(keys), values.shape[1]), -np.inf)
        np.minimum.at(lo, inverse, values)
        np.maximum.at(hi, inverse, values)
        return _Histogram(
            widths=[float(w) for w in widths], bins=keys.tolist(),
            mass=(counts / counts.sum()).tolist(), lo=lo.tolist(), hi=hi.tolist(),
        )

    @classmethod
    def from_observations(cls, observations: np.ndarray, cfg: LabConfig) -> "TaskDistribution":
        """
        observations: rows of (mu, sigma, omega, d_prop, dmu, dsigma, domega, ddprop) with the
        Delta columns already floored at Delta'.
        """
        obs = np.asarray(observations, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != 8 or len(obs) == 0:
            raise DistributionError("need at least one 8-column observation to fit a distribution")
        joint_values = obs[:, [0, 1, 2, 4, 5, 6, 7]]
        widths = [cfg.bin_mu, cfg.bin_sigma, cfg.bin_omega,
                  cfg.min_delta_mu / 2, cfg.min_delta_sigma / 2, cfg.min_delta_omega / 2,
                  cfg.min_delta_dprop / 2]
        joint = cls._histogram(joint_values, widths)
        dprop = cls._histogram(obs[:, [3]], [cfg.bin_dprop])
        logger.info(f"Fitted task distribution: {len(joint.bins)} joint bins, "
                    f"{len(dprop.bins)} d_prop bins from {len(obs)} windows")
        return cls(joint, dprop, cfg.min_delta)

    @property
    def n_joint_bins(self) -> int:
        return len(self._joint_mass)

    def joint_bin_of(self, task: NetworkState) -> Tuple[int, ...]:
        values = np.array([task.mu, task.sigma, task.omega, *task.delta.as_tuple()])
        return tuple(np.floor(values / np.asarray(self.joint.widths)).astype(np.int64).tolist())

    def sample(self, rng: np.random.Generator) -> NetworkState:
        j = rng.choice(len(self._joint_mass), p=self._joint_mass)
        joint = self._uniform(rng, self._joint_lo[j], self._joint_hi[j])
        k = rng.choice(len(self._dprop_mass), p=self._dprop_mass)
        d_prop = float(self._uniform(rng, self._dprop_lo[k], self._dprop_hi[k])[0])
        deltas = [max(v, floor) for v, floor in zip(joint[3:], self.min_delta)]
        return NetworkState(mu=float(joint[0]), sigma=float(joint[1]), omega=float(joint[2]),
                            d_prop=d_prop, delta=StateRanges(*map(float, deltas)))

    @staticmethod
    def _uniform(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        u = rng.random(len(lo))
        return np.where(hi > lo, lo + u * (hi - lo), lo)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": DISTRIBUTION_FORMAT_VERSION,
            "joint_dims": list(JOINT_DIMS),
            "min_delta": list(self.min_delta),
            "joint": self.joint.model_dump(),
            "dprop": self.dprop.model_dump(),
        }
        path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "TaskDistribution":
        path = Path(path)
        if not path.exists():
            raise DistributionError(f"distribution file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DistributionError(f"{path}: not a distribution file ({e})")
        if payload.get("format_version") != DISTRIBUTION_FORMAT_VERSION:
            raise DistributionError(f"{path}: unsupported format version {payload.get('format_version')}")
        return cls(_Histogram(**payload["joint"]), _Histogram(**payload["dprop"]), payload["min_delta"])


def observations_from_series(b_hat: Sequence[float], dprop: Sequence[float], cfg: LabConfig) -> np.ndarray:
    """
    Slide W_r at 1 s over one series and emit (stats, Delta_t over delta_t_s) rows.
    Windows without a predecessor delta_t_s earlier are skipped.
    """
    stats = sliding_stats(b_hat, dprop, cfg.window_s)
    lag = cfg.delta_t_s
    rows = []
    for i in range(lag, len(stats)):
        now, then = stats[i], stats[i - lag]
        task = make_task(now, then, cfg.min_delta)
        rows.append([*now.as_tuple(), *task.delta.as_tuple()])
    return np.asarray(rows, dtype=float).reshape(-1, 8)


def trace_series(trace: NetTrace) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-truth bandwidth and the round-trip propagation floor (2x one-way)."""
    return np.asarray(trace.bandwidths), 2.0 * np.asarray(trace.prop_delays)


def estimated_series(trace: NetTrace, cfg: LabConfig, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """b_hat and d_prop from a rule-driven simulated session on the trace, retro-adjusted."""
    from .bwest import estimate_series
    from .rollout import simulate_feedback

    feedback = simulate_feedback(trace, cfg, seed)
    log = estimate_series(feedback, cfg, retro=True)
    return log.b_hat(), np.asarray(log.dprop, dtype=float)


def fit_distribution(corpus: Sequence[NetTrace], cfg: LabConfig, source: str = "estimate",
                     seed: int = 0) -> TaskDistribution:
    """
    Fit p(Gamma) over a corpus. source="estimate" runs the bandwidth estimator over simulated
    feedback (with retro adjustment); source="trace" uses the trace bandwidth directly.
    """
    if not corpus:
        raise DistributionError("corpus is empty")
    chunks = []
    for i, trace in enumerate(corpus):
        if source == "trace":
            b, d = trace_series(trace)
        elif source == "estimate":
            b, d = estimated_series(trace, cfg, seed + i)
        else:
            raise ValueError(f"unknown series source: {source}")
        obs = observations_from_series(b, d, cfg)
        if len(obs) == 0:
            logger.warning(f"Trace {trace.id} is too short for a full window pair, skipped")
        chunks.append(obs)
    observations = np.concatenate(chunks) if chunks else np.empty((0, 8))
    if len(observations) == 0:
        raise DistributionError(
            f"corpus too small: every trace needs at least {cfg.window_s + cfg.delta_t_s} seconds"
        )
    return TaskDistribution.from_observations(observations, cfg)


def sample_task(dist: TaskDistribution, rng: np.random.Generator) -> NetworkState:
    return dist.sample(rng)


@dataclass(frozen=True)
class ContinuityRow:
    delta_t_s: int
    pairs: int
    bandwidth_covered: float
    mu_covered: float
    sigma_covered: float
    omega_covered: float
    dprop_covered: float


def continuity_report(series: Sequence[Tuple[np.ndarray, np.ndarray]], cfg: LabConfig,
                      delta_ts: Sequence[int] = (1, 4)) -> List[ContinuityRow]:
    """
    Fraction of (t - dt, t) pairs whose change stays within Delta', for raw bandwidth and for
    each window attribute. Shows how much more continuous window statistics are than samples.
    """
    rows = []
    floors = np.asarray(cfg.min_delta)
    for dt in delta_ts:
        raw_hits, raw_total = 0, 0
        attr_hits = np.zeros(4)
        pairs = 0
        for b, d in series:
            b = np.asarray(b, dtype=float)
            if len(b) > dt:
                raw = np.abs(b[dt:] - b[:-dt])
                raw_hits += int(np.sum(raw <= cfg.min_delta_mu))
                raw_total += len(raw)
            stats = sliding_stats(b, d, cfg.window_s)
            if len(stats) <= dt:
                continue
            arr = np.asarray([s.as_tuple() for s in stats])
            diff = np.abs(arr[dt:] - arr[:-dt])
            attr_hits += np.sum(diff <= floors, axis=0)
            pairs += len(diff)
        if pairs == 0:
            raise DistributionError(f"no window pairs at delta_t={dt} s")
        covered = attr_hits / pairs
        rows.append(ContinuityRow(
            delta_t_s=dt, pairs=pairs,
            bandwidth_covered=raw_hits / raw_total if raw_total else 0.0,
            mu_covered=float(covered[0]), sigma_covered=float(covered[1]),
            omega_covered=float(covered[2]), dprop_covered=float(covered[3]),
        ))
    return rows
