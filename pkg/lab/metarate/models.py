"""
Data models for the lab. Units: Mbps for bandwidth/bitrate/throughput, ms for delays,
seconds for timestamps unless a field says otherwise.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np


class ControllerKind(Enum):
    GCC = "gcc"
    METARATE = "metarate"
    FROZEN = "metarate-frozen"


class RuntimeEventKind(Enum):
    TASK_FORMED = "task_formed"
    ACTIVATION = "activation"
    QUEUED = "queued"
    CACHE_HIT = "cache_hit"
    SWAP = "swap"
    META_TEST_FAILED = "meta_test_failed"


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class BandwidthSample:
    """One second of ground truth: available bandwidth and one-way propagation delay."""
    t: float
    bandwidth: float
    prop_delay: float

    def __post_init__(self):
        if not _finite(self.t, self.bandwidth, self.prop_delay):
            raise ValueError(f"non-finite sample at t={self.t}")
        if self.bandwidth < 0:
            raise ValueError(f"negative bandwidth {self.bandwidth} at t={self.t}")
        if self.prop_delay < 0:
            raise ValueError(f"negative propagation delay {self.prop_delay} at t={self.t}")


@dataclass(frozen=True)
class NetTrace:
    """A 1 s granularity bandwidth trace driving the simulated link."""
    samples: Tuple[BandwidthSample, ...]
    id: str = "trace"

    def __post_init__(self):
        if not self.samples:
            raise ValueError("trace must contain at least one sample")
        object.__setattr__(self, "samples", tuple(self.samples))
        t0 = self.samples[0].t
        for i, s in enumerate(self.samples):
            if abs(s.t - (t0 + i)) > 1e-9:
                raise ValueError(f"sample {i} at t={s.t} breaks the uniform 1 s spacing")

    @classmethod
    def from_arrays(cls, bandwidth, prop_delay, id: str = "trace", t0: float = 0.0) -> "NetTrace":
        bw = np.asarray(bandwidth, dtype=float)
        pd = np.broadcast_to(np.asarray(prop_delay, dtype=float), bw.shape)
        return cls(
            samples=tuple(BandwidthSample(t0 + i, float(b), float(d)) for i, (b, d) in enumerate(zip(bw, pd))),
            id=id,
        )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return float(len(self.samples))

    @cached_property
    def bandwidths(self) -> np.ndarray:
        arr = np.array([s.bandwidth for s in self.samples], dtype=float)
        arr.flags.writeable = False
        return arr

    @cached_property
    def prop_delays(self) -> np.ndarray:
        arr = np.array([s.prop_delay for s in self.samples], dtype=float)
        arr.flags.writeable = False
        return arr

    def at(self, t: float) -> BandwidthSample:
        """Step-held sample covering time t (seconds from the trace start)."""
        idx = int(math.floor(t - self.samples[0].t + 1e-9))
        idx = min(max(idx, 0), len(self.samples) - 1)
        return self.samples[idx]


@dataclass(frozen=True)
class LinkFeedback:
    """RTCP-style feedback aggregated over one interval."""
    t: float
    throughput: float
    loss_ratio: float
    delay: float
    delay_jitter: float = 0.0

    def __post_init__(self):
        if not _finite(self.t, self.throughput, self.loss_ratio, self.delay, self.delay_jitter):
            raise ValueError(f"non-finite feedback at t={self.t}")
        if not 0.0 <= self.loss_ratio <= 1.0:
            raise ValueError(f"loss ratio {self.loss_ratio} outside [0, 1]")
        if self.throughput < 0 or self.delay < 0 or self.delay_jitter < 0:
            raise ValueError(f"negative feedback value at t={self.t}")


@dataclass(frozen=True)
class StateRanges:
    """Covering ranges Δ of a network state, same units as the centers."""
    mu: float
    sigma: float
    omega: float
    dprop: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.mu, self.sigma, self.omega, self.dprop)


@dataclass(frozen=True)
class WindowStats:
    mu: float
    sigma: float
    omega: float
    d_prop: float
    window_len: int

    def __post_init__(self):
        if self.sigma < 0 or self.omega < 0:
            raise ValueError("sigma and omega must be non-negative")
        if self.sigma == 0 and self.omega != 0:
            raise ValueError("omega must be zero for a constant window")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.mu, self.sigma, self.omega, self.d_prop)


@dataclass(frozen=True)
class NetworkState:
    """A meta-learning task: a cluster center {mu, sigma, omega, d_prop} plus ranges."""
    mu: float
    sigma: float
    omega: float
    d_prop: float
    delta: StateRanges

    def __post_init__(self):
        if not _finite(self.mu, self.sigma, self.omega, self.d_prop, *self.delta.as_tuple()):
            raise ValueError("network state must be finite")
        if self.sigma < 0 or self.omega < 0 or self.d_prop < 0:
            raise ValueError("network state sigma, omega and d_prop must be non-negative")
        if min(self.delta.as_tuple()) < 0:
            raise ValueError("network state ranges must be non-negative")

    def center(self) -> Tuple[float, float, float, float]:
        return (self.mu, self.sigma, self.omega, self.d_prop)

    @property
    def label(self) -> str:
        return (f"mu={self.mu:.3f} sigma={self.sigma:.3f} omega={self.omega:.3f} "
                f"dprop={self.d_prop:.1f}")


@dataclass(frozen=True)
class BandwidthEstimate:
    t: float
    b_hat: float
    full_pipe: bool


@dataclass(frozen=True)
class PacketRecord:
    seq: int
    size: int
    frame_id: int
    send_t: float
    arrive_t: Optional[float]  # None when lost

    @property
    def lost(self) -> bool:
        return self.arrive_t is None


@dataclass
class SecondMetrics:
    """One row of the per-second metrics log."""
    t: float
    bandwidth: float
    target_bitrate: float
    ladder_level: float
    throughput: float
    loss_ratio: float
    rtt: float
    delay_jitter: float
    fps: float
    frame_delay: float
    frame_delay_jitter: float
    stalled: bool
    bitrate_change: float
    reward: float


@dataclass
class SessionMetrics:
    rows: List[SecondMetrics] = field(default_factory=list)

    @property
    def duration_s(self) -> float:
        return float(len(self.rows))

    @property
    def stalling_rate(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r.stalled for r in self.rows) / len(self.rows)

    @property
    def bitrate_jitter_per_10min(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r.bitrate_change for r in self.rows) * 600.0 / len(self.rows)


@dataclass
class EpisodeTrajectory:
    """One rollout: flattened states, action indices, rewards and behaviour probabilities."""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        n = len(self.actions)
        if not (len(self.states) == len(self.rewards) == len(self.probs) == n):
            raise ValueError("trajectory arrays must have equal length")
        if n and (np.any(self.probs <= 0) or np.any(self.probs > 1)):
            raise ValueError("behaviour probabilities must lie in (0, 1]")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards)) if len(self.rewards) else 0.0


@dataclass(frozen=True)
class TaskReport:
    task: str
    pre_reward: float
    post_reward: float


@dataclass(frozen=True)
class RoundReport:
    round: int
    outer_loss: float
    pre_reward: float
    post_reward: float
    wall_time: float
    tasks: Tuple[TaskReport, ...] = ()
    skipped_tasks: int = 0


@dataclass
class MetaTrainReport:
    """Append-only log of outer rounds."""
    rounds: List[RoundReport] = field(default_factory=list)

    def append(self, report: RoundReport) -> None:
        self.rounds.append(report)

    def as_rows(self) -> List[Dict[str, float]]:
        return [
            {"round": r.round, "loss": r.outer_loss, "pre_reward": r.pre_reward,
             "post_reward": r.post_reward, "wall_time": r.wall_time, "skipped_tasks": r.skipped_tasks}
            for r in self.rounds
        ]


@dataclass
class RuntimeStatus:
    current_task: Optional[NetworkState] = None
    generation: int = 0
    meta_test_in_flight: bool = False
    last_activation_t: Optional[float] = None


@dataclass(frozen=True)
class RuntimeEvent:
    t: float
    kind: RuntimeEventKind
    detail: str = ""
    generation: int = 0


@dataclass(frozen=True)
class MetaTestResult:
    """Result of a meta-test request."""
    success: bool
    message: str
    source: str = ""          # "cache", "adapted" or "failed"
    latency_s: float = 0.0
