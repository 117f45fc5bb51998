"""
Bandwidth estimation and filtering.

Online: propagation delay as a capped running minimum, full-pipe detection from loss and
queueing delay, and probing above the measured throughput when the pipe is not full.
Offline: retroactive adjustment of unfilled runs once a later full-pipe estimate is known.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Union

import numpy as np

from .config import LabConfig
from .errors import DataError
from .models import BandwidthEstimate, LinkFeedback

logger = logging.getLogger(__name__)

FULL_PIPE_LOSS = 0.05
PROBE_OFFSET = 1.3


@dataclass
class EstimatorState:
    """Single-owner estimator state, mutated sequentially by the feedback loop."""
    dprop_cap: float
    dprop_sigma: float
    dprop_window: Deque[float] = field(default_factory=deque)
    pb1: float = 0.0
    last_full_pipe: bool = True   # session start behaves like a 1 -> 0 transition
    dprop: Optional[float] = None

    @classmethod
    def from_config(cls, cfg: LabConfig) -> "EstimatorState":
        maxlen = max(1, int(round(cfg.dprop_window_s / cfg.estimator_interval_s)))
        return cls(dprop_cap=cfg.dprop_cap_ms, dprop_sigma=cfg.dprop_sigma_ms,
                   dprop_window=deque(maxlen=maxlen))


def estimate_prop_delay(state: EstimatorState, d_t: float) -> float:
    """Running minimum of observed delays over W_d, capped at max(d_prop)."""
    state.dprop_window.append(d_t)
    state.dprop = min(min(state.dprop_window), state.dprop_cap)
    return state.dprop


def detect_full_pipe(l_t: float, d_t: float, dprop_t: float, dprop_sigma: float,
                     loss_threshold: float = FULL_PIPE_LOSS) -> bool:
    return l_t > loss_threshold or d_t > dprop_t + dprop_sigma


def probe_step(prev: float, offset: float = PROBE_OFFSET) -> float:
    """Multiplicative probe: prev * (exp(-prev - offset) + 1)."""
    return prev * (math.exp(-prev - offset) + 1.0)


def estimate_bandwidth(state: EstimatorState, fb: LinkFeedback, delta_mu: float,
                       loss_threshold: float = FULL_PIPE_LOSS,
                       offset: float = PROBE_OFFSET) -> BandwidthEstimate:
    dprop = estimate_prop_delay(state, fb.delay)
    full = detect_full_pipe(fb.loss_ratio, fb.delay, dprop, state.dprop_sigma, loss_threshold)
    eta = fb.throughput
    if full:
        state.pb1 = 0.0
        state.last_full_pipe = True
        return BandwidthEstimate(t=fb.t, b_hat=eta, full_pipe=True)

    prev = eta if state.last_full_pipe else state.pb1
    state.pb1 = probe_step(prev, offset)
    state.last_full_pipe = False
    return BandwidthEstimate(t=fb.t, b_hat=max(eta + delta_mu, state.pb1), full_pipe=False)


def retro_adjust(estimates: Sequence[BandwidthEstimate], pb1_log: Sequence[float],
                 eta_log: Sequence[float],
                 pb2: Union[float, Sequence[float]] = 0.2) -> List[BandwidthEstimate]:
    """
    Offline adjustment of unfilled runs. For each unfilled run closed by a full-pipe
    estimate B_later, pick t' = argmax pb1 subject to pb1 < B_later and rewrite every later
    point of the run as max(pb1[t'] - eta[t'], pb2[t]) + eta[t]. Runs never closed by a
    full pipe, or without a valid t', are returned unchanged.
    """
    n = len(estimates)
    if len(pb1_log) != n or len(eta_log) != n:
        raise ValueError("estimates, pb1_log and eta_log must be aligned")
    pb2_log = [pb2] * n if isinstance(pb2, (int, float)) else list(pb2)

    out = list(estimates)
    i = 0
    while i < n:
        if estimates[i].full_pipe:
            i += 1
            continue
        start = i
        while i < n and not estimates[i].full_pipe:
            i += 1
        if i >= n:
            break
        later = estimates[i].b_hat
        candidates = [k for k in range(start, i) if pb1_log[k] < later]
        if not candidates:
            continue
        tp = max(candidates, key=lambda k: (pb1_log[k], k))
        gap = pb1_log[tp] - eta_log[tp]
        for k in range(tp + 1, i):
            out[k] = BandwidthEstimate(t=estimates[k].t, b_hat=max(gap, pb2_log[k]) + eta_log[k],
                                       full_pipe=False)
    return out


@dataclass
class EstimationLog:
    estimates: List[BandwidthEstimate] = field(default_factory=list)
    pb1: List[float] = field(default_factory=list)
    eta: List[float] = field(default_factory=list)
    pb2: List[float] = field(default_factory=list)
    dprop: List[float] = field(default_factory=list)

    def b_hat(self) -> np.ndarray:
        return np.array([e.b_hat for e in self.estimates], dtype=float)


class BandwidthEstimator:
    """Feedback-loop wrapper: owns the state and keeps the logs retro_adjust needs."""

    def __init__(self, cfg: LabConfig):
        self.cfg = cfg
        self.state = EstimatorState.from_config(cfg)
        self.log = EstimationLog()

    def update(self, fb: LinkFeedback, delta_mu: Optional[float] = None) -> BandwidthEstimate:
        pb2 = self.cfg.min_delta_mu if delta_mu is None else delta_mu
        est = estimate_bandwidth(self.state, fb, pb2, self.cfg.full_pipe_loss, self.cfg.probe_offset)
        self.log.estimates.append(est)
        self.log.pb1.append(self.state.pb1)
        self.log.eta.append(fb.throughput)
        self.log.pb2.append(pb2)
        self.log.dprop.append(self.state.dprop)
        return est

    @property
    def dprop(self) -> Optional[float]:
        return self.state.dprop

    def retro_adjusted(self) -> List[BandwidthEstimate]:
        return retro_adjust(self.log.estimates, self.log.pb1, self.log.eta, self.log.pb2)


def estimate_series(feedback: Sequence[LinkFeedback], cfg: LabConfig, retro: bool = False,
                    delta_mu: Optional[float] = None) -> EstimationLog:
    """Run the estimator over a 1 s feedback sequence; optionally apply retro_adjust."""
    estimator = BandwidthEstimator(cfg)
    for fb in feedback:
        estimator.update(fb, delta_mu)
    log = estimator.log
    if retro:
        log.estimates = estimator.retro_adjusted()
    return log


def dprop_statistics(delay_series: Sequence[Sequence[float]], cfg: LabConfig) -> tuple:
    """
    sigma(d_prop) and max(d_prop) from a corpus of 1 s delay series: the standard deviation
    of per-window running-min values, and the 99th percentile of per-window minima.
    """
    window = max(1, int(round(cfg.dprop_window_s / cfg.estimator_interval_s)))
    minima: List[float] = []
    for series in delay_series:
        arr = np.asarray(series, dtype=float)
        if len(arr) < window:
            if len(arr):
                minima.append(float(arr.min()))
            continue
        view = np.lib.stride_tricks.sliding_window_view(arr, window)
        minima.extend(view.min(axis=1).tolist())
    if not minima:
        raise DataError("no delay samples to calibrate from")
    sigma = float(np.std(minima))
    cap = float(np.percentile(minima, 99))
    logger.info(f"Calibrated d_prop: sigma={sigma:.3f} ms cap={cap:.3f} ms from {len(minima)} windows")
    return sigma, cap


def calibrate_corpus(corpus: Sequence, cfg: LabConfig, seed: int = 0) -> tuple:
    """(sigma(d_prop), max(d_prop)) from rule-driven simulated sessions over a trace corpus."""
    from .rollout import simulate_feedback

    series = [[fb.delay for fb in simulate_feedback(trace, cfg, seed + i)] for i, trace in enumerate(corpus)]
    return dprop_statistics(series, cfg)
