"""
Synthetic network-trajectory generation conditioned on a network state.

A center (mu, sigma, d_prop) is drawn near the task center, a pool of bandwidth samples
is drawn from a Gaussian (when mu +/- 3 sigma fits in [0, max_bw]) or a moment-matched
beta on [0, max_bw], and orderings of the pool are searched until every sliding window
stays inside the task's (Delta_mu, Delta_sigma, Delta_omega) box.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from .config import LabConfig
from .errors import TrajectoryGenerationError
from .models import NetTrace, NetworkState
from .taskspace import sliding_stats, within_box

logger = logging.getLogger(__name__)


def _truncated_normal(center: float, half_width: float, rng: np.random.Generator,
                      lower: float = 0.0, upper: float = math.inf) -> float:
    """
    Gaussian centered at `center` with std = half_width, truncated to center +/- half_width
    and to the attribute's own [lower, upper] range.
    """
    if half_width <= 0:
        return min(max(center, lower), upper)
    lo = max(center - half_width, lower)
    hi = min(center + half_width, upper)
    if hi <= lo:
        return lo
    a, b = (lo - center) / half_width, (hi - center) / half_width
    return float(truncnorm.rvs(a, b, loc=center, scale=half_width, random_state=rng))


def sample_center(task: NetworkState, rng: np.random.Generator,
                  max_bw: float = math.inf) -> Tuple[float, float, float]:
    """
    Draw (mu, sigma, d_prop) near the task center; the center is the most likely point.
    Bounds: mu in [0, max_bw], sigma in [0, max_bw / 2] (the widest spread a series on
    [0, max_bw] can have), d_prop in [0, inf).
    """
    mu = _truncated_normal(task.mu, task.delta.mu, rng, 0.0, max_bw)
    sigma = _truncated_normal(task.sigma, task.delta.sigma, rng, 0.0, max_bw / 2.0)
    d_prop = _truncated_normal(task.d_prop, task.delta.dprop, rng, 0.0)
    return mu, sigma, d_prop


def uses_gaussian(mu: float, sigma: float, max_bw: float) -> bool:
    """The 3-sigma rule: Gaussian only when [mu - 3 sigma, mu + 3 sigma] fits in [0, max_bw]."""
    return mu - 3 * sigma >= 0 and mu + 3 * sigma <= max_bw


def beta_parameters(mu: float, sigma: float, max_bw: float) -> Tuple[float, float, float, float]:
    """
    Moment-match a beta distribution on [0, max_bw] to (mu, sigma).
    Returns (a, b, mu, sigma) with mu/sigma possibly clamped to the feasible region.
    """
    eps = 1e-3 * max_bw
    if not eps <= mu <= max_bw - eps:
        clamped = min(max(mu, eps), max_bw - eps)
        logger.warning(f"Beta mean {mu:.4f} outside (0, {max_bw}), clamped to {clamped:.4f}")
        mu = clamped
    bound = mu * (max_bw - mu)
    if sigma ** 2 >= bound:
        clamped = math.sqrt(0.99 * bound)
        logger.warning(f"Beta sigma {sigma:.4f} infeasible for mu={mu:.4f}, clamped to {clamped:.4f}")
        sigma = clamped
    m = mu / max_bw
    v = (sigma / max_bw) ** 2
    common = m * (1 - m) / v - 1
    return m * common, (1 - m) * common, mu, sigma


def draw_pool(mu: float, sigma: float, n: int, max_bw: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return np.full(n, min(max(mu, 0.0), max_bw))
    if uses_gaussian(mu, sigma, max_bw):
        # The <0.3% tail outside [0, max_bw] is clipped to the boundary.
        return np.clip(rng.normal(mu, sigma, n), 0.0, max_bw)
    a, b, _, _ = beta_parameters(mu, sigma, max_bw)
    return rng.beta(a, b, n) * max_bw


def _window_cost(window: Sequence[float], task: NetworkState, full_len: int) -> float:
    n = len(window)
    mean = math.fsum(window) / n
    cost = abs(mean - task.mu) / task.delta.mu if task.delta.mu > 0 else 0.0
    omega = math.fsum(abs(window[i + 1] - window[i]) for i in range(n - 1))
    target_omega = task.omega * (n - 1) / max(full_len - 1, 1)
    if task.delta.omega > 0:
        cost = max(cost, abs(omega - target_omega) / task.delta.omega)
    if n == full_len and task.delta.sigma > 0:
        std = math.sqrt(math.fsum((x - mean) ** 2 for x in window) / n)
        cost = max(cost, abs(std - task.sigma) / task.delta.sigma)
    return cost


def arrange(pool: np.ndarray, task: NetworkState, window: int, candidates: int,
            rng: np.random.Generator) -> np.ndarray:
    """
    Build one ordering of the pool: at each position pick, among a random handful of the
    remaining samples, the one that keeps the trailing window closest to the task box.
    """
    remaining = list(rng.permutation(pool))
    out: List[float] = []
    while remaining:
        k = min(candidates, len(remaining))
        picks = rng.choice(len(remaining), size=k, replace=False)
        tail = out[-(window - 1):] if window > 1 else []
        best = min(picks, key=lambda i: _window_cost([*tail, remaining[i]], task, window))
        out.append(remaining.pop(int(best)))
    return np.asarray(out)


def trajectory_fits(bandwidth: np.ndarray, task: NetworkState, window: int) -> bool:
    dprop = np.full(len(bandwidth), task.d_prop)
    return all(within_box(s, task) for s in sliding_stats(bandwidth, dprop, window))


def generate_trajectory(task: NetworkState, length: int, max_bw: float, rng: np.random.Generator,
                        cfg: Optional[LabConfig] = None, trace_id: str = "synthetic") -> NetTrace:
    """
    One trace of `length` seconds for the task. d_prop is constant at the sampled value;
    the trace stores the one-way propagation delay (d_prop / 2).
    """
    cfg = cfg or LabConfig()
    if length < cfg.window_s:
        raise ValueError(f"trajectory length {length} s is shorter than the {cfg.window_s} s window")
    if max_bw <= 0:
        raise ValueError("max_bw must be positive")

    for pool_idx in range(cfg.pools_per_task):
        mu, sigma, d_prop = sample_center(task, rng, max_bw)
        pool = draw_pool(mu, sigma, length, max_bw, rng)
        for attempt in range(cfg.orderings_per_pool):
            if attempt == 0:
                ordering = pool.copy()
            elif attempt % 2 == 1:
                ordering = arrange(pool, task, cfg.window_s, cfg.ordering_candidates, rng)
            else:
                ordering = rng.permutation(pool)
            if trajectory_fits(ordering, task, cfg.window_s):
                logger.debug(f"Trajectory for {task.label} accepted after {pool_idx} pools, {attempt} orderings")
                return NetTrace.from_arrays(ordering, d_prop / 2.0, id=trace_id)
            if sigma == 0:
                break
    raise TrajectoryGenerationError(
        task.label, f"no ordering fit the task box within {cfg.pools_per_task} pools "
                    f"x {cfg.orderings_per_pool} orderings")


def find_segments(corpus: Sequence[NetTrace], task: NetworkState, length: int,
                  cfg: LabConfig) -> List[NetTrace]:
    """Real trace segments of `length` seconds whose windows all lie in the task box."""
    found = []
    for trace in corpus:
        bw = np.asarray(trace.bandwidths)
        dprop = 2.0 * np.asarray(trace.prop_delays)
        for start in range(0, len(bw) - length + 1, length):
            seg = bw[start:start + length]
            d = dprop[start:start + length]
            stats = sliding_stats(seg, d, cfg.window_s)
            if stats and all(within_box(s, task, include_dprop=True) for s in stats):
                found.append(NetTrace.from_arrays(seg, d / 2.0, id=f"{trace.id}@{start}"))
    return found


@dataclass
class TaskEnvironment:
    """The set of network trajectories rollouts for one task are run on."""
    task: NetworkState
    traces: List[NetTrace]

    @classmethod
    def build(cls, task: NetworkState, cfg: LabConfig, rng: np.random.Generator,
              count: Optional[int] = None, corpus: Optional[Sequence[NetTrace]] = None) -> "TaskEnvironment":
        count = count or cfg.episodes_per_task
        length = int(round(cfg.episode_s))
        traces: List[NetTrace] = []
        if corpus and cfg.real_fraction > 0:
            real = find_segments(corpus, task, length, cfg)
            n_real = min(len(real), int(round(cfg.real_fraction * count)))
            if n_real:
                picks = rng.choice(len(real), size=n_real, replace=False)
                traces.extend(real[int(i)] for i in picks)
        while len(traces) < count:
            traces.append(generate_trajectory(task, length, cfg.max_bw_mbps, rng, cfg,
                                              trace_id=f"synthetic-{len(traces)}"))
        return cls(task=task, traces=traces)


def switching_trajectory(tasks: Sequence[NetworkState], segment_s: int, max_bw: float,
                         rng: np.random.Generator, cfg: Optional[LabConfig] = None,
                         trace_id: str = "switching") -> NetTrace:
    """Concatenate one generated segment per task: the network state changes every segment_s."""
    segments = [generate_trajectory(task, segment_s, max_bw, rng, cfg) for task in tasks]
    bandwidth = np.concatenate([np.asarray(s.bandwidths) for s in segments])
    prop = np.concatenate([np.asarray(s.prop_delays) for s in segments])
    return NetTrace.from_arrays(bandwidth, prop, id=trace_id)
