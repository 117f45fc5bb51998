"""
Session drivers: run a controller over a trace in the simulator, collect per-second
metrics, and roll out policy episodes for the meta-RL loops.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Protocol

import numpy as np

from .config import LabConfig
from .models import EpisodeTrajectory, LinkFeedback, NetTrace, PacketRecord, SecondMetrics, SessionMetrics
from .policy import PolicyParams, StepRecord, apply_action, featurize, forward, reward, select_action, step_record
from .simnet import VideoSession

logger = logging.getLogger(__name__)


class Controller(Protocol):
    """Anything that turns a feedback report into the next target bitrate."""
    name: str

    def decide(self, fb: LinkFeedback, now_s: float) -> float:
        ...


class FeedbackHistory:
    """The last `steps` decision intervals, oldest first."""

    def __init__(self, steps: int):
        self.records: Deque[StepRecord] = deque(maxlen=steps)
        self.steps = steps

    def push(self, fb: LinkFeedback, bitrate: float) -> None:
        self.records.append(step_record(fb, bitrate))

    def state(self) -> np.ndarray:
        return featurize(self.records, self.steps)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SessionResult:
    trace_id: str
    controller: str
    metrics: SessionMetrics
    feedback_1s: List[LinkFeedback] = field(default_factory=list)
    packet_log: List[PacketRecord] = field(default_factory=list)
    decisions: int = 0

    @property
    def mean_reward(self) -> float:
        rows = self.metrics.rows
        return float(np.mean([r.reward for r in rows])) if rows else 0.0


def _steps_per_second(cfg: LabConfig) -> int:
    n = 1.0 / cfg.step_s
    if abs(n - round(n)) > 1e-9:
        raise ValueError("step_s must divide one second")
    return int(round(n))


def merge_feedback(reports: List[LinkFeedback]) -> LinkFeedback:
    """Average equally long consecutive reports into one."""
    n = len(reports)
    return LinkFeedback(
        t=reports[-1].t,
        throughput=math.fsum(r.throughput for r in reports) / n,
        loss_ratio=math.fsum(r.loss_ratio for r in reports) / n,
        delay=math.fsum(r.delay for r in reports) / n,
        delay_jitter=math.fsum(r.delay_jitter for r in reports) / n,
    )


def run_session(trace: NetTrace, controller: Controller, cfg: LabConfig, seed: int = 0,
                duration_s: Optional[float] = None, record_packets: bool = False) -> SessionResult:
    """
    Drive one session for the trace duration (or duration_s). The controller is consulted
    every step_s with the feedback of the step just finished.
    """
    duration = int(math.floor(duration_s if duration_s is not None else trace.duration_s))
    per_second = _steps_per_second(cfg)
    session = VideoSession(trace, cfg, seed=seed, record_packets=record_packets)
    w = cfg.reward_weights
    metrics = SessionMetrics()
    feedback_1s: List[LinkFeedback] = []
    last_rtt = 0.0
    last_frame_delay = 0.0
    decisions = 0

    for sec in range(duration):
        change = 0.0
        for _ in range(per_second):
            session.advance(cfg.step_ms)
            fb = session.feedback(cfg.step_ms)
            before = session.target
            after = controller.decide(fb, session.now / 1000.0)
            session.set_target_bitrate(after)
            change += abs(after - before)
            decisions += 1
        stats = session.interval_stats(sec * 1000.0, (sec + 1) * 1000.0)
        if stats.delay is not None:
            last_rtt = stats.delay
        if stats.frame_delay is not None:
            last_frame_delay = stats.frame_delay
        fps = float(min(stats.frames, cfg.fps))
        metrics.rows.append(SecondMetrics(
            t=float(sec + 1), bandwidth=trace.at(trace.samples[0].t + sec).bandwidth,
            target_bitrate=session.target, ladder_level=session.level,
            throughput=stats.throughput, loss_ratio=stats.loss_ratio, rtt=last_rtt,
            delay_jitter=stats.delay_jitter, fps=fps, frame_delay=last_frame_delay,
            frame_delay_jitter=stats.frame_delay_jitter, stalled=fps < cfg.stall_fps,
            bitrate_change=change,
            # smoothness term over the change accumulated during the second
            reward=reward(stats.throughput, stats.loss_ratio, last_rtt, change, 0.0, w),
        ))
        feedback_1s.append(LinkFeedback(t=float(sec + 1), throughput=stats.throughput,
                                        loss_ratio=stats.loss_ratio, delay=last_rtt,
                                        delay_jitter=stats.delay_jitter))

    return SessionResult(trace_id=trace.id, controller=getattr(controller, "name", "controller"),
                         metrics=metrics, feedback_1s=feedback_1s,
                         packet_log=session.packet_log, decisions=decisions)


def simulate_feedback(trace: NetTrace, cfg: LabConfig, seed: int = 0) -> List[LinkFeedback]:
    """1 s feedback from a session on the trace driven by the rule baseline."""
    from .gcc import GccController

    return run_session(trace, GccController(cfg), cfg, seed=seed).feedback_1s


def rollout_episode(params: PolicyParams, trace: NetTrace, cfg: LabConfig, rng: np.random.Generator,
                    mode: str = "sample", task_id: str = "") -> EpisodeTrajectory:
    """
    One episode of policy decisions every step_s. The reward of a decision is measured over
    the step that follows it, so the session runs one extra step after the last decision.
    """
    n_steps = int(round(min(cfg.episode_s, trace.duration_s) / cfg.step_s))
    grid = cfg.action_grid
    w = cfg.reward_weights
    session = VideoSession(trace, cfg, seed=int(rng.integers(2 ** 31)))
    history = FeedbackHistory(cfg.history_steps)

    states = np.zeros((n_steps, cfg.state_dim()))
    actions = np.zeros(n_steps, dtype=int)
    probs = np.zeros(n_steps)
    rewards = np.zeros(n_steps)
    b_cur = cfg.initial_bitrate
    b_before = b_cur

    for step in range(n_steps + 1):
        session.advance(cfg.step_ms)
        fb = session.feedback(cfg.step_ms)
        if step > 0:
            rewards[step - 1] = reward(fb.throughput, fb.loss_ratio, fb.delay, b_cur, b_before, w)
        if step == n_steps:
            break
        history.push(fb, b_cur)
        state = history.state()
        p = forward(params, state)
        a = select_action(p, mode, rng)
        states[step] = state
        actions[step] = a
        probs[step] = p[a]
        b_before = b_cur
        b_cur = apply_action(b_cur, float(grid[a]), cfg.ladder_min, cfg.ladder_max)
        session.set_target_bitrate(b_cur)

    return EpisodeTrajectory(states=states, actions=actions, rewards=rewards, probs=probs, task_id=task_id)
