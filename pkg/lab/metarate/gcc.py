"""
Rule-based comparator: loss-based AIMD combined with a smoothed delay-gradient overuse
detector, evaluated every gcc_interval_ms. A deliberately simple stand-in for GCC.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

from .config import LabConfig
from .models import LinkFeedback
from .rollout import merge_feedback

logger = logging.getLogger(__name__)


@dataclass
class GccState:
    rate: float
    gradient: float = 0.0          # smoothed delay gradient, ms/s
    prev_delay: Optional[float] = None
    prev_t: Optional[float] = None
    hold_until: float = -math.inf
    overuse_count: int = 0


def gcc_step(state: GccState, fb: LinkFeedback, cfg: LabConfig) -> float:
    """Update the rate from one feedback report and return the new target bitrate."""
    if state.prev_delay is not None and fb.t > state.prev_t:
        raw = (fb.delay - state.prev_delay) / (fb.t - state.prev_t)
        state.gradient = cfg.gcc_smoothing * state.gradient + (1.0 - cfg.gcc_smoothing) * raw
    state.prev_delay = fb.delay
    state.prev_t = fb.t

    overuse = state.gradient > cfg.gcc_gradient_threshold
    if overuse:
        if fb.t >= state.hold_until:
            state.rate *= cfg.gcc_decrease
            state.overuse_count += 1
        state.hold_until = fb.t + cfg.gcc_holdoff_s
    elif fb.loss_ratio > cfg.gcc_loss_high:
        state.rate *= cfg.gcc_decrease
    elif fb.loss_ratio < cfg.gcc_loss_low and fb.t >= state.hold_until:
        state.rate *= cfg.gcc_increase
    state.rate = min(max(state.rate, cfg.ladder_min), cfg.ladder_max)
    return state.rate


@dataclass
class GccController:
    """Collects per-step feedback and applies gcc_step once per evaluation interval."""
    cfg: LabConfig
    name: str = "gcc"
    state: GccState = field(init=False)
    _pending: List[LinkFeedback] = field(init=False, default_factory=list)

    def __post_init__(self):
        self.state = GccState(rate=self.cfg.initial_bitrate)
        self._per_eval = max(1, int(round(self.cfg.gcc_interval_ms / self.cfg.step_ms)))

    def decide(self, fb: LinkFeedback, now_s: float) -> float:
        self._pending.append(fb)
        if len(self._pending) >= self._per_eval:
            gcc_step(self.state, merge_feedback(self._pending), self.cfg)
            self._pending.clear()
        return self.state.rate
