"""
Packet-level interactive-video simulator.

A frame source on the bitrate ladder emits frames on the fps clock; frames are split into
MTU-sized packets, paced out at the target rate, served FIFO by a drop-tail link whose
rate follows the trace (step-held per second), then delayed by the trace's one-way
propagation delay. All times inside the session are milliseconds since session start.

Delay convention: the per-packet RTT proxy is the one-way delay (queueing + service +
propagation) plus the reverse propagation delay, i.e. 2 x d_prop on an idle link.
"""
import csv
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from .config import LabConfig
from .errors import DataError
from .models import LinkFeedback, NetTrace, PacketRecord

logger = logging.getLogger(__name__)

BIN_MS = 100.0
PACKET_LOG_HEADER = ["seq", "size", "frame_id", "send_t", "arrive_t"]


def snap_to_ladder(b: float, ladder: np.ndarray) -> float:
    """Nearest ladder level, clamped to the ladder range."""
    return float(ladder[int(np.argmin(np.abs(ladder - b)))])


def load_frame_table(path) -> Dict[float, np.ndarray]:
    """Recorded frame sizes per ladder level: CSV with columns level_mbps,size_bytes."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"frame table not found: {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{path}: unreadable frame table: {e}") from e
    for col in ("level_mbps", "size_bytes"):
        if col not in df.columns:
            raise DataError(f"{path}: missing column {col}")
    if (df["size_bytes"] <= 0).any():
        raise DataError(f"{path}: frame sizes must be positive")
    return {round(float(level), 6): g["size_bytes"].to_numpy(dtype=float)
            for level, g in df.groupby("level_mbps")}


class FrameSource:
    """Frames at the selected ladder level: mean size level / (8 fps), uniform multiplicative jitter."""

    def __init__(self, ladder: np.ndarray, fps: int, jitter: float, rng: np.random.Generator,
                 table: Optional[Dict[float, np.ndarray]] = None):
        self.ladder = np.asarray(ladder, dtype=float)
        self.fps = fps
        self.jitter = jitter
        self.rng = rng
        self.table = table or {}
        self.level = float(self.ladder[0])

    def select(self, b: float) -> float:
        self.level = snap_to_ladder(b, self.ladder)
        return self.level

    def mean_frame_bytes(self) -> float:
        return self.level * 1e6 / (8.0 * self.fps)

    def next_frame_size(self) -> int:
        recorded = self.table.get(round(self.level, 6))
        if recorded is not None and len(recorded):
            return max(1, int(round(recorded[self.rng.integers(len(recorded))])))
        factor = self.rng.uniform(1.0 - self.jitter, 1.0 + self.jitter) if self.jitter > 0 else 1.0
        return max(1, int(round(self.mean_frame_bytes() * factor)))


@dataclass
class _Packet:
    seq: int
    size: int
    frame_id: int
    ready_t: float
    send_t: float = 0.0
    depart_t: float = 0.0
    arrive_t: float = 0.0


class Pacer:
    """Token bucket of one packet: consecutive sends are spaced by size / rate."""

    def __init__(self, rate_mbps: float):
        self.rate_mbps = rate_mbps
        self.backlog: Deque[_Packet] = deque()
        self.backlog_bytes = 0
        self.next_allowed_t = 0.0

    def push(self, packet: _Packet) -> None:
        self.backlog.append(packet)
        self.backlog_bytes += packet.size

    def next_send_time(self) -> float:
        if not self.backlog:
            return math.inf
        return max(self.next_allowed_t, self.backlog[0].ready_t)

    def pop(self, t: float) -> _Packet:
        packet = self.backlog.popleft()
        self.backlog_bytes -= packet.size
        self.next_allowed_t = t + packet.size * 8.0 / (self.rate_mbps * 1000.0)
        return packet


class Link:
    """
    Drop-tail FIFO byte queue served at the trace bandwidth, followed by propagation.
    Capacity is queue_ms of the bandwidth in force at enqueue time, at least one MTU.
    """

    def __init__(self, trace: NetTrace, queue_ms: float, mtu: int, random_loss: float,
                 rng: np.random.Generator):
        self.trace = trace
        self.queue_ms = queue_ms
        self.mtu = mtu
        self.random_loss = random_loss
        self.rng = rng
        self._t0 = trace.samples[0].t
        self._free_t = 0.0
        self._last_arrive_t = 0.0
        self.queue: Deque[_Packet] = deque()      # waiting or in service (depart_t > now)
        self.queued_bytes = 0
        self.pipe: Deque[_Packet] = deque()       # not yet arrived, ordered by arrive_t

    def bandwidth_at(self, t_ms: float) -> float:
        return self.trace.at(self._t0 + t_ms / 1000.0).bandwidth

    def prop_delay_at(self, t_ms: float) -> float:
        return self.trace.at(self._t0 + t_ms / 1000.0).prop_delay

    def capacity_bytes(self, t_ms: float) -> float:
        return max(self.queue_ms * self.bandwidth_at(t_ms) * 125.0, float(self.mtu))

    def _service_end(self, start: float, size: int) -> float:
        bits = size * 8.0
        t = start
        last_second = len(self.trace) - 1
        while True:
            sec = math.floor(t / 1000.0 + 1e-12)
            rate = self.bandwidth_at(t) * 1000.0  # bits per ms
            if rate <= 0:
                if sec >= last_second:
                    return math.inf
                t = (sec + 1) * 1000.0
                continue
            sec_end = (sec + 1) * 1000.0 if sec < last_second else math.inf
            need = bits / rate
            if t + need <= sec_end:
                return t + need
            bits -= (sec_end - t) * rate
            t = sec_end

    def drain(self, t: float) -> None:
        while self.queue and self.queue[0].depart_t <= t:
            self.queued_bytes -= self.queue.popleft().size

    def enqueue(self, packet: _Packet, t: float) -> bool:
        """Admit a packet at time t; False when it is lost (random loss or overflow)."""
        self.drain(t)
        if self.random_loss > 0 and self.rng.random() < self.random_loss:
            return False
        if self.queued_bytes + packet.size > self.capacity_bytes(t):
            return False
        start = max(t, self._free_t)
        packet.depart_t = self._service_end(start, packet.size)
        self._free_t = packet.depart_t
        arrive = packet.depart_t + self.prop_delay_at(packet.depart_t) if math.isfinite(packet.depart_t) else math.inf
        packet.arrive_t = max(arrive, self._last_arrive_t)
        self._last_arrive_t = packet.arrive_t
        self.queue.append(packet)
        self.queued_bytes += packet.size
        self.pipe.append(packet)
        return True

    def in_link_bytes(self, t: float) -> tuple:
        """(queued, in flight) bytes at time t."""
        self.drain(t)
        total = sum(p.size for p in self.pipe)
        return self.queued_bytes, total - self.queued_bytes


@dataclass
class _Bin:
    sent_pkts: int = 0
    lost_pkts: int = 0
    sent_bytes: int = 0
    lost_bytes: int = 0
    delivered_bytes: int = 0
    delay_sum: float = 0.0
    delay_n: int = 0
    jitter_sum: float = 0.0
    jitter_n: int = 0
    frames: int = 0
    frame_delay_sum: float = 0.0
    frame_jitter_sum: float = 0.0
    frame_jitter_n: int = 0


@dataclass
class _Frame:
    gen_t: float
    packets: int
    arrived: int = 0
    lost: int = 0
    last_arrive_t: float = 0.0


@dataclass
class StepEvents:
    """What happened during one advance call."""
    frames_generated: int = 0
    packets_sent: int = 0
    packets_lost: int = 0
    packets_delivered: int = 0
    frames_delivered: int = 0

    @property
    def empty(self) -> bool:
        return not (self.frames_generated or self.packets_sent or self.packets_lost
                    or self.packets_delivered or self.frames_delivered)


@dataclass
class IntervalStats:
    """Aggregates over a span of bins. delay/frame_delay are None when nothing arrived."""
    throughput: float
    loss_ratio: float
    delay: Optional[float]
    delay_jitter: float
    frames: int
    frame_delay: Optional[float]
    frame_delay_jitter: float
    sent_bytes: int
    delivered_bytes: int


@dataclass
class Accounting:
    sent: int
    delivered: int
    lost: int
    inflight: int
    queued: int

    @property
    def balanced(self) -> bool:
        return self.sent == self.delivered + self.lost + self.inflight + self.queued


class VideoSession:
    """One simulated sender-to-receiver video session over a trace."""

    def __init__(self, trace: NetTrace, cfg: LabConfig, seed: int = 0, record_packets: bool = False,
                 frame_table: Optional[Dict[float, np.ndarray]] = None):
        self.trace = trace
        self.cfg = cfg
        frame_ss, loss_ss = np.random.SeedSequence(seed).spawn(2)
        if frame_table is None and cfg.frame_table:
            frame_table = load_frame_table(cfg.frame_table)
        self.source = FrameSource(cfg.ladder, cfg.fps, cfg.frame_jitter,
                                  np.random.default_rng(frame_ss), frame_table)
        self.pacer = Pacer(cfg.initial_bitrate * cfg.pacing_factor)
        self.link = Link(trace, cfg.queue_ms, cfg.mtu_bytes, cfg.random_loss,
                         np.random.default_rng(loss_ss))
        self.now = 0.0
        self.target = cfg.initial_bitrate
        self._frame_period = 1000.0 / cfg.fps
        self._next_frame_idx = 0
        self._seq = 0
        self._frames: Dict[int, _Frame] = {}
        self._bins: List[_Bin] = []
        self._prev_delay: Optional[float] = None
        self._prev_frame_delay: Optional[float] = None
        self._last_fb_delay = 0.0
        self.sent_bytes = 0
        self.delivered_bytes = 0
        self.lost_bytes = 0
        self.record_packets = record_packets
        self.packet_log: List[PacketRecord] = []
        self.set_target_bitrate(cfg.initial_bitrate)

    # Control

    def set_target_bitrate(self, b: float) -> float:
        """Snap the frame source to the nearest ladder level and set the pacing budget."""
        if not b > 0:
            raise ValueError(f"target bitrate must be positive, got {b}")
        self.target = b
        level = self.source.select(b)
        self.pacer.rate_mbps = max(b, level) * self.cfg.pacing_factor
        return level

    @property
    def level(self) -> float:
        return self.source.level

    # Simulation

    def _bin(self, t: float) -> _Bin:
        idx = int(t // BIN_MS)
        while len(self._bins) <= idx:
            self._bins.append(_Bin())
        return self._bins[idx]

    def _generate_frame(self, t: float, events: StepEvents) -> None:
        frame_id = self._next_frame_idx
        self._next_frame_idx += 1
        size = self.source.next_frame_size()
        n_packets = max(1, math.ceil(size / self.cfg.mtu_bytes))
        self._frames[frame_id] = _Frame(gen_t=t, packets=n_packets)
        for k in range(n_packets):
            psize = self.cfg.mtu_bytes if k < n_packets - 1 else size - self.cfg.mtu_bytes * (n_packets - 1)
            self.pacer.push(_Packet(seq=self._seq, size=psize, frame_id=frame_id, ready_t=t))
            self._seq += 1
        events.frames_generated += 1

    def _send(self, t: float, events: StepEvents) -> None:
        packet = self.pacer.pop(t)
        packet.send_t = t
        b = self._bin(t)
        b.sent_pkts += 1
        b.sent_bytes += packet.size
        self.sent_bytes += packet.size
        events.packets_sent += 1
        admitted = self.link.enqueue(packet, t)
        if not admitted:
            b.lost_pkts += 1
            b.lost_bytes += packet.size
            self.lost_bytes += packet.size
            events.packets_lost += 1
            self._packet_done(packet, None)
        if self.record_packets:
            self.packet_log.append(PacketRecord(packet.seq, packet.size, packet.frame_id, t,
                                                packet.arrive_t if admitted else None))

    def _packet_done(self, packet: _Packet, arrive_t: Optional[float], events: Optional[StepEvents] = None) -> None:
        frame = self._frames.get(packet.frame_id)
        if frame is None:
            return
        if arrive_t is None:
            frame.lost += 1
        else:
            frame.arrived += 1
            frame.last_arrive_t = arrive_t
        if frame.arrived + frame.lost < frame.packets:
            return
        del self._frames[packet.frame_id]
        if frame.lost:
            return
        delay = frame.last_arrive_t - frame.gen_t
        if delay > self.cfg.late_frame_ms:
            return
        b = self._bin(frame.last_arrive_t)
        b.frames += 1
        b.frame_delay_sum += delay
        if self._prev_frame_delay is not None:
            b.frame_jitter_sum += abs(delay - self._prev_frame_delay)
            b.frame_jitter_n += 1
        self._prev_frame_delay = delay
        if events is not None:
            events.frames_delivered += 1

    def _deliver_until(self, t: float, events: StepEvents) -> None:
        pipe = self.link.pipe
        while pipe and pipe[0].arrive_t < t:
            packet = pipe.popleft()
            b = self._bin(packet.arrive_t)
            b.delivered_bytes += packet.size
            self.delivered_bytes += packet.size
            delay = (packet.arrive_t - packet.send_t) + self.link.prop_delay_at(packet.arrive_t)
            b.delay_sum += delay
            b.delay_n += 1
            if self._prev_delay is not None:
                b.jitter_sum += abs(delay - self._prev_delay)
                b.jitter_n += 1
            self._prev_delay = delay
            events.packets_delivered += 1
            self._packet_done(packet, packet.arrive_t, events)

    def advance(self, dt_ms: float) -> StepEvents:
        """Run the session for dt_ms. Events in [now, now + dt) are processed."""
        if dt_ms < 0:
            raise ValueError(f"cannot advance by a negative duration ({dt_ms} ms)")
        events = StepEvents()
        if dt_ms == 0:
            return events
        end = self.now + dt_ms
        while True:
            t_frame = self._next_frame_idx * self._frame_period
            t_send = self.pacer.next_send_time()
            t = min(t_frame, t_send)
            if t >= end:
                break
            self._deliver_until(t, events)
            if t_frame <= t_send:
                self._generate_frame(t_frame, events)
            else:
                self._send(t_send, events)
        self._deliver_until(end, events)
        self.now = end
        return events

    # Measurement

    def interval_stats(self, start_ms: float, end_ms: float) -> IntervalStats:
        """Aggregate the 100 ms bins covering [start_ms, end_ms)."""
        lo = max(int(round(start_ms / BIN_MS)), 0)
        hi = int(round(end_ms / BIN_MS))
        bins = self._bins[lo:min(hi, len(self._bins))]
        sent = sum(b.sent_pkts for b in bins)
        lost = sum(b.lost_pkts for b in bins)
        delivered = sum(b.delivered_bytes for b in bins)
        delay_n = sum(b.delay_n for b in bins)
        jitter_n = sum(b.jitter_n for b in bins)
        frames = sum(b.frames for b in bins)
        frame_jitter_n = sum(b.frame_jitter_n for b in bins)
        span = max(end_ms - start_ms, 1e-9)
        return IntervalStats(
            throughput=delivered * 8.0 / (span * 1000.0),
            loss_ratio=lost / sent if sent else 0.0,
            delay=sum(b.delay_sum for b in bins) / delay_n if delay_n else None,
            delay_jitter=sum(b.jitter_sum for b in bins) / jitter_n if jitter_n else 0.0,
            frames=frames,
            frame_delay=sum(b.frame_delay_sum for b in bins) / frames if frames else None,
            frame_delay_jitter=sum(b.frame_jitter_sum for b in bins) / frame_jitter_n if frame_jitter_n else 0.0,
            sent_bytes=sum(b.sent_bytes for b in bins),
            delivered_bytes=delivered,
        )

    def feedback(self, interval_ms: float) -> LinkFeedback:
        """RTCP-style report over the trailing interval; delay holds its last value when idle."""
        if interval_ms < BIN_MS:
            raise ValueError(f"feedback interval must be at least {BIN_MS:.0f} ms")
        stats = self.interval_stats(self.now - interval_ms, self.now)
        if stats.delay is not None:
            self._last_fb_delay = stats.delay
        return LinkFeedback(t=self.now / 1000.0, throughput=stats.throughput, loss_ratio=stats.loss_ratio,
                            delay=self._last_fb_delay, delay_jitter=stats.delay_jitter)

    def accounting(self) -> Accounting:
        queued, inflight = self.link.in_link_bytes(self.now)
        return Accounting(sent=self.sent_bytes, delivered=self.delivered_bytes, lost=self.lost_bytes,
                          inflight=inflight, queued=queued)

    def bandwidth_now(self) -> float:
        return self.link.bandwidth_at(self.now)


def save_packet_log(records: Iterable[PacketRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PACKET_LOG_HEADER)
        for r in records:
            writer.writerow([r.seq, r.size, r.frame_id, repr(r.send_t),
                             "LOST" if r.arrive_t is None else repr(r.arrive_t)])
    return path
