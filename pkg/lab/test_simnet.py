"""
Tests for the packet-level video session simulator.
"""
import os
import sys

import numpy as np
import pytest

# Add the lab directory to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from metarate.config import LabConfig
from metarate.errors import DataError
from metarate.models import NetTrace
from metarate.simnet import (
    FrameSource, VideoSession, _Bin, load_frame_table, save_packet_log, snap_to_ladder,
)

CFG = LabConfig(frame_jitter=0.0)


def _session(bw, prop=20.0, seconds=30, cfg=CFG, seed=0, **kwargs):
    return VideoSession(NetTrace.from_arrays([bw] * seconds, prop), cfg, seed=seed, **kwargs)


class TestLadder:
    @pytest.mark.parametrize("b,level", [(0.57, 0.6), (5.0, 2.5), (0.05, 0.1), (1.0, 1.0)])
    def test_snap(self, b, level):
        assert snap_to_ladder(b, CFG.ladder) == pytest.approx(level)

    def test_target_must_be_positive(self):
        with pytest.raises(ValueError):
            _session(1.0).set_target_bitrate(0.0)

    def test_frame_source_mean_size(self):
        source = FrameSource(CFG.ladder, 30, 0.0, np.random.default_rng(0))
        source.select(1.2)
        assert source.next_frame_size() == 5000


class TestAdvance:
    def test_zero_advance_has_no_events(self):
        session = _session(1.0)
        session.advance(500)
        before = session.accounting()
        events = session.advance(0)
        assert events.empty
        assert session.now == 500
        assert session.accounting() == before

    def test_negative_advance(self):
        with pytest.raises(ValueError):
            _session(1.0).advance(-1)

    def test_underload_steady_state(self):
        session = _session(1.0, prop=20.0)
        session.set_target_bitrate(0.5)
        session.advance(5000)
        fb = session.feedback(1000)
        assert fb.loss_ratio == 0.0
        assert fb.throughput == pytest.approx(0.5, abs=0.02)
        # Round-trip floor plus the serialization of one packet at 1 Mbps.
        assert 40.0 <= fb.delay <= 40.0 + 10.0
        stats = session.interval_stats(4000, 5000)
        assert stats.frames == pytest.approx(30, abs=1)
        assert stats.frame_delay < CFG.late_frame_ms

    def test_overload_fills_queue_and_drops(self):
        session = _session(0.5, prop=20.0)
        session.set_target_bitrate(1.0)
        session.advance(10_000)
        fb = session.feedback(1000)
        assert fb.loss_ratio > 0.0
        assert fb.delay > 40.0 + 150.0
        assert fb.delay <= 40.0 + 250.0 + 10.0
        assert fb.throughput == pytest.approx(0.5, abs=0.05)

    def test_bytes_are_conserved(self):
        session = _session(0.8, prop=30.0, cfg=LabConfig(random_loss=0.02))
        rng = np.random.default_rng(0)
        for _ in range(100):
            session.set_target_bitrate(float(rng.uniform(0.1, 2.5)))
            session.advance(100)
            assert session.accounting().balanced

    def test_dead_link_never_delivers(self):
        session = VideoSession(NetTrace.from_arrays([1.0, 0.0], 20.0), CFG)
        session.advance(5000)
        acct = session.accounting()
        assert acct.balanced
        assert acct.queued > 0
        assert session.feedback(1000).throughput == 0.0

    def test_packet_log_is_deterministic(self):
        logs = []
        for _ in range(2):
            session = _session(0.7, cfg=LabConfig(random_loss=0.05), seed=9, record_packets=True)
            for step in range(50):
                session.set_target_bitrate(0.3 + 0.05 * (step % 20))
                session.advance(100)
            logs.append(session.packet_log)
        assert logs[0] == logs[1]
        assert any(r.lost for r in logs[0])


class TestFeedback:
    def test_empty_interval(self):
        fb = _session(1.0).feedback(100)
        assert fb.throughput == 0.0
        assert fb.loss_ratio == 0.0

    def test_delay_holds_when_nothing_arrives(self):
        session = VideoSession(NetTrace.from_arrays([1.0, 0.0, 0.0, 0.0, 0.0], 20.0), CFG)
        session.advance(1000)
        first = session.feedback(1000)
        session.advance(2000)
        later = session.feedback(1000)
        assert later.throughput == 0.0
        assert later.delay == first.delay
        assert later.loss_ratio > 0.9

    def test_loss_ratio(self):
        session = _session(1.0)
        session._bins = [_Bin(sent_pkts=100, lost_pkts=5)]
        assert session.interval_stats(0, 100).loss_ratio == pytest.approx(0.05)

    def test_interval_too_short(self):
        with pytest.raises(ValueError):
            _session(1.0).feedback(50)


def test_frame_table(tmp_path):
    path = tmp_path / "frames.csv"
    path.write_text("level_mbps,size_bytes\n0.5,1000\n0.5,3000\n1.0,4000\n", encoding="utf-8")
    table = load_frame_table(path)
    source = FrameSource(CFG.ladder, 30, 0.0, np.random.default_rng(0), table)
    source.select(0.5)
    assert {source.next_frame_size() for _ in range(50)} == {1000, 3000}
    source.select(2.0)
    assert source.next_frame_size() == round(2.0e6 / 240)


def test_frame_table_errors(tmp_path):
    path = tmp_path / "frames.csv"
    path.write_text("level,size\n0.5,1000\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_frame_table(path)
    with pytest.raises(DataError):
        load_frame_table(tmp_path / "missing.csv")


def test_save_packet_log(tmp_path):
    session = _session(0.3, record_packets=True)
    session.set_target_bitrate(2.5)
    session.advance(3000)
    path = save_packet_log(session.packet_log, tmp_path / "packets.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "seq,size,frame_id,send_t,arrive_t"
    assert len(lines) == len(session.packet_log) + 1
    assert any(line.endswith(",LOST") for line in lines[1:])
