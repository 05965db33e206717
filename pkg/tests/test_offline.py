import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgsync import kinlog, offline, store
from surgsync.offline import (
    OfflineError,
    decouple_and_convert,
    frame_schedule,
    hold_at,
    interp_linear,
    match_offline,
    record_offline,
    slot_stamp,
)
from surgsync.streams import SyntheticSourceConfig, Timestamp, open_synthetic_source

from _helpers import (
    frame_tag,
    image_descriptor,
    image_source,
    latched_descriptor,
    numeric_descriptor,
    numeric_source,
)

MS = 1_000_000


class TestSchedule:
    def test_integer_period(self):
        assert [slot_stamp(0, 10.0, i) for i in range(4)] == [
            0, 100_000_000, 200_000_000, 300_000_000,
        ]

    def test_non_integer_period_stays_within_one_ns(self):
        period = round(1e9 / 30.0)
        slots = [slot_stamp(0, 30.0, i) for i in range(1000)]
        diffs = {b - a for a, b in zip(slots, slots[1:])}
        assert diffs <= {period - 1, period, period + 1}
        assert all(abs(d - period) <= 1 for d in diffs)

    def test_two_seconds_at_ten_fps_gives_21_slots(self):
        assert len(frame_schedule(0, 2_000_000_000, 10.0)) == 21

    def test_anchored_at_start(self):
        sched = frame_schedule(5_000_000, 205_000_000, 10.0)
        assert sched == [5_000_000, 105_000_000, 205_000_000]

    def test_invalid_fps(self):
        with pytest.raises(ValueError):
            slot_stamp(0, 0.0, 1)


class TestCaptureStage:
    def test_sample_and_hold_per_slot(self, tmp_path):
        cam = image_source(
            image_descriptor(sid="cam"), [0, 95 * MS, 130 * MS, 280 * MS]
        )
        raw = record_offline([cam], 10.0, tmp_path, run_id="cap")
        slots = json.loads((raw / "meta" / "slots.json").read_text())["left"]
        stamps = json.loads((raw / "meta" / "frame_stamps.json").read_text())["left"]
        assert slots == [0, 100 * MS, 200 * MS]
        assert stamps == [0, 95 * MS, 130 * MS]  # latest frame at or before each slot
        names = sorted(p.name for p in (raw / "video" / "left").iterdir())
        assert names == [f"{t:019d}.png" for t in slots]

    def test_slot_exactly_on_new_frame_takes_it(self, tmp_path):
        cam = image_source(image_descriptor(sid="cam"), [0, 100 * MS])
        raw = record_offline([cam], 10.0, tmp_path, run_id="edge")
        stamps = json.loads((raw / "meta" / "frame_stamps.json").read_text())["left"]
        assert stamps == [0, 100 * MS]
        frame = store.read_frame(raw / "video" / "left" / f"{100 * MS:019d}.png")
        assert frame_tag(frame) == 1

    def test_kin_logged_verbatim(self, tmp_path):
        stamps = [3 * MS, 17 * MS, 40 * MS]
        values = [(0.5, -1.0), (0.25, 2.0), (1.0, 1.0)]
        kin = numeric_source(numeric_descriptor(sid="arm"), stamps, values=values)
        cam = image_source(image_descriptor(sid="cam"), [0, 100 * MS])
        raw = record_offline([cam, kin], 10.0, tmp_path, run_id="kin")
        log = kinlog.read_kinlog(raw / "kin" / "arm.sskb")
        assert log.topic == "arm"
        assert [(r.stamp_ns, r.values) for r in log.records] == list(zip(stamps, values))

    def test_start_and_end_times_recorded(self, tmp_path):
        cam = image_source(image_descriptor(sid="cam"), [5 * MS, 105 * MS])
        kin = numeric_source(numeric_descriptor(sid="arm"), [1 * MS, 90 * MS])
        raw = record_offline([cam, kin], 10.0, tmp_path, run_id="times")
        starts = json.loads((raw / "meta" / "start_times.json").read_text())
        ends = json.loads((raw / "meta" / "end_times.json").read_text())
        assert starts == {"left": 5 * MS, "arm": 1 * MS}
        assert ends == {"left": 105 * MS, "arm": 90 * MS}

    def test_empty_view_is_an_error(self, tmp_path):
        cam = image_source(image_descriptor(sid="cam"), [])
        with pytest.raises(OfflineError, match="no frames"):
            record_offline([cam], 10.0, tmp_path, run_id="none")


class TestDecouple:
    def _raw(self, tmp_path):
        cam = image_source(image_descriptor(sid="cam"), [0, 95 * MS, 130 * MS])
        kin = numeric_source(numeric_descriptor(sid="arm"), [0, 40 * MS])
        return record_offline([cam, kin], 10.0, tmp_path, run_id="dec")

    def test_reindexes_and_converts(self, tmp_path):
        raw = self._raw(tmp_path)
        original = (raw / "kin" / "arm.sskb").read_bytes()
        decouple_and_convert(raw)
        names = sorted(p.name for p in (raw / "video" / "left").iterdir())
        assert names == ["000000.png", "000001.png"]
        readable = raw / "kin" / "arm.jsonl"
        assert readable.is_file()
        # readable form re-encodes to the identical binary
        kinlog.from_readable(readable, tmp_path / "again.sskb")
        assert (tmp_path / "again.sskb").read_bytes() == original

    def test_idempotent(self, tmp_path):
        raw = self._raw(tmp_path)
        decouple_and_convert(raw)
        before = sorted(p.name for p in (raw / "video" / "left").iterdir())
        decouple_and_convert(raw)
        assert sorted(p.name for p in (raw / "video" / "left").iterdir()) == before

    def test_replay_same_before_and_after_decouple(self, tmp_path):
        raw = self._raw(tmp_path)
        pre = store.load_stream_for_replay(raw, "arm")
        pre_cam = store.load_stream_for_replay(raw, "cam")
        pre_bytes = [store.read_frame(p).data.tobytes() for p in pre_cam.frame_paths]
        decouple_and_convert(raw)
        post = store.load_stream_for_replay(raw, "arm")
        post_cam = store.load_stream_for_replay(raw, "cam")
        assert pre.stamps == post.stamps and pre.values == post.values
        assert pre_cam.stamps == post_cam.stamps
        assert pre_bytes == [
            store.read_frame(p).data.tobytes() for p in post_cam.frame_paths
        ]

    def test_requires_capture_dir(self, tmp_path):
        with pytest.raises(OfflineError, match="no meta"):
            decouple_and_convert(tmp_path)


class TestInterpolation:
    def test_exact_midpoint(self):
        assert interp_linear([0, 10], [(0.0,), (1.0,)], 5) == (0.5,)

    def test_exact_sample_hit(self):
        assert interp_linear([0, 10, 20], [(0.0,), (5.0,), (9.0,)], 10) == (5.0,)

    def test_endpoint_fallback(self):
        stamps = [10, 20]
        vals = [(1.0, 2.0), (3.0, 4.0)]
        assert interp_linear(stamps, vals, 5) == (1.0, 2.0)
        assert interp_linear(stamps, vals, 25) == (3.0, 4.0)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            interp_linear([], [], 0)

    @settings(max_examples=200, deadline=None)
    @given(
        t0=st.integers(0, 10**12),
        dt=st.integers(1, 10**9),
        q_off=st.integers(0, 10**9),
        v0=st.floats(-1e12, 1e12, allow_nan=False),
        v1=st.floats(-1e12, 1e12, allow_nan=False),
    )
    def test_property_correctly_rounded(self, t0, dt, q_off, v0, v1):
        t1 = t0 + dt
        q = t0 + (q_off % (dt + 1))
        got = interp_linear([t0, t1], [(v0,), (v1,)], q)[0]
        exact = Fraction(v0) + (Fraction(v1) - Fraction(v0)) * Fraction(q - t0, t1 - t0)
        assert got == float(exact)  # one final rounding, no accumulated error

    def test_hold_at(self):
        stamps = [10, 20]
        vals = [(1.0,), (2.0,)]
        assert hold_at(stamps, vals, 9, 1) == ((0.0,), 0)
        assert hold_at(stamps, vals, 10, 1) == ((1.0,), 0)
        assert hold_at(stamps, vals, 15, 1) == ((1.0,), -5)
        assert hold_at(stamps, vals, 99, 1) == ((2.0,), -79)


class TestMatching:
    def _capture(self, tmp_path):
        cam = image_source(
            image_descriptor(sid="cam"), [0, 95 * MS, 130 * MS, 280 * MS, 310 * MS]
        )
        kin = numeric_source(
            numeric_descriptor(sid="arm", arity=1),
            [0, 50 * MS, 150 * MS, 300 * MS],
            values=[(0.0,), (50e6,), (150e6,), (300e6,)],  # f(t) = t in ns
        )
        contact = numeric_source(
            latched_descriptor(sid="touch"), [120 * MS], values=[(1.0,)]
        )
        return record_offline([cam, kin, contact], 10.0, tmp_path, run_id="m")

    def test_nearest_matching_and_tie(self, tmp_path):
        raw = self._capture(tmp_path)
        manifest = match_offline(raw, tmp_path, reference_view="left", method="nearest")
        run_dir = tmp_path / "run_m"
        assert manifest.recorder_mode == "offline_matched"
        assert manifest.reject_count == 0 and manifest.drop_count == 0
        assert manifest.ref_stamps == [0, 100 * MS, 200 * MS, 300 * MS]
        records = store.read_records(run_dir, "arm")
        # slot 100 ms sits exactly between samples at 50 and 150: earlier wins
        assert [r.delta_ns for r in records] == [0, -50 * MS, -50 * MS, 0]
        assert [r.values[0] for r in records] == [0.0, 50e6, 150e6, 300e6]

    def test_linear_matching_synthesizes_at_slot(self, tmp_path):
        raw = self._capture(tmp_path)
        manifest = match_offline(
            raw, tmp_path, reference_view="left", method="linear", run_id="lin"
        )
        records = store.read_records(tmp_path / "run_lin", "arm")
        # the signal is f(t) = t, so interpolation lands exactly on the slot
        assert [r.values[0] for r in records] == [0.0, 1e8, 2e8, 3e8]
        assert all(r.delta_ns == 0 for r in records)
        assert manifest.schedule["method"] == "linear"

    def test_latched_held_offline(self, tmp_path):
        raw = self._capture(tmp_path)
        match_offline(raw, tmp_path, reference_view="left", method="nearest")
        records = store.read_records(tmp_path / "run_m", "touch")
        assert records[0].values == (0.0,) and records[0].delta_ns == 0
        assert records[1].values == (0.0,)  # 120 ms sample is after the 100 ms slot
        assert records[2].values == (1.0,) and records[2].delta_ns == -80 * MS
        assert records[3].values == (1.0,)

    def test_reference_view_has_zero_delta(self, tmp_path):
        raw = self._capture(tmp_path)
        match_offline(raw, tmp_path, reference_view="left", method="nearest")
        cam_records = store.read_records(tmp_path / "run_m", "cam")
        assert all(r.delta_ns == 0 for r in cam_records)

    def test_unknown_view_or_method(self, tmp_path):
        raw = self._capture(tmp_path)
        with pytest.raises(OfflineError, match="reference view"):
            match_offline(raw, tmp_path, reference_view="top", method="nearest")
        with pytest.raises(ValueError, match="method"):
            match_offline(raw, tmp_path, reference_view="left", method="cubic")

    def test_second_view_matched_by_slot(self, tmp_path):
        cam = image_source(image_descriptor(sid="cam"), [0, 100 * MS, 200 * MS])
        side = image_source(
            image_descriptor(sid="cam_s", view="side"), [30 * MS, 130 * MS, 230 * MS]
        )
        kin = numeric_source(numeric_descriptor(sid="arm", arity=1), [0, 200 * MS],
                             values=[(0.0,), (1.0,)])
        raw = record_offline([cam, side, kin], 10.0, tmp_path, run_id="mv")
        match_offline(raw, tmp_path, reference_view="left", method="nearest")
        run_dir = tmp_path / "run_mv"
        side_records = store.read_records(run_dir, "cam_s")
        # side slots are anchored at 30 ms: each left slot is 30 ms behind one
        assert [r.delta_ns for r in side_records] == [30 * MS, 30 * MS, 30 * MS]
        assert frame_tag(store.read_frame(run_dir / "frames" / "side" / "000001.png")) == 1


class TestEndToEnd:
    def test_uniform_spacing_and_valid_layout(self, tmp_path):
        mk = SyntheticSourceConfig
        configs = [
            mk(image_descriptor(sid="cam_l", view="left", rate=30.0),
               jitter_std_ms=1.0, seed=21),
            mk(image_descriptor(sid="cam_r", view="right", rate=30.0),
               jitter_std_ms=1.0, latency_offset_ms=1.5, seed=22),
            mk(numeric_descriptor(sid="arm", rate=100.0, arity=3),
               jitter_std_ms=0.5, seed=23),
            mk(latched_descriptor(sid="touch", rate=50.0), jitter_std_ms=0.5, seed=24),
        ]
        end = Timestamp.from_s(3.0)
        sources = [open_synthetic_source(c, end) for c in configs]
        raw = record_offline(sources, 10.0, tmp_path, run_id="e2e")
        manifest = match_offline(raw, tmp_path, reference_view="left", method="nearest")
        run_dir = tmp_path / "run_e2e"

        diffs = {b - a for a, b in zip(manifest.ref_stamps, manifest.ref_stamps[1:])}
        assert diffs == {100_000_000}
        assert manifest.reject_count == 0
        assert store.validate_run(run_dir) == []
        # same structural layout as the online recorder's output
        assert (run_dir / "manifest.json").is_file()
        for view in ("left", "right"):
            frames = list((run_dir / "frames" / view).glob("*.png"))
            assert len(frames) == manifest.packet_count
        for sid in ("cam_l", "cam_r", "arm", "touch"):
            assert len(store.read_records(run_dir, sid)) == manifest.packet_count
