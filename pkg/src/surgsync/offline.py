"""Fixed-rate capture and after-the-fact matching.

Recording is split in two so nothing on the hot path depends on matching:

1. record_offline() writes each camera view at a fixed frame rate
   (sample-and-hold of the most recent frame per scheduled slot, frames named
   by slot stamp) and every kinematic stream verbatim as a binary log.
2. decouple_and_convert() renames frames to zero-based indices and converts
   the binary logs to a readable JSONL form; match_offline() then matches or
   interpolates everything onto the reference view's slot schedule and emits
   a dataset with the same layout the online recorder produces.

Because slot stamps are start + round(i * 1e9 / fps), consecutive reference
spacings differ from the nominal period by at most one nanosecond, and no
packet is ever rejected: every slot has a frame by construction and kinematic
matching has no tolerance gate here.
"""

from __future__ import annotations

import json
import shutil
import time
import uuid
from bisect import bisect_left, bisect_right
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import kinlog, store
from .online import MatchedImage, MatchedValues, SyncedPacket, get_closest, write_packet
from .streams import NS_PER_S, SampleSource, StreamDescriptor, StreamKind

RECORDING_META = "recording.json"


class OfflineError(RuntimeError):
    pass


def slot_stamp(start_ns: int, fps: float, index: int) -> int:
    """Scheduled capture instant: start + round(index * 1e9 / fps)."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    return start_ns + round(Fraction(index) * Fraction(NS_PER_S) / Fraction(fps))


def frame_schedule(start_ns: int, end_ns: int, fps: float) -> List[int]:
    """All slot stamps from start through end inclusive."""
    out = []
    i = 0
    while True:
        t = slot_stamp(start_ns, fps, i)
        if t > end_ns:
            return out
        out.append(t)
        i += 1


def _stamp_frame_name(slot_ns: int) -> str:
    if slot_ns < 0:
        raise ValueError("slot stamps must be nonnegative for frame naming")
    return f"{slot_ns:019d}.png"


def record_offline(
    sources: Sequence[SampleSource],
    fps: float,
    out_root: Path,
    *,
    run_id: Optional[str] = None,
) -> Path:
    """Stage one: fixed-rate frame capture plus verbatim kinematic logging.

    Each view keeps its own slot schedule anchored at its first frame stamp;
    the frame stored for a slot is the most recent one at or before the slot
    instant. Returns the raw run directory.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    run_id = run_id or uuid.uuid4().hex[:8]
    raw_dir = Path(out_root) / f"raw_{run_id}"
    (raw_dir / "meta").mkdir(parents=True, exist_ok=True)

    frame_stamps: Dict[str, List[int]] = {}
    slots: Dict[str, List[int]] = {}
    start_times: Dict[str, int] = {}
    end_times: Dict[str, int] = {}

    for src in sources:
        d = src.descriptor
        if d.kind == StreamKind.IMAGE:
            view_slots, view_stamps = _capture_view(src, fps, raw_dir / "video" / d.label)
            if not view_slots:
                raise OfflineError(f"view {d.label!r} produced no frames")
            slots[d.label] = view_slots
            frame_stamps[d.label] = view_stamps
            start_times[d.label] = view_stamps[0]
            end_times[d.label] = view_stamps[-1]
        else:
            first, last = _log_kin_stream(src, raw_dir / "kin")
            if first is not None:
                start_times[d.stream_id] = first
                end_times[d.stream_id] = last

    meta = {
        "run_id": run_id,
        "fps": fps,
        "created_at_ns": time.time_ns(),
        "streams": [s.descriptor.to_dict() for s in sources],
    }
    for name, payload in (
        (RECORDING_META, meta),
        ("frame_stamps.json", frame_stamps),
        ("slots.json", slots),
        ("start_times.json", start_times),
        ("end_times.json", end_times),
    ):
        with open(raw_dir / "meta" / name, "w") as fh:
            json.dump(payload, fh, indent=1)
    return raw_dir


def _capture_view(
    src: SampleSource, fps: float, view_dir: Path
) -> Tuple[List[int], List[int]]:
    """Sample-and-hold capture of one view. Returns (slot stamps, source stamps)."""
    view_dir.mkdir(parents=True, exist_ok=True)
    slot_stamps: List[int] = []
    source_stamps: List[int] = []
    first_ns: Optional[int] = None
    hold = None
    index = 0

    def emit(t_ns: int) -> None:
        store.save_frame_png(hold.image, view_dir / _stamp_frame_name(t_ns))
        slot_stamps.append(t_ns)
        source_stamps.append(hold.stamp.nanos)

    for sample in src:
        s = sample.stamp.nanos
        if first_ns is None:
            first_ns = s
        else:
            # flush every slot that falls strictly before the new frame;
            # a slot landing exactly on the new stamp gets the new frame
            while True:
                t = slot_stamp(first_ns, fps, index)
                if t >= s:
                    break
                emit(t)
                index += 1
        hold = sample
    if hold is None:
        return [], []
    while True:
        t = slot_stamp(first_ns, fps, index)
        if t > hold.stamp.nanos:
            break
        emit(t)
        index += 1
    return slot_stamps, source_stamps


def _log_kin_stream(src: SampleSource, kin_dir: Path):
    d = src.descriptor
    safe = d.stream_id.replace("/", "__")
    path = kin_dir / f"{safe}.sskb"
    first = last = None
    with kinlog.KinLogWriter(path, d.stream_id, d.arity) as w:
        for sample in src:
            w.append(sample.stamp.nanos, sample.values)
            if first is None:
                first = sample.stamp.nanos
            last = sample.stamp.nanos
    return first, last


# --- stage two -----------------------------------------------------------------


def load_recording_meta(raw_dir: Path) -> dict:
    path = Path(raw_dir) / "meta" / RECORDING_META
    if not path.is_file():
        raise OfflineError(f"{raw_dir} is not a fixed-rate capture (no meta)")
    with open(path) as fh:
        return json.load(fh)


def decouple_and_convert(raw_dir: Path) -> None:
    """Re-index stamp-named frames to %06d.png and convert binary kinematic
    logs to readable JSONL next to them. Safe to call more than once."""
    raw_dir = Path(raw_dir)
    load_recording_meta(raw_dir)  # existence check
    video_root = raw_dir / "video"
    if video_root.is_dir():
        for view_dir in sorted(p for p in video_root.iterdir() if p.is_dir()):
            stamped = sorted(
                p for p in view_dir.glob("*.png") if len(p.stem) == 19 and p.stem.isdigit()
            )
            for i, p in enumerate(stamped):
                p.rename(view_dir / store.frame_name(i))
    kin_root = raw_dir / "kin"
    if kin_root.is_dir():
        for binary in sorted(kin_root.glob("*.sskb")):
            kinlog.to_readable(binary, binary.with_suffix(".jsonl"))


def interp_linear(
    stamps: Sequence[int], values: Sequence[Sequence[float]], t_ns: int
) -> Tuple[float, ...]:
    """Componentwise linear interpolation at t, exact to the final rounding.

    The blend is evaluated in rational arithmetic and rounded to float once,
    so the result is the correctly rounded value of v0 + (v1-v0)*(t-t0)/(t1-t0).
    Queries outside the recorded range return the nearest endpoint.
    """
    if len(stamps) == 0:
        raise ValueError("empty stream")
    pos = bisect_left(stamps, t_ns)
    if pos == len(stamps):
        return tuple(float(v) for v in values[-1])
    if stamps[pos] == t_ns:
        return tuple(float(v) for v in values[pos])
    if pos == 0:
        return tuple(float(v) for v in values[0])
    t0, t1 = stamps[pos - 1], stamps[pos]
    w = Fraction(t_ns - t0, t1 - t0)
    out = []
    for v0, v1 in zip(values[pos - 1], values[pos]):
        exact = Fraction(v0) + (Fraction(v1) - Fraction(v0)) * w
        out.append(float(exact))
    return tuple(out)


def hold_at(
    stamps: Sequence[int], values: Sequence[Sequence[float]], t_ns: int, arity: int
) -> Tuple[Tuple[float, ...], int]:
    """Most recent value at or before t (sample-and-hold); zeros when none."""
    pos = bisect_right(stamps, t_ns) - 1
    if pos < 0:
        return (0.0,) * arity, 0
    return tuple(values[pos]), stamps[pos] - t_ns


def match_offline(
    raw_dir: Path,
    out_root: Path,
    *,
    reference_view: str,
    method: str = "nearest",
    run_id: Optional[str] = None,
) -> store.RunManifest:
    """Stage two: align every stream to the reference view's slot schedule.

    method="nearest" takes the closest kinematic sample (earlier wins ties);
    method="linear" interpolates between the bracketing samples and records
    the synthesized value at the slot stamp itself (delta 0). Other camera
    views contribute the frame of their nearest slot.
    """
    if method not in ("nearest", "linear"):
        raise ValueError(f"unknown matching method {method!r}")
    raw_dir = Path(raw_dir)
    meta = load_recording_meta(raw_dir)
    decouple_and_convert(raw_dir)
    descriptors = [StreamDescriptor.from_dict(d) for d in meta["streams"]]
    with open(raw_dir / "meta" / "slots.json") as fh:
        slots: Dict[str, List[int]] = {k: [int(t) for t in v] for k, v in json.load(fh).items()}

    views = [d for d in descriptors if d.kind == StreamKind.IMAGE]
    by_label = {d.label: d for d in views}
    if reference_view not in by_label:
        raise OfflineError(f"reference view {reference_view!r} not in recording")
    ref_slots = slots[reference_view]
    if not ref_slots:
        raise OfflineError(f"reference view {reference_view!r} has no frames")

    kin_logs: Dict[str, kinlog.KinLog] = {}
    for d in descriptors:
        if d.kind == StreamKind.IMAGE:
            continue
        safe = d.stream_id.replace("/", "__")
        log = kinlog.read_readable(raw_dir / "kin" / f"{safe}.jsonl")
        if d.kind == StreamKind.NUMERIC and not log.records:
            raise OfflineError(f"stream {d.stream_id!r} has no samples to match")
        kin_logs[d.stream_id] = log

    run_id = run_id or meta.get("run_id") or uuid.uuid4().hex[:8]
    out_root = Path(out_root)
    out_dir = out_root / f"run_{run_id}"
    temp_root = out_root / f".tmp_{run_id}"
    if temp_root.exists():
        shutil.rmtree(temp_root)
    temp_root.mkdir(parents=True)

    for ref_ns in ref_slots:
        images: List[MatchedImage] = []
        numerics: List[MatchedValues] = []
        for d in views:
            view_slots = slots[d.label]
            i, delta = get_closest(view_slots, ref_ns)
            frame = store.read_frame(raw_dir / "video" / d.label / store.frame_name(i))
            images.append(MatchedImage(d.stream_id, d.label, view_slots[i], frame))
        for d in descriptors:
            if d.kind == StreamKind.IMAGE:
                continue
            log = kin_logs[d.stream_id]
            stamps = log.stamps
            vals = [r.values for r in log.records]
            if d.kind == StreamKind.LATCHED_NUMERIC:
                held, delta = hold_at(stamps, vals, ref_ns, d.arity)
                numerics.append(MatchedValues(d.stream_id, held, delta, True))
            elif method == "linear":
                vv = interp_linear(stamps, vals, ref_ns)
                numerics.append(MatchedValues(d.stream_id, vv, 0, False))
            else:
                i, delta = get_closest(stamps, ref_ns)
                numerics.append(MatchedValues(d.stream_id, tuple(vals[i]), delta, False))
        write_packet(SyncedPacket(ref_ns, images, numerics), temp_root)

    return store.reformat_data_storage(
        temp_root,
        out_dir,
        run_id=run_id,
        recorder_mode="offline_matched",
        streams=descriptors,
        schedule={"fps": float(meta["fps"]), "reference_view": reference_view, "method": method},
        reject_count=0,
        drop_count=0,
    )
