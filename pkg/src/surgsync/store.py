"""Canonical on-disk run layout shared by both recorders, plus loaders.

Final layout:

    run_<id>/manifest.json
             frames/{left,right,side}/<%06d>.png
             kinematics/<stream>.records        one JSON line per packet
             annotations/annotations.json
             calib/{intrinsics.json, stereo.json, handeye.json}   (optional)

Each records line is ``{"stamp": <ref nanos>, "values": [...], "delta_ns": n}``
where stamp is the packet's reference stamp and delta_ns is the matched
sample's stamp minus the reference stamp. Image streams keep values empty;
their pixel data lives in frames/. Lexicographic frame-index order equals
chronological order.
"""

from __future__ import annotations

import json
import os
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .streams import ImageFrame, StreamDescriptor, StreamKind, Timestamp

MANIFEST_NAME = "manifest.json"
PACKET_RECORD_NAME = "kin.json"


class StoreError(RuntimeError):
    pass


class ReformatError(StoreError):
    """Raised when the temp tree cannot be reformatted; nothing is deleted."""


class AnnotationValidationError(ValueError):
    pass


class AnnotationConflictError(RuntimeError):
    """Write attempted against a stale revision."""


# Serializes annotation writes within one process; cross-process safety comes
# from the atomic replace plus the revision check.
_annotation_write_lock = threading.Lock()


@dataclass
class RecordLine:
    stamp_ns: int  # packet reference stamp
    values: tuple
    delta_ns: int

    @property
    def sample_stamp_ns(self) -> int:
        return self.stamp_ns + self.delta_ns


@dataclass
class RunManifest:
    run_id: str
    recorder_mode: str  # "online" | "offline_matched"
    streams: list  # list[StreamDescriptor]
    packet_count: int
    reject_count: int = 0
    drop_count: int = 0
    ref_stamps: list = field(default_factory=list)
    sync_config: dict = field(default_factory=dict)
    schedule: Optional[dict] = None
    calibration: dict = field(default_factory=dict)
    dirty: bool = False
    warnings: list = field(default_factory=list)
    created_at_ns: int = 0

    def descriptor(self, stream_id: str) -> StreamDescriptor:
        for d in self.streams:
            if d.stream_id == stream_id:
                return d
        raise KeyError(stream_id)

    def image_streams(self) -> list:
        return [d for d in self.streams if d.kind == StreamKind.IMAGE]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "recorder_mode": self.recorder_mode,
            "created_at_ns": self.created_at_ns,
            "streams": [d.to_dict() for d in self.streams],
            "packet_count": self.packet_count,
            "reject_count": self.reject_count,
            "drop_count": self.drop_count,
            "ref_stamps": list(self.ref_stamps),
            "sync_config": self.sync_config,
            "schedule": self.schedule,
            "calibration": self.calibration,
            "dirty": self.dirty,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            run_id=d["run_id"],
            recorder_mode=d["recorder_mode"],
            streams=[StreamDescriptor.from_dict(s) for s in d["streams"]],
            packet_count=int(d["packet_count"]),
            reject_count=int(d.get("reject_count", 0)),
            drop_count=int(d.get("drop_count", 0)),
            ref_stamps=[int(s) for s in d.get("ref_stamps", [])],
            sync_config=d.get("sync_config", {}),
            schedule=d.get("schedule"),
            calibration=d.get("calibration", {}),
            dirty=bool(d.get("dirty", False)),
            warnings=list(d.get("warnings", [])),
            created_at_ns=int(d.get("created_at_ns", 0)),
        )

    def save(self, run_dir: Path) -> None:
        _atomic_write_json(Path(run_dir) / MANIFEST_NAME, self.to_dict())


def load_manifest(run_dir: Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    with open(path) as fh:
        return RunManifest.from_dict(json.load(fh))


def list_runs(root: Path) -> list:
    """Run directories under root, identified by a parseable manifest."""
    root = Path(root)
    if not root.is_dir():
        return []
    out = []
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / MANIFEST_NAME).is_file():
            out.append(child)
    return out


def _atomic_write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, path)


# --- frames ---------------------------------------------------------------


def frame_name(index: int) -> str:
    return f"{index:06d}.png"


def frames_dir(run_dir: Path, view: str) -> Path:
    return Path(run_dir) / "frames" / view


def frame_path(run_dir: Path, view: str, index: int) -> Path:
    return frames_dir(run_dir, view) / frame_name(index)


def save_frame_png(frame: ImageFrame, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if frame.channels == 1:
        img = Image.fromarray(frame.data[:, :, 0], mode="L")
    else:
        img = Image.fromarray(frame.data, mode="RGB")
    img.save(path, format="PNG")


def read_frame(path: Path) -> ImageFrame:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.dtype != np.uint8:
        raise StoreError(f"{path}: expected 8-bit PNG, got {arr.dtype}")
    h, w, c = arr.shape
    return ImageFrame(width=w, height=h, channels=c, data=np.ascontiguousarray(arr))


# --- per-stream record files ----------------------------------------------


def records_path(run_dir: Path, stream_id: str) -> Path:
    safe = stream_id.replace("/", "__")
    return Path(run_dir) / "kinematics" / f"{safe}.records"


def read_records(run_dir: Path, stream_id: str) -> list:
    path = records_path(run_dir, stream_id)
    if not path.is_file():
        raise StoreError(f"no records for stream {stream_id!r} in {run_dir}")
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.append(
                RecordLine(
                    stamp_ns=int(d["stamp"]),
                    values=tuple(float(v) for v in d["values"]),
                    delta_ns=int(d["delta_ns"]),
                )
            )
    return out


def _record_line_json(stamp_ns: int, values: Sequence[float], delta_ns: int) -> str:
    return json.dumps({"stamp": stamp_ns, "values": list(values), "delta_ns": delta_ns})


# --- reformat: temp packet folders -> final layout --------------------------


def packet_temp_dir(temp_root: Path, ref_stamp: Timestamp) -> Path:
    if ref_stamp.nanos < 0:
        raise ValueError("reference stamps must be nonnegative for folder naming")
    return Path(temp_root) / f"{ref_stamp.nanos:019d}"


def _list_packet_dirs(temp_root: Path) -> list:
    dirs = []
    for child in Path(temp_root).iterdir():
        if child.is_dir() and len(child.name) == 19 and child.name.isdigit():
            dirs.append(child)
    return sorted(dirs, key=lambda p: p.name)


def packet_dir_is_complete(packet_dir: Path, image_labels: Sequence[str]) -> bool:
    if not (packet_dir / PACKET_RECORD_NAME).is_file():
        return False
    for label in image_labels:
        if not (packet_dir / f"{label}.png").is_file():
            return False
    return True


def remove_incomplete_packet_dirs(temp_root: Path, image_labels: Sequence[str]) -> int:
    """Delete temp folders missing a required file; returns how many went."""
    removed = 0
    if not Path(temp_root).is_dir():
        return 0
    for d in _list_packet_dirs(temp_root):
        if not packet_dir_is_complete(d, image_labels):
            shutil.rmtree(d)
            removed += 1
    return removed


def reformat_data_storage(
    temp_root: Path,
    out_dir: Path,
    *,
    run_id: str,
    recorder_mode: str,
    streams: Sequence[StreamDescriptor],
    sync_config: Optional[dict] = None,
    schedule: Optional[dict] = None,
    reject_count: int = 0,
    drop_count: int = 0,
    dirty: bool = False,
    warnings: Sequence[str] = (),
    calibration: Optional[dict] = None,
) -> RunManifest:
    """Turn zero-padded temp packet folders into the final dataset layout.

    Aborts (nothing deleted) if any folder is incomplete; cleanup is the
    recorder's job before calling this.
    """
    temp_root = Path(temp_root)
    out_dir = Path(out_dir)
    streams = list(streams)
    image_labels = [d.label for d in streams if d.kind == StreamKind.IMAGE]
    packet_dirs = _list_packet_dirs(temp_root) if temp_root.is_dir() else []

    # validate everything up front so a failure leaves the temp tree intact
    packets = []
    prev_stamp = None
    for d in packet_dirs:
        if not packet_dir_is_complete(d, image_labels):
            raise ReformatError(f"incomplete packet folder: {d}")
        with open(d / PACKET_RECORD_NAME) as fh:
            rec = json.load(fh)
        ref = int(rec["ref_stamp"])
        if ref != int(d.name):
            raise ReformatError(f"{d}: folder name does not match ref_stamp {ref}")
        if prev_stamp is not None and ref <= prev_stamp:
            raise ReformatError(f"{d}: reference stamps not strictly increasing")
        prev_stamp = ref
        packets.append((d, rec))

    out_dir.mkdir(parents=True, exist_ok=True)
    ref_stamps = []
    record_lines: dict = {s.stream_id: [] for s in streams}
    for index, (d, rec) in enumerate(packets):
        ref = int(rec["ref_stamp"])
        ref_stamps.append(ref)
        for img in rec["images"]:
            dest = frame_path(out_dir, img["view"], index)
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(d / f"{img['view']}.png"), str(dest))
            record_lines[img["stream_id"]].append(
                _record_line_json(ref, [], int(img["stamp"]) - ref)
            )
        for entry in rec["streams"]:
            record_lines[entry["stream_id"]].append(
                _record_line_json(ref, entry["values"], int(entry["delta_ns"]))
            )

    for stream in streams:
        path = records_path(out_dir, stream.stream_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for line in record_lines[stream.stream_id]:
                fh.write(line + "\n")

    manifest = RunManifest(
        run_id=run_id,
        recorder_mode=recorder_mode,
        streams=streams,
        packet_count=len(packets),
        reject_count=reject_count,
        drop_count=drop_count,
        ref_stamps=ref_stamps,
        sync_config=dict(sync_config or {}),
        schedule=schedule,
        calibration=dict(calibration or {}),
        dirty=dirty,
        warnings=list(warnings),
        created_at_ns=time.time_ns(),
    )
    manifest.save(out_dir)
    if temp_root.is_dir():
        shutil.rmtree(temp_root)
    return manifest


# --- validation -------------------------------------------------------------


def validate_run(run_dir: Path) -> list:
    """Consistency scan of a final run; an empty list means valid."""
    run_dir = Path(run_dir)
    violations = []
    try:
        manifest = load_manifest(run_dir)
    except Exception as exc:  # unreadable manifest dooms everything else
        return [f"manifest unreadable: {exc}"]

    n = manifest.packet_count
    if len(manifest.ref_stamps) != n:
        violations.append(
            f"manifest packet_count {n} != {len(manifest.ref_stamps)} ref stamps"
        )
    for a, b in zip(manifest.ref_stamps, manifest.ref_stamps[1:]):
        if b <= a:
            violations.append(f"ref stamps not strictly increasing at {a} -> {b}")
            break

    for d in manifest.image_streams():
        fdir = frames_dir(run_dir, d.label)
        if not fdir.is_dir():
            violations.append(f"missing frames directory for view {d.label!r}")
            continue
        names = sorted(p.name for p in fdir.glob("*.png"))
        expected = [frame_name(i) for i in range(n)]
        if names != expected:
            violations.append(
                f"view {d.label!r}: frame files do not match packet count {n}"
            )

    tol_ns = None
    if manifest.recorder_mode == "online":
        tol_ms = manifest.sync_config.get("tolerance_ms")
        if tol_ms is not None:
            tol_ns = round(float(tol_ms) * 1_000_000)

    for d in manifest.streams:
        try:
            lines = read_records(run_dir, d.stream_id)
        except StoreError as exc:
            violations.append(str(exc))
            continue
        if len(lines) != n:
            violations.append(
                f"stream {d.stream_id!r}: {len(lines)} record lines, expected {n}"
            )
            continue
        for i, line in enumerate(lines[: len(manifest.ref_stamps)]):
            if line.stamp_ns != manifest.ref_stamps[i]:
                violations.append(
                    f"stream {d.stream_id!r}: line {i} stamp {line.stamp_ns} "
                    f"!= ref stamp {manifest.ref_stamps[i]}"
                )
                break
        if d.kind == StreamKind.IMAGE:
            if any(line.values for line in lines):
                violations.append(f"stream {d.stream_id!r}: image records carry values")
        else:
            if any(len(line.values) != d.arity for line in lines):
                violations.append(
                    f"stream {d.stream_id!r}: record arity != descriptor arity {d.arity}"
                )
        if d.kind == StreamKind.LATCHED_NUMERIC:
            if any(line.delta_ns > 0 for line in lines):
                violations.append(
                    f"stream {d.stream_id!r}: latched sample stamp after reference"
                )
        elif tol_ns is not None:
            bad = [line for line in lines if abs(line.delta_ns) > tol_ns]
            if bad:
                violations.append(
                    f"stream {d.stream_id!r}: {len(bad)} records exceed the "
                    f"{tol_ns} ns tolerance"
                )

    if manifest.recorder_mode == "offline_matched" and manifest.schedule:
        fps = float(manifest.schedule.get("fps", 0) or 0)
        if fps > 0 and len(manifest.ref_stamps) >= 2:
            period = round(1_000_000_000 / fps)
            for a, b in zip(manifest.ref_stamps, manifest.ref_stamps[1:]):
                if abs((b - a) - period) > 1:
                    violations.append(
                        f"offline run not uniform: spacing {b - a} ns vs period {period} ns"
                    )
                    break

    ann_path = Path(run_dir) / "annotations" / "annotations.json"
    if ann_path.is_file():
        try:
            aset = read_annotations(run_dir)
            validate_annotations(aset)
        except Exception as exc:
            violations.append(f"annotations invalid: {exc}")

    return violations


# --- annotations ------------------------------------------------------------


@dataclass(frozen=True)
class ContactInterval:
    start_ns: int
    end_ns: int
    value: bool

    def to_dict(self) -> dict:
        return {"start": self.start_ns, "end": self.end_ns, "value": self.value}


@dataclass(frozen=True)
class PhaseInterval:
    start_ns: int
    end_ns: int
    label: str

    def to_dict(self) -> dict:
        return {"start": self.start_ns, "end": self.end_ns, "label": self.label}


@dataclass
class AnnotationSet:
    contact: dict = field(default_factory=dict)  # arm -> list[ContactInterval]
    phases: list = field(default_factory=list)  # list[PhaseInterval]
    annotator: str = ""
    revision: int = 0

    def to_dict(self) -> dict:
        return {
            "contact": {
                arm: [iv.to_dict() for iv in track] for arm, track in self.contact.items()
            },
            "phases": [iv.to_dict() for iv in self.phases],
            "annotator": self.annotator,
            "revision": self.revision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationSet":
        return cls(
            contact={
                arm: [
                    ContactInterval(int(iv["start"]), int(iv["end"]), bool(iv["value"]))
                    for iv in track
                ]
                for arm, track in d.get("contact", {}).items()
            },
            phases=[
                PhaseInterval(int(iv["start"]), int(iv["end"]), str(iv["label"]))
                for iv in d.get("phases", [])
            ],
            annotator=str(d.get("annotator", "")),
            revision=int(d.get("revision", 0)),
        )


def _check_track(name: str, intervals: Sequence) -> list:
    problems = []
    prev_end = None
    for iv in intervals:
        start = iv.start_ns
        end = iv.end_ns
        if start >= end:
            problems.append(f"{name}: interval start {start} not before end {end}")
        if prev_end is not None and start < prev_end:
            problems.append(f"{name}: interval starting at {start} overlaps previous")
        prev_end = end if prev_end is None else max(prev_end, end)
    return problems


def validate_annotations(aset: AnnotationSet) -> None:
    problems = []
    for arm, track in aset.contact.items():
        problems.extend(_check_track(f"contact[{arm}]", track))
    problems.extend(_check_track("phases", aset.phases))
    if problems:
        raise AnnotationValidationError("; ".join(problems))


def annotations_path(run_dir: Path) -> Path:
    return Path(run_dir) / "annotations" / "annotations.json"


def read_annotations(run_dir: Path) -> AnnotationSet:
    path = annotations_path(run_dir)
    if not path.is_file():
        return AnnotationSet()
    with open(path) as fh:
        return AnnotationSet.from_dict(json.load(fh))


def write_annotations(run_dir: Path, aset: AnnotationSet) -> AnnotationSet:
    """Persist an annotation set; `aset.revision` must match the stored one.

    The stored revision increments on every successful write; the write is
    atomic (temp file + rename).
    """
    validate_annotations(aset)
    with _annotation_write_lock:
        current = read_annotations(run_dir)
        if aset.revision != current.revision:
            raise AnnotationConflictError(
                f"stale revision {aset.revision}, current is {current.revision}"
            )
        stored = AnnotationSet(
            contact=aset.contact,
            phases=aset.phases,
            annotator=aset.annotator,
            revision=current.revision + 1,
        )
        _atomic_write_json(annotations_path(run_dir), stored.to_dict())
    return stored


# --- replay support ---------------------------------------------------------


@dataclass
class ReplayEntries:
    descriptor: StreamDescriptor
    stamps: list  # list[int]
    values: Optional[list] = None  # list[tuple] for numeric streams
    frame_paths: Optional[list] = None  # list[Path] for image streams


def load_stream_for_replay(run_dir: Path, stream_id: str) -> ReplayEntries:
    """Resolve one stream of either a final run or a raw fixed-rate capture."""
    run_dir = Path(run_dir)
    if (run_dir / MANIFEST_NAME).is_file():
        return _load_final_stream(run_dir, stream_id)
    if (run_dir / "meta" / "recording.json").is_file():
        return _load_raw_stream(run_dir, stream_id)
    raise StoreError(f"{run_dir} is not a recognizable run directory")


def _load_final_stream(run_dir: Path, stream_id: str) -> ReplayEntries:
    manifest = load_manifest(run_dir)
    descriptor = manifest.descriptor(stream_id)
    lines = read_records(run_dir, stream_id)
    stamps = [line.sample_stamp_ns for line in lines]
    if descriptor.kind == StreamKind.IMAGE:
        paths = [frame_path(run_dir, descriptor.label, i) for i in range(len(lines))]
        missing = [p for p in paths if not p.is_file()]
        if missing:
            raise StoreError(f"missing frame file {missing[0]}")
        return ReplayEntries(descriptor, stamps, frame_paths=paths)
    return ReplayEntries(descriptor, stamps, values=[line.values for line in lines])


def _load_raw_stream(run_dir: Path, stream_id: str) -> ReplayEntries:
    from . import kinlog

    with open(run_dir / "meta" / "recording.json") as fh:
        meta = json.load(fh)
    descriptor = None
    for d in meta["streams"]:
        if d["stream_id"] == stream_id:
            descriptor = StreamDescriptor.from_dict(d)
    if descriptor is None:
        raise StoreError(f"stream {stream_id!r} not in recording metadata")

    if descriptor.kind == StreamKind.IMAGE:
        stamps_file = run_dir / "meta" / "frame_stamps.json"
        with open(stamps_file) as fh:
            stamp_map = json.load(fh)
        stamps = [int(s) for s in stamp_map.get(descriptor.label, [])]
        vdir = run_dir / "video" / descriptor.label
        paths = [vdir / frame_name(i) for i in range(len(stamps))]
        if any(not p.is_file() for p in paths):
            # frames still carry their slot-stamp names (decoupling not run yet)
            paths = sorted(
                p for p in vdir.glob("*.png") if len(p.stem) == 19 and p.stem.isdigit()
            )
        if len(paths) != len(stamps):
            raise StoreError(
                f"view {descriptor.label!r}: {len(paths)} frames but "
                f"{len(stamps)} recorded stamps"
            )
        return ReplayEntries(descriptor, stamps, frame_paths=paths)

    safe = stream_id.replace("/", "__")
    readable = run_dir / "kin" / f"{safe}.jsonl"
    binary = run_dir / "kin" / f"{safe}.sskb"
    if readable.is_file():
        log = kinlog.read_readable(readable)
    elif binary.is_file():
        log = kinlog.read_kinlog(binary)
    else:
        raise StoreError(f"no kinematic log for stream {stream_id!r} in {run_dir}")
    return ReplayEntries(
        descriptor,
        [r.stamp_ns for r in log.records],
        values=[r.values for r in log.records],
    )
