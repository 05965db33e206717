"""Tolerance-gated online synchronizer and recorder.

The contract is all-or-nothing per reference frame: either every non-latched
stream has a sample within tolerance of the reference stamp (and one packet
with one matched sample per stream is written), or the reference frame is
rejected and nothing is written. Latched streams are exempt; they contribute
the most recent value at or before the reference stamp.

A reference frame is matched only once every non-latched stream has either
finished or delivered a sample past ref + tolerance, so the winner of the
nearest-sample search cannot be displaced by a later arrival. This makes the
persisted matching identical to a brute-force nearest-within-tolerance pass
over the complete per-stream logs, provided no reference frames were dropped
to queue overflow.
"""

from __future__ import annotations

import heapq
import json
import queue
import shutil
import threading
import time
import uuid
from bisect import bisect_left, bisect_right
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import kinlog, store
from .streams import (
    NS_PER_MS,
    ImageFrame,
    Sample,
    SampleSource,
    StreamDescriptor,
    StreamKind,
    Timestamp,
)

DEFAULT_TOLERANCE_MS = 10.0
DEFAULT_BUFFER_CAPACITY = 4096
DEFAULT_QUEUE_CAPACITY = 64
DEFAULT_WRITER_POOL_SIZE = 4


@dataclass(frozen=True)
class SyncConfig:
    reference_stream: str
    tolerance_ms: float = DEFAULT_TOLERANCE_MS
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    writer_pool_size: int = DEFAULT_WRITER_POOL_SIZE

    def __post_init__(self):
        if not self.reference_stream:
            raise ValueError("reference_stream must be set")
        if not self.tolerance_ms > 0:
            raise ValueError("tolerance_ms must be positive")
        for name in ("buffer_capacity", "queue_capacity", "writer_pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def tolerance_ns(self) -> int:
        return round(self.tolerance_ms * NS_PER_MS)

    def to_dict(self) -> dict:
        return {
            "reference_stream": self.reference_stream,
            "tolerance_ms": self.tolerance_ms,
            "buffer_capacity": self.buffer_capacity,
            "queue_capacity": self.queue_capacity,
            "writer_pool_size": self.writer_pool_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyncConfig":
        return cls(
            reference_stream=d["reference_stream"],
            tolerance_ms=float(d.get("tolerance_ms", DEFAULT_TOLERANCE_MS)),
            buffer_capacity=int(d.get("buffer_capacity", DEFAULT_BUFFER_CAPACITY)),
            queue_capacity=int(d.get("queue_capacity", DEFAULT_QUEUE_CAPACITY)),
            writer_pool_size=int(d.get("writer_pool_size", DEFAULT_WRITER_POOL_SIZE)),
        )


def get_closest(stamps: Sequence[int], target_ns: int) -> Tuple[int, int]:
    """Index of the stamp nearest to target and its signed delta (stamp - target).

    Stamps must be sorted ascending. On an exact tie in |delta| the earlier
    stamp wins.
    """
    if len(stamps) == 0:
        raise ValueError("empty stamp sequence")
    pos = bisect_left(stamps, target_ns)
    if pos == 0:
        i = 0
    elif pos == len(stamps):
        i = len(stamps) - 1
    else:
        i = pos - 1 if target_ns - stamps[pos - 1] <= stamps[pos] - target_ns else pos
    return i, stamps[i] - target_ns


class StreamBuffer:
    """Bounded time-ordered sample buffer with cheap head-index pruning."""

    def __init__(self, descriptor: StreamDescriptor, capacity: int):
        self.descriptor = descriptor
        self.capacity = capacity
        self._stamps: List[int] = []
        self._samples: List[Sample] = []
        self._head = 0
        self.newest_stamp_ns: Optional[int] = None
        self.finished = False
        self.overflow_count = 0

    def __len__(self) -> int:
        return len(self._stamps) - self._head

    def push(self, sample: Sample) -> None:
        s = sample.stamp.nanos
        if self.newest_stamp_ns is not None and s < self.newest_stamp_ns:
            raise ValueError(
                f"{self.descriptor.stream_id}: stamp {s} arrived out of order"
            )
        self.newest_stamp_ns = s
        if len(self) >= self.capacity:
            self._head += 1  # silently shed the oldest sample
            self.overflow_count += 1
        self._stamps.append(s)
        self._samples.append(sample)
        if self._head > 512 and self._head * 2 > len(self._stamps):
            del self._stamps[: self._head]
            del self._samples[: self._head]
            self._head = 0

    def closest(self, target_ns: int) -> Optional[Tuple[Sample, int]]:
        """Nearest buffered sample to target, or None if empty."""
        h, st = self._head, self._stamps
        if h >= len(st):
            return None
        pos = bisect_left(st, target_ns, lo=h)
        if pos == h:
            i = h
        elif pos == len(st):
            i = len(st) - 1
        else:
            i = pos - 1 if target_ns - st[pos - 1] <= st[pos] - target_ns else pos
        return self._samples[i], st[i] - target_ns

    def latest_at_or_before(self, target_ns: int) -> Optional[Sample]:
        h, st = self._head, self._stamps
        pos = bisect_right(st, target_ns, lo=h) - 1
        if pos < h:
            return None
        return self._samples[pos]

    def prune_before(self, cutoff_ns: int, *, keep_hold_value: bool = False) -> None:
        """Drop samples older than the cutoff.

        With keep_hold_value the newest sample at or before the cutoff
        survives, so sample-and-hold streams never lose their current value.
        """
        h, st = self._head, self._stamps
        if keep_hold_value:
            pos = bisect_right(st, cutoff_ns, lo=h) - 1
        else:
            pos = bisect_left(st, cutoff_ns, lo=h)
        if pos > h:
            self._head = pos


@dataclass
class MatchedImage:
    stream_id: str
    view: str
    stamp_ns: int
    frame: ImageFrame


@dataclass
class MatchedValues:
    stream_id: str
    values: tuple
    delta_ns: int
    latched: bool


@dataclass
class SyncedPacket:
    ref_stamp_ns: int
    images: List[MatchedImage]
    numerics: List[MatchedValues]


def write_packet(packet: SyncedPacket, temp_root: Path) -> Path:
    """Write one packet as a zero-padded temp folder; kin.json goes last so
    its presence marks the folder complete."""
    pdir = store.packet_temp_dir(temp_root, Timestamp(packet.ref_stamp_ns))
    pdir.mkdir(parents=True, exist_ok=True)
    for m in packet.images:
        store.save_frame_png(m.frame, pdir / f"{m.view}.png")
    payload = {
        "ref_stamp": packet.ref_stamp_ns,
        "images": [
            {"stream_id": m.stream_id, "view": m.view, "stamp": m.stamp_ns}
            for m in packet.images
        ],
        "streams": [
            {
                "stream_id": m.stream_id,
                "values": list(m.values),
                "delta_ns": m.delta_ns,
                "latched": m.latched,
            }
            for m in packet.numerics
        ],
    }
    with open(pdir / store.PACKET_RECORD_NAME, "w") as fh:
        json.dump(payload, fh)
    return pdir


class OnlineRecorder:
    """Buffers incoming samples, matches them per reference frame, and hands
    complete packets to a small writer pool.

    Use either run() for deterministic stamp-ordered driving of offline-safe
    sources, or push_sample()/sync_step() directly from a paced driver.
    """

    def __init__(
        self,
        descriptors: Sequence[StreamDescriptor],
        config: SyncConfig,
        out_root: Path,
        run_id: Optional[str] = None,
        tee_raw: bool = False,
    ):
        self.descriptors = list(descriptors)
        ids = [d.stream_id for d in self.descriptors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate stream ids")
        by_id = {d.stream_id: d for d in self.descriptors}
        if config.reference_stream not in by_id:
            raise ValueError(f"reference stream {config.reference_stream!r} unknown")
        ref = by_id[config.reference_stream]
        if ref.kind != StreamKind.IMAGE:
            raise ValueError("reference stream must be an image stream")
        self.config = config
        self.ref_descriptor = ref
        self.out_root = Path(out_root)
        self.run_id = run_id or uuid.uuid4().hex[:8]
        self.run_dir = self.out_root / f"run_{self.run_id}"
        self.temp_root = self.out_root / f".tmp_{self.run_id}"
        self.tee_raw = tee_raw

        self._buffers: Dict[str, StreamBuffer] = {
            d.stream_id: StreamBuffer(d, config.buffer_capacity)
            for d in self.descriptors
            if d.stream_id != ref.stream_id
        }
        self._pending_refs: deque = deque()
        self._ref_finished = False
        self._queue: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
        self._writer_threads: List[threading.Thread] = []
        self._lock = threading.RLock()
        self._tee_writers: Dict[str, kinlog.KinLogWriter] = {}
        self._started = False
        self._closed = False

        self.packet_count = 0
        self.reject_count = 0
        self.drop_count = 0
        self.dirty = False
        self.warnings: List[str] = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.temp_root.mkdir(parents=True, exist_ok=True)
        for i in range(self.config.writer_pool_size):
            t = threading.Thread(
                target=self._writer_loop, name=f"packet-writer-{i}", daemon=True
            )
            t.start()
            self._writer_threads.append(t)

    def _writer_loop(self) -> None:
        while True:
            packet = self._queue.get()
            if packet is None:
                self._queue.task_done()
                return
            try:
                try:
                    write_packet(packet, self.temp_root)
                except Exception:
                    write_packet(packet, self.temp_root)  # one retry, then give up
            except Exception as exc:
                pdir = store.packet_temp_dir(
                    self.temp_root, Timestamp(packet.ref_stamp_ns)
                )
                shutil.rmtree(pdir, ignore_errors=True)
                with self._lock:
                    self.dirty = True
                    self.warnings.append(
                        f"packet {packet.ref_stamp_ns}: write failed twice: {exc}"
                    )
            finally:
                self._queue.task_done()

    # -- ingest ----------------------------------------------------------------

    def _tee_write(self, sample: Sample) -> None:
        if not self.tee_raw:
            return
        w = self._tee_writers.get(sample.stream_id)
        if w is None:
            d = next(x for x in self.descriptors if x.stream_id == sample.stream_id)
            arity = 0 if d.kind == StreamKind.IMAGE else d.arity
            safe = sample.stream_id.replace("/", "__")
            path = self.run_dir / "raw" / f"{safe}.sskb"
            w = kinlog.KinLogWriter(path, sample.stream_id, arity)
            self._tee_writers[sample.stream_id] = w
        w.append(sample.stamp.nanos, () if sample.is_image else sample.values)

    def push_sample(self, sample: Sample) -> None:
        with self._lock:
            if self._closed:
                raise RuntimeError("recorder already shut down")
            self._tee_write(sample)
            if sample.stream_id == self.config.reference_stream:
                self._pending_refs.append(sample)
            else:
                try:
                    buf = self._buffers[sample.stream_id]
                except KeyError:
                    raise ValueError(f"unknown stream {sample.stream_id!r}") from None
                buf.push(sample)

    def mark_finished(self, stream_id: str) -> None:
        with self._lock:
            if stream_id == self.config.reference_stream:
                self._ref_finished = True
            else:
                self._buffers[stream_id].finished = True

    # -- matching ----------------------------------------------------------------

    def _ready_for(self, ref_ns: int) -> bool:
        horizon = ref_ns + self.config.tolerance_ns
        for b in self._buffers.values():
            if b.descriptor.kind == StreamKind.LATCHED_NUMERIC:
                continue
            if b.finished:
                continue
            if b.newest_stamp_ns is None or b.newest_stamp_ns < horizon:
                return False
        return True

    def sync_step(self, *, block: bool = True) -> bool:
        """Try to resolve the oldest pending reference frame.

        Returns True when a reference frame was consumed (packet enqueued,
        rejected, or dropped), False when there is nothing to do yet. With
        block=False a full writer queue drops the frame instead of waiting,
        which is the overload behavior wanted under real-time pacing.
        """
        with self._lock:
            if not self._pending_refs:
                return False
            ref = self._pending_refs[0]
            ref_ns = ref.stamp.nanos
            if not self._ready_for(ref_ns):
                return False
            self._pending_refs.popleft()
            tol = self.config.tolerance_ns

            images = [
                MatchedImage(
                    ref.stream_id, self.ref_descriptor.label, ref_ns, ref.image
                )
            ]
            numerics: List[MatchedValues] = []
            complete = True
            for b in self._buffers.values():
                d = b.descriptor
                if d.kind == StreamKind.LATCHED_NUMERIC:
                    held = b.latest_at_or_before(ref_ns)
                    if held is None:
                        numerics.append(
                            MatchedValues(d.stream_id, (0.0,) * d.arity, 0, True)
                        )
                    else:
                        numerics.append(
                            MatchedValues(
                                d.stream_id,
                                held.values,
                                held.stamp.nanos - ref_ns,
                                True,
                            )
                        )
                    continue
                got = b.closest(ref_ns)
                if got is None or abs(got[1]) > tol:
                    complete = False
                    break
                sample, delta = got
                if d.kind == StreamKind.IMAGE:
                    images.append(
                        MatchedImage(d.stream_id, d.label, sample.stamp.nanos, sample.image)
                    )
                else:
                    numerics.append(
                        MatchedValues(d.stream_id, sample.values, delta, False)
                    )

            # matched samples stay available for later reference frames; only
            # samples too old to ever match again are shed
            for b in self._buffers.values():
                if b.descriptor.kind == StreamKind.LATCHED_NUMERIC:
                    b.prune_before(ref_ns, keep_hold_value=True)
                else:
                    b.prune_before(ref_ns - tol)

            if not complete:
                self.reject_count += 1
                return True
            packet = SyncedPacket(ref_ns, images, numerics)

        # enqueue outside the lock so writer threads can make room
        if block:
            self._queue.put(packet)
        else:
            try:
                self._queue.put_nowait(packet)
            except queue.Full:
                with self._lock:
                    self.drop_count += 1
                return True
        with self._lock:
            self.packet_count += 1
        return True

    def drain(self, *, block: bool = True) -> int:
        steps = 0
        while self.sync_step(block=block):
            steps += 1
        return steps

    # -- drivers -----------------------------------------------------------------

    def run(self, sources: Sequence[SampleSource]) -> store.RunManifest:
        """Drive bounded sources to exhaustion in global stamp order.

        Back-pressures on the writer queue instead of dropping, so two runs
        over identical sources produce identical datasets.
        """
        self.start()
        merged = heapq.merge(*sources, key=lambda s: s.stamp.nanos)
        for sample in merged:
            self.push_sample(sample)
            self.drain(block=True)
        for d in self.descriptors:
            self.mark_finished(d.stream_id)
        self.drain(block=True)
        return self.shutdown_and_cleanup()

    def shutdown_and_cleanup(self) -> store.RunManifest:
        """Flush writers, drop incomplete temp folders, emit the final layout."""
        with self._lock:
            if self._closed:
                raise RuntimeError("recorder already shut down")
            self._closed = True
        self._queue.join()
        for _ in self._writer_threads:
            self._queue.put(None)
        for t in self._writer_threads:
            t.join()
        for w in self._tee_writers.values():
            w.close()

        overflowed = {
            b.descriptor.stream_id: b.overflow_count
            for b in self._buffers.values()
            if b.overflow_count
        }
        for sid, n in overflowed.items():
            self.warnings.append(f"stream {sid}: buffer overflow shed {n} samples")

        image_labels = [
            d.label for d in self.descriptors if d.kind == StreamKind.IMAGE
        ]
        removed = store.remove_incomplete_packet_dirs(self.temp_root, image_labels)
        if removed:
            self.warnings.append(f"removed {removed} incomplete packet folders")

        return store.reformat_data_storage(
            self.temp_root,
            self.run_dir,
            run_id=self.run_id,
            recorder_mode="online",
            streams=self.descriptors,
            sync_config=self.config.to_dict(),
            reject_count=self.reject_count,
            drop_count=self.drop_count,
            dirty=self.dirty,
            warnings=self.warnings,
        )


def record_online(
    sources: Sequence[SampleSource],
    config: SyncConfig,
    out_root: Path,
    *,
    run_id: Optional[str] = None,
    tee_raw: bool = False,
) -> store.RunManifest:
    """Deterministic one-call recording of bounded sources."""
    recorder = OnlineRecorder(
        [s.descriptor for s in sources], config, out_root, run_id=run_id, tee_raw=tee_raw
    )
    return recorder.run(sources)


def record_online_paced(
    sources: Sequence[SampleSource],
    config: SyncConfig,
    out_root: Path,
    *,
    run_id: Optional[str] = None,
    tee_raw: bool = False,
    stop_event: Optional[threading.Event] = None,
    speed: float = 1.0,
) -> store.RunManifest:
    """Real-time pacing: one feeder thread per source sleeps each sample to
    its stamp, while the caller's thread resolves packets as they ripen.

    A stop request latches the current session time as t_end; feeders run on
    until their next sample would land past t_end, so every reference frame
    inside the session window still gets its full matching context.
    """
    recorder = OnlineRecorder(
        [s.descriptor for s in sources], config, out_root, run_id=run_id, tee_raw=tee_raw
    )
    recorder.start()
    stop_event = stop_event or threading.Event()
    t_end_ns: List[Optional[int]] = [None]
    t0 = time.monotonic_ns()

    def feeder(src: SampleSource) -> None:
        try:
            for sample in src:
                due_ns = t0 + round(sample.stamp.nanos / speed)
                while True:
                    end = t_end_ns[0]
                    if end is not None and sample.stamp.nanos > end:
                        return
                    now = time.monotonic_ns()
                    if now >= due_ns:
                        break
                    time.sleep(min((due_ns - now) / 1e9, 0.02))
                recorder.push_sample(sample)
        finally:
            recorder.mark_finished(src.descriptor.stream_id)

    feeders = [
        threading.Thread(target=feeder, args=(s,), name=f"feed-{s.descriptor.stream_id}")
        for s in sources
    ]
    for t in feeders:
        t.start()
    try:
        while any(t.is_alive() for t in feeders):
            if stop_event.is_set() and t_end_ns[0] is None:
                t_end_ns[0] = round((time.monotonic_ns() - t0) * speed)
            if not recorder.sync_step(block=False):
                time.sleep(0.001)
        recorder.drain(block=False)
    except KeyboardInterrupt:
        pass  # treat ctrl-c like a stop request; cleanup still runs
    finally:
        if t_end_ns[0] is None:
            t_end_ns[0] = round((time.monotonic_ns() - t0) * speed)
        stop_event.set()
        for t in feeders:
            t.join()
        recorder.drain(block=False)
    return recorder.shutdown_and_cleanup()
