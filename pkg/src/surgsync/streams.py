"""Stream identities, timestamps, sample payloads and pluggable sample sources.

Sources are pull-based: ``next_sample()`` returns samples in nondecreasing
stamp order until the stream ends. Synthetic sources are fully deterministic
for a given config and stand in for the live camera/robot transport; replay
sources read back previously recorded runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

# Synthetic image geometry. Small on purpose: recorder throughput tests write
# thousands of frames and PNG encoding dominates.
SYNTH_IMAGE_WIDTH = 64
SYNTH_IMAGE_HEIGHT = 48

# Per-tick probability that a latched synthetic stream flips state.
LATCHED_TOGGLE_PROBABILITY = 0.02


class SourceClosedError(RuntimeError):
    """Raised when next_sample() is called on a closed source."""


@dataclass(frozen=True, order=True)
class Timestamp:
    """A point on the host-monotonic time base, in integer nanoseconds.

    Integer nanos keep ordering total and differences exact; latency
    statistics on crafted inputs must reproduce to the nanosecond.
    """

    nanos: int

    @classmethod
    def from_ms(cls, ms: float) -> "Timestamp":
        return cls(round(ms * NS_PER_MS))

    @classmethod
    def from_s(cls, s: float) -> "Timestamp":
        return cls(round(s * NS_PER_S))

    def to_ms(self) -> float:
        return self.nanos / NS_PER_MS

    def to_s(self) -> float:
        return self.nanos / NS_PER_S

    def __sub__(self, other: "Timestamp") -> int:
        """Difference in nanoseconds (exact integer)."""
        return self.nanos - other.nanos

    def shifted(self, delta_ns: int) -> "Timestamp":
        return Timestamp(self.nanos + delta_ns)


class StreamKind(str, Enum):
    IMAGE = "image"
    NUMERIC = "numeric"
    LATCHED_NUMERIC = "latched_numeric"


NUMERIC_KINDS = (StreamKind.NUMERIC, StreamKind.LATCHED_NUMERIC)


@dataclass(frozen=True)
class StreamDescriptor:
    """Identity and shape of one stream within a run."""

    stream_id: str
    kind: StreamKind
    nominal_rate_hz: float
    arity: int = 0
    view: Optional[str] = None  # "left" | "right" | "side" for image streams

    def __post_init__(self) -> None:
        if not self.stream_id:
            raise ValueError("stream_id must be non-empty")
        if self.nominal_rate_hz <= 0:
            raise ValueError(f"nominal_rate_hz must be > 0, got {self.nominal_rate_hz}")
        if self.kind in NUMERIC_KINDS and self.arity < 1:
            raise ValueError(f"{self.stream_id}: numeric streams need arity >= 1")

    @property
    def label(self) -> str:
        """Folder/display label: the view for image streams, else the id."""
        return self.view if self.view else self.stream_id

    def to_dict(self) -> dict:
        d = {
            "stream_id": self.stream_id,
            "kind": self.kind.value,
            "nominal_rate_hz": self.nominal_rate_hz,
            "arity": self.arity,
        }
        if self.view is not None:
            d["view"] = self.view
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamDescriptor":
        return cls(
            stream_id=d["stream_id"],
            kind=StreamKind(d["kind"]),
            nominal_rate_hz=float(d["nominal_rate_hz"]),
            arity=int(d.get("arity", 0)),
            view=d.get("view"),
        )


@dataclass
class ImageFrame:
    """An 8-bit row-major image. data shape is (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray
    embedded_truth_stamp: Optional[Timestamp] = None

    def __post_init__(self) -> None:
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        expected = (self.height, self.width, self.channels)
        if self.data.shape != expected:
            raise ValueError(f"image data shape {self.data.shape} != {expected}")
        if self.data.dtype != np.uint8:
            raise ValueError(f"image data must be uint8, got {self.data.dtype}")


NumericVector = tuple  # tuple[float, ...]


@dataclass
class Sample:
    """One timestamped payload from one named stream."""

    stream_id: str
    stamp: Timestamp
    payload: "ImageFrame | NumericVector"

    @property
    def is_image(self) -> bool:
        return isinstance(self.payload, ImageFrame)

    @property
    def values(self) -> NumericVector:
        if self.is_image:
            raise TypeError(f"{self.stream_id}: image sample has no numeric values")
        return self.payload

    @property
    def image(self) -> ImageFrame:
        if not self.is_image:
            raise TypeError(f"{self.stream_id}: numeric sample has no image")
        return self.payload


@dataclass(frozen=True)
class SyntheticSourceConfig:
    """Deterministic generator settings. Same config + seed => same samples."""

    descriptor: StreamDescriptor
    jitter_std_ms: float = 1.0
    drop_probability: float = 0.0
    latency_offset_ms: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.jitter_std_ms < 0:
            raise ValueError(f"jitter_std_ms must be >= 0, got {self.jitter_std_ms}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(
                f"drop_probability must be in [0, 1], got {self.drop_probability}"
            )

    def to_dict(self) -> dict:
        return {
            "descriptor": self.descriptor.to_dict(),
            "jitter_std_ms": self.jitter_std_ms,
            "drop_probability": self.drop_probability,
            "latency_offset_ms": self.latency_offset_ms,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSourceConfig":
        return cls(
            descriptor=StreamDescriptor.from_dict(d["descriptor"]),
            jitter_std_ms=float(d.get("jitter_std_ms", 1.0)),
            drop_probability=float(d.get("drop_probability", 0.0)),
            latency_offset_ms=float(d.get("latency_offset_ms", 0.0)),
            seed=int(d.get("seed", 0)),
        )


class SampleSource:
    """Pull interface shared by synthetic and replay sources.

    Single-consumer: one reader at a time. Yields nondecreasing stamps.
    """

    descriptor: StreamDescriptor

    def next_sample(self) -> Optional[Sample]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __iter__(self) -> Iterator[Sample]:
        while True:
            s = self.next_sample()
            if s is None:
                return
            yield s


def _ideal_stamp_ns(index: int, rate_hz: float) -> int:
    return round(index * NS_PER_S / rate_hz)


def _render_synthetic_frame(index: int, truth_ns: int) -> np.ndarray:
    """Small RGB frame with a moving marker; row 0 encodes the truth stamp."""
    h, w = SYNTH_IMAGE_HEIGHT, SYNTH_IMAGE_WIDTH
    img = np.full((h, w, 3), 24, dtype=np.uint8)
    # moving 6x6 marker, kept below row 8 so it never clobbers the stamp row
    mx = (index * 5) % (w - 6)
    my = 8 + (index * 3) % (h - 14)
    img[my : my + 6, mx : mx + 6] = (255, 220, 40)
    # truth stamp as 8 big-endian bytes in the red channel of row 0
    stamp_bytes = struct.pack(">q", truth_ns)
    img[0, :8, 0] = np.frombuffer(stamp_bytes, dtype=np.uint8)
    img[0, :8, 1] = 0
    img[0, :8, 2] = 0
    return img


def decode_truth_stamp(frame: ImageFrame) -> Optional[Timestamp]:
    """Recover the truth stamp a synthetic source baked into row 0.

    Only meaningful for frames rendered by a synthetic source (or replayed
    copies of them); returns None for images too small to carry one.
    """
    if frame.channels != 3 or frame.width < 8:
        return None
    raw = bytes(frame.data[0, :8, 0].tobytes())
    return Timestamp(struct.unpack(">q", raw)[0])


class SyntheticSource(SampleSource):
    """Seeded generator of jittered, droppable samples at a nominal rate.

    Stamps follow t_i = ideal_i + latency_offset + jitter_i, clamped so the
    yielded sequence is strictly increasing (a jittered stamp that would not
    advance is set to previous + 1 ns). Latched streams emit only on state
    change. The RNG draw schedule is fixed per tick so the retained-index set
    is reproducible for any seed.
    """

    def __init__(self, cfg: SyntheticSourceConfig, end: Optional[Timestamp] = None):
        self.cfg = cfg
        self.descriptor = cfg.descriptor
        self.end = end
        self._rng = np.random.default_rng(cfg.seed)
        self._index = 0
        self._last_yielded_ns: Optional[int] = None
        self._closed = False
        self._latched_state = False
        d = cfg.descriptor
        if d.kind in NUMERIC_KINDS:
            # fixed per-component sinusoid parameters, drawn once
            self._freqs = self._rng.uniform(0.1, 2.0, d.arity)
            self._phases = self._rng.uniform(0.0, 2.0 * np.pi, d.arity)

    def _payload_for(self, index: int, ideal_ns: int):
        d = self.descriptor
        if d.kind == StreamKind.IMAGE:
            data = _render_synthetic_frame(index, ideal_ns)
            return ImageFrame(
                width=SYNTH_IMAGE_WIDTH,
                height=SYNTH_IMAGE_HEIGHT,
                channels=3,
                data=data,
                embedded_truth_stamp=Timestamp(ideal_ns),
            )
        if d.kind == StreamKind.NUMERIC:
            t = ideal_ns / NS_PER_S
            vals = np.sin(2.0 * np.pi * (self._freqs * t) + self._phases)
            return tuple(float(v) for v in vals)
        v = 1.0 if self._latched_state else 0.0
        return (v,) * d.arity

    def next_sample(self) -> Optional[Sample]:
        if self._closed:
            raise SourceClosedError(f"source {self.descriptor.stream_id} is closed")
        cfg = self.cfg
        d = self.descriptor
        offset_ns = round(cfg.latency_offset_ms * NS_PER_MS)
        while True:
            i = self._index
            ideal_ns = _ideal_stamp_ns(i, d.nominal_rate_hz)
            if self.end is not None and ideal_ns > self.end.nanos:
                return None
            self._index += 1

            # fixed draw order per tick: jitter, drop, [latched toggle]
            jitter_ns = round(self._rng.normal(0.0, cfg.jitter_std_ms * NS_PER_MS))
            dropped = self._rng.random() < cfg.drop_probability
            emit = True
            if d.kind == StreamKind.LATCHED_NUMERIC:
                toggled = self._rng.random() < LATCHED_TOGGLE_PROBABILITY
                if i == 0:
                    emit = True  # publish the initial state
                elif toggled:
                    self._latched_state = not self._latched_state
                    emit = True
                else:
                    emit = False
            if dropped or not emit:
                continue

            stamp_ns = ideal_ns + offset_ns + jitter_ns
            if stamp_ns < 0:
                stamp_ns = 0  # the shared time base starts at zero
            if self._last_yielded_ns is not None and stamp_ns <= self._last_yielded_ns:
                stamp_ns = self._last_yielded_ns + 1
            self._last_yielded_ns = stamp_ns
            payload = self._payload_for(i, ideal_ns)
            return Sample(stream_id=d.stream_id, stamp=Timestamp(stamp_ns), payload=payload)

    def close(self) -> None:
        self._closed = True


class ReplaySource(SampleSource):
    """Replays one stream of a stored run, in recorded order.

    Understands both the final dataset layout and the raw capture layout of
    the fixed-rate recorder (binary kin logs, or their readable conversion
    when present).
    """

    def __init__(self, run_dir: Path, stream_id: str):
        from . import store  # local import: store builds on these types

        self.run_dir = Path(run_dir)
        self._closed = False
        self._pos = 0
        entries = store.load_stream_for_replay(self.run_dir, stream_id)
        self.descriptor = entries.descriptor
        self._stamps = entries.stamps
        self._values = entries.values
        self._frame_paths = entries.frame_paths

    def __len__(self) -> int:
        return len(self._stamps)

    def next_sample(self) -> Optional[Sample]:
        if self._closed:
            raise SourceClosedError(f"source {self.descriptor.stream_id} is closed")
        if self._pos >= len(self._stamps):
            return None
        i = self._pos
        self._pos += 1
        stamp = Timestamp(self._stamps[i])
        if self.descriptor.kind == StreamKind.IMAGE:
            from . import store

            frame = store.read_frame(self._frame_paths[i])
            return Sample(self.descriptor.stream_id, stamp, frame)
        return Sample(self.descriptor.stream_id, stamp, tuple(self._values[i]))

    def close(self) -> None:
        self._closed = True


def open_synthetic_source(
    cfg: SyntheticSourceConfig, end: Optional[Timestamp] = None
) -> SyntheticSource:
    """Create a deterministic synthetic source; `end` bounds the last ideal stamp."""
    return SyntheticSource(cfg, end=end)


def open_replay_source(run_dir: Path, stream_id: str) -> ReplaySource:
    return ReplaySource(run_dir, stream_id)


def next_sample(source: SampleSource) -> Optional[Sample]:
    """Pull the next sample from a source, or None at end of stream."""
    return source.next_sample()
