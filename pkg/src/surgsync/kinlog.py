"""Append-only binary kinematic log (.sskb) and its readable conversion.

File layout (all little-endian):

    magic   4 bytes   b"SSKB"
    version 1 byte    0x01
    nlen    u16       topic-name byte length
    name    nlen      topic name, UTF-8
    arity   u16       values per record
    records repeated  [stamp: i64 nanoseconds][arity x f64]

Record stamps are strictly increasing. File length is always
header + n * (8 + 8 * arity), which makes truncation detectable at an
exact byte offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

MAGIC = b"SSKB"
VERSION = 1


class CorruptLogError(ValueError):
    """Malformed or truncated .sskb file; `offset` is the failing byte."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class KinRecord:
    stamp_ns: int
    values: tuple  # tuple[float, ...], length == file arity


def header_bytes(topic: str, arity: int) -> bytes:
    name = topic.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ValueError("topic name too long")
    if not 0 <= arity <= 0xFFFF:
        raise ValueError(f"arity out of range: {arity}")
    return MAGIC + bytes([VERSION]) + struct.pack("<H", len(name)) + name + struct.pack("<H", arity)


def record_size(arity: int) -> int:
    return 8 + 8 * arity


class KinLogWriter:
    """Appends fixed-arity records to one topic file, stamps strictly increasing."""

    def __init__(self, path: Path, topic: str, arity: int):
        self.path = Path(path)
        self.topic = topic
        self.arity = arity
        self._last_stamp: int | None = None
        self._struct = struct.Struct(f"<q{arity}d")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._fh.write(header_bytes(topic, arity))

    def append(self, stamp_ns: int, values: Sequence[float]) -> None:
        if len(values) != self.arity:
            raise ValueError(
                f"{self.topic}: expected {self.arity} values, got {len(values)}"
            )
        if self._last_stamp is not None and stamp_ns <= self._last_stamp:
            raise ValueError(
                f"{self.topic}: stamp {stamp_ns} not after previous {self._last_stamp}"
            )
        self._last_stamp = stamp_ns
        self._fh.write(self._struct.pack(stamp_ns, *values))

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self) -> "KinLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class KinLog:
    topic: str
    arity: int
    records: list  # list[KinRecord]

    @property
    def stamps(self) -> list:
        return [r.stamp_ns for r in self.records]


def _parse_header(data: bytes, path: Path) -> tuple[str, int, int]:
    """Returns (topic, arity, header_length)."""
    if len(data) < 7:
        raise CorruptLogError(f"{path}: file shorter than fixed header", offset=len(data))
    if data[:4] != MAGIC:
        raise CorruptLogError(f"{path}: bad magic {data[:4]!r}", offset=0)
    if data[4] != VERSION:
        raise CorruptLogError(f"{path}: unsupported version {data[4]}", offset=4)
    (nlen,) = struct.unpack_from("<H", data, 5)
    header_len = 7 + nlen + 2
    if len(data) < header_len:
        raise CorruptLogError(f"{path}: truncated header", offset=len(data))
    topic = data[7 : 7 + nlen].decode("utf-8")
    (arity,) = struct.unpack_from("<H", data, 7 + nlen)
    return topic, arity, header_len


def read_kinlog(path: Path) -> KinLog:
    """Read a whole .sskb file, validating length and stamp ordering."""
    path = Path(path)
    data = path.read_bytes()
    topic, arity, header_len = _parse_header(data, path)
    rec_size = record_size(arity)
    body = len(data) - header_len
    n_full, leftover = divmod(body, rec_size)
    if leftover:
        raise CorruptLogError(
            f"{path}: truncated record at byte offset {header_len + n_full * rec_size}",
            offset=header_len + n_full * rec_size,
        )
    rec_struct = struct.Struct(f"<q{arity}d")
    records = []
    prev = None
    for i in range(n_full):
        fields = rec_struct.unpack_from(data, header_len + i * rec_size)
        stamp = fields[0]
        if prev is not None and stamp <= prev:
            raise CorruptLogError(
                f"{path}: non-increasing stamp {stamp} at record {i}",
                offset=header_len + i * rec_size,
            )
        prev = stamp
        records.append(KinRecord(stamp, tuple(fields[1:])))
    return KinLog(topic=topic, arity=arity, records=records)


def iter_records(path: Path) -> Iterator[KinRecord]:
    return iter(read_kinlog(path).records)


def to_readable(binary_path: Path, readable_path: Path) -> None:
    """Convert .sskb to a line-oriented JSON file (header line, then records).

    Values are 64-bit floats serialized via repr, so the conversion is
    lossless and re-encoding reproduces the binary byte for byte.
    """
    log = read_kinlog(binary_path)
    readable_path = Path(readable_path)
    readable_path.parent.mkdir(parents=True, exist_ok=True)
    with open(readable_path, "w") as fh:
        fh.write(json.dumps({"topic": log.topic, "arity": log.arity}) + "\n")
        for rec in log.records:
            fh.write(
                json.dumps({"stamp": rec.stamp_ns, "values": list(rec.values)}) + "\n"
            )


def read_readable(readable_path: Path) -> KinLog:
    with open(readable_path) as fh:
        head = json.loads(fh.readline())
        records = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(KinRecord(int(d["stamp"]), tuple(float(v) for v in d["values"])))
    return KinLog(topic=head["topic"], arity=int(head["arity"]), records=records)


def from_readable(readable_path: Path, binary_path: Path) -> None:
    """Re-encode a readable log back into .sskb form."""
    log = read_readable(readable_path)
    with KinLogWriter(binary_path, log.topic, log.arity) as w:
        for rec in log.records:
            w.append(rec.stamp_ns, rec.values)
