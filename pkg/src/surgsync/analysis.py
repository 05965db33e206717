"""Timing quality statistics for recorded runs.

Latency here means the absolute offset |matched stamp - reference stamp| per
packet, in milliseconds. The reference stream (offset identically zero) and
latched streams (sample-and-hold, so their age is not a matching error) are
excluded. Sums are evaluated with math.fsum so results do not depend on
accumulation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import store
from .streams import StreamKind

DEFAULT_BIN_MS = 0.5
NS_PER_MS = 1_000_000


@dataclass(frozen=True)
class SummaryStats:
    count: int
    mean: float
    std: float  # sample standard deviation (n-1)
    median: float  # lower of the two middle values for even counts
    minimum: float
    maximum: float

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "median": self.median,
            "min": self.minimum,
            "max": self.maximum,
        }


def summarize(values: Sequence[float]) -> SummaryStats:
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ValueError("no values to summarize")
    mean = math.fsum(vals) / n
    if n > 1:
        var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
        std = math.sqrt(var)
    else:
        std = 0.0
    ordered = sorted(vals)
    return SummaryStats(
        count=n,
        mean=mean,
        std=std,
        median=ordered[(n - 1) // 2],
        minimum=ordered[0],
        maximum=ordered[-1],
    )


def latency_deltas_ms(
    run_dir: Path, reference: Optional[str] = None
) -> Dict[str, List[float]]:
    """Per-stream |delta| in ms for every stream that participates in matching.

    `reference` overrides which stream is treated as the reference (excluded);
    by default it comes from the manifest.
    """
    manifest = store.load_manifest(run_dir)
    ref_id = reference or manifest.sync_config.get("reference_stream")
    out: Dict[str, List[float]] = {}
    for d in manifest.streams:
        if d.stream_id == ref_id:
            continue
        if manifest.schedule and d.label == (
            reference or manifest.schedule.get("reference_view")
        ):
            continue
        if d.kind == StreamKind.LATCHED_NUMERIC:
            continue
        lines = store.read_records(run_dir, d.stream_id)
        out[d.stream_id] = [abs(line.delta_ns) / NS_PER_MS for line in lines]
    return out


def latency_report(
    run_dir: Path, reference: Optional[str] = None
) -> Dict[str, SummaryStats]:
    return {
        sid: summarize(deltas)
        for sid, deltas in latency_deltas_ms(run_dir, reference).items()
        if deltas
    }


def latency_report_doc(
    run_dir: Path,
    bin_width_ms: float = DEFAULT_BIN_MS,
    reference: Optional[str] = None,
) -> dict:
    """Flat report document: per-stream stats, pooled histogram, packet rate."""
    deltas = latency_deltas_ms(run_dir, reference)
    streams = {}
    for sid, vals in deltas.items():
        if not vals:
            continue
        s = summarize(vals)
        streams[sid] = {
            "count": s.count,
            "mean_ms": s.mean,
            "std_ms": s.std,
            "median_ms": s.median,
            "min_ms": s.minimum,
            "max_ms": s.maximum,
        }
    pooled = [v for vals in deltas.values() for v in vals]
    edges, counts = pooled_histogram(pooled, bin_width_ms)
    doc = {
        "streams": streams,
        "histogram": {
            "bin_width_ms": bin_width_ms,
            "edges_ms": edges,
            "counts": counts,
        },
        "frequency": None,
    }
    try:
        rate = reference_frequency(run_dir)
    except ValueError:
        return doc
    doc["frequency"] = {"mean_hz": rate.mean, "std_hz": rate.std}
    return doc


def pooled_histogram(
    values_ms: Sequence[float], bin_width_ms: float = DEFAULT_BIN_MS
) -> Tuple[List[float], List[int]]:
    """Fixed-width histogram of nonnegative offsets, bins [k*w, (k+1)*w).

    Returns (edges, counts) with len(edges) == len(counts) + 1.
    """
    if bin_width_ms <= 0:
        raise ValueError("bin width must be positive")
    vals = [float(v) for v in values_ms]
    if any(v < 0 for v in vals):
        raise ValueError("offsets must be nonnegative")
    if not vals:
        return [0.0, bin_width_ms], [0]
    n_bins = int(max(vals) // bin_width_ms) + 1
    counts = [0] * n_bins
    for v in vals:
        counts[min(int(v // bin_width_ms), n_bins - 1)] += 1
    edges = [i * bin_width_ms for i in range(n_bins + 1)]
    return edges, counts


def frequency_stats(stamps_ns: Sequence[int]) -> SummaryStats:
    """Statistics of the instantaneous rate 1e9 / (t[i+1] - t[i]) in Hz."""
    if len(stamps_ns) < 2:
        raise ValueError("need at least two stamps for a rate")
    freqs = []
    for a, b in zip(stamps_ns, stamps_ns[1:]):
        if b <= a:
            raise ValueError(f"stamps not strictly increasing at {a} -> {b}")
        freqs.append(1e9 / (b - a))
    return summarize(freqs)


def reference_frequency(run_dir: Path) -> SummaryStats:
    manifest = store.load_manifest(run_dir)
    return frequency_stats(manifest.ref_stamps)
