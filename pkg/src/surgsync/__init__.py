"""Dual-mode multi-stream recording with time synchronization.

One recorder matches streams online against a reference camera within a
tolerance and writes only complete packets; the other captures everything at
fixed rates and matches (or interpolates) after the fact. Both end up in the
same on-disk layout, served over HTTP for browsing and annotation.
"""

__version__ = "0.1.0"

from .online import OnlineRecorder, SyncConfig, get_closest, record_online
from .offline import decouple_and_convert, match_offline, record_offline
from .store import RunManifest, load_manifest, validate_run
from .streams import (
    ImageFrame,
    Sample,
    StreamDescriptor,
    StreamKind,
    SyntheticSourceConfig,
    Timestamp,
    open_replay_source,
    open_synthetic_source,
)

__all__ = [
    "ImageFrame",
    "OnlineRecorder",
    "RunManifest",
    "Sample",
    "StreamDescriptor",
    "StreamKind",
    "SyncConfig",
    "SyntheticSourceConfig",
    "Timestamp",
    "decouple_and_convert",
    "get_closest",
    "load_manifest",
    "match_offline",
    "open_replay_source",
    "open_synthetic_source",
    "record_offline",
    "record_online",
    "validate_run",
]
