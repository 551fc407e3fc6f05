"""On-disk feature store: one binary file per video plus a JSON index.

Binary layout (little-endian), 16-byte header then the payload:

    bytes 0:4    magic b"MTAD"
    bytes 4:8    u32 number of rows T
    bytes 8:12   u32 feature dimension D
    bytes 12:16  u32 reserved (zero)
    bytes 16:    float32 row-major values, T * D entries

The sidecar ``index.json`` maps video ids to their file and timing metadata::

    {"<video_id>": {"path": "v.mtad", "feature_stride": 4.0,
                    "frame_rate": 8.0, "feature_dim": 64}}

``feature_dim`` is advisory; when present it must match the binary header, a
mismatch is reported as corruption rather than silently reshaping.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from minitad.core import FeatureSequence

MAGIC = b"MTAD"
_HEADER = struct.Struct("<4sIII")
INDEX_NAME = "index.json"


class FeatureStoreError(RuntimeError):
    """Corrupt or inconsistent feature-store contents."""


class FeatureStore:
    """Directory-backed store of per-video feature sequences.

    Only fully-valid sequences are persisted; padding is a model-input
    concern and is reapplied by the mapping stage, never stored.
    """

    def __init__(self, root: str | Path, index: dict | None = None):
        self.root = Path(root)
        self.index: dict[str, dict] = index if index is not None else {}

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def create(cls, root: str | Path) -> "FeatureStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        return cls(root)

    @classmethod
    def open(cls, root: str | Path) -> "FeatureStore":
        root = Path(root)
        index_path = root / INDEX_NAME
        if not index_path.is_file():
            raise FeatureStoreError(f"no {INDEX_NAME} under {root}")
        with index_path.open() as fh:
            index = json.load(fh)
        if not isinstance(index, dict):
            raise FeatureStoreError(f"{index_path}: index must be a JSON object")
        return cls(root, index)

    def flush(self) -> None:
        with (self.root / INDEX_NAME).open("w") as fh:
            json.dump(self.index, fh, indent=1, sort_keys=True)

    # -- access ------------------------------------------------------------

    @property
    def video_ids(self) -> list[str]:
        return list(self.index.keys())

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.index

    def __len__(self) -> int:
        return len(self.index)

    def write(self, video_id: str, seq: FeatureSequence) -> None:
        if not seq.mask.all():
            raise ValueError(f"{video_id}: refusing to store masked (padded) rows")
        rel = f"{video_id}.mtad"
        values = np.ascontiguousarray(seq.values, dtype="<f4")
        t, d = values.shape
        with (self.root / rel).open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, t, d, 0))
            fh.write(values.tobytes())
        self.index[video_id] = {
            "path": rel,
            "feature_stride": float(seq.feature_stride),
            "frame_rate": float(seq.frame_rate),
            "feature_dim": int(d),
        }

    def read(self, video_id: str, expected_dim: int | None = None) -> FeatureSequence:
        if video_id not in self.index:
            raise KeyError(f"video {video_id!r} not in feature store {self.root}")
        entry = self.index[video_id]
        path = self.root / entry["path"]
        with path.open("rb") as fh:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                raise FeatureStoreError(f"{path}: truncated header")
            magic, t, d, _ = _HEADER.unpack(header)
            if magic != MAGIC:
                raise FeatureStoreError(f"{path}: bad magic {magic!r}, not a feature file")
            payload = fh.read()
        expected_bytes = 4 * t * d
        if len(payload) != expected_bytes:
            raise FeatureStoreError(
                f"{path}: payload holds {len(payload)} bytes, header implies {expected_bytes}"
            )
        index_dim = entry.get("feature_dim")
        if index_dim is not None and index_dim != d:
            raise FeatureStoreError(
                f"{path}: header says D={d} but index expects {index_dim}"
            )
        if expected_dim is not None and expected_dim != d:
            raise FeatureStoreError(
                f"{path}: header says D={d} but caller expects {expected_dim}"
            )
        values = np.frombuffer(payload, dtype="<f4").reshape(t, d)
        return FeatureSequence(values.copy(), feature_stride=entry["feature_stride"],
                               frame_rate=entry["frame_rate"])
