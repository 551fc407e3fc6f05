"""Model-facing dataset view.

Joins an annotation database with a feature source (in-memory dict or an
opened :class:`~minitad.data.store.FeatureStore`), applies the configured
temporal mapping, and yields per-sample dicts:

    features  (T, D) float32        mask      (T,) bool
    segments  (N, 2) float64 rows   labels    (N,) int64 model-space ids
    video_id  str                   sequence  the mapped FeatureSequence

Ground truth arrives in seconds and leaves in feature rows of the *mapped*
sequence, so the conversion uses the mapped sequence's own stride metadata.
Training-time randomness (crop offsets) is reseeded per epoch via
``set_epoch`` and is therefore reproducible from the base seed alone.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from minitad.core import FeatureSequence, VideoRecord
from minitad.data.annotations import AnnotationDatabase
from minitad.data.mapping import (
    TemporalMappingConfig,
    random_crop,
    remap_annotations,
    rescale,
    rescale_segments,
    slice_window,
    sliding_windows,
)
from minitad.data.store import FeatureStore


def _instances_to_arrays(rec: VideoRecord, db: AnnotationDatabase):
    if not rec.instances:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    seg = np.array([[i.interval.start, i.interval.end] for i in rec.instances])
    lab = np.array([db.label_space.to_model(i.label) for i in rec.instances],
                   dtype=np.int64)
    return seg, lab


class DetectionDataset:
    def __init__(self, database: AnnotationDatabase,
                 features: FeatureStore | Mapping[str, FeatureSequence],
                 mapping: TemporalMappingConfig,
                 subset: str,
                 training: bool,
                 seed: int = 0):
        self.database = database
        self.features = features
        self.mapping = mapping
        self.training = training
        self.seed = seed
        self.records = database.subset(subset)
        if not self.records:
            raise ValueError(f"subset {subset!r} holds no videos "
                             f"(known: {database.subset_names()})")
        missing = [r.video_id for r in self.records
                   if r.video_id not in self._source_ids()]
        if missing:
            raise KeyError(f"features missing for videos: {missing[:5]}"
                           + ("..." if len(missing) > 5 else ""))
        self._rng = np.random.default_rng(seed)
        # sliding-window training treats each window as one sample
        self._window_samples: list[tuple[VideoRecord, object]] | None = None
        if training and mapping.mode == "sliding_window":
            self._window_samples = []
            for rec in self.records:
                seq = self._load(rec.video_id)
                for win in sliding_windows(rec.video_id, seq.num_rows,
                                           mapping.target_length,
                                           mapping.window_overlap_ratio):
                    self._window_samples.append((rec, win))

    def _source_ids(self):
        if isinstance(self.features, FeatureStore):
            return self.features.video_ids
        return list(self.features.keys())

    def _load(self, video_id: str) -> FeatureSequence:
        if isinstance(self.features, FeatureStore):
            return self.features.read(video_id)
        return self.features[video_id]

    def set_epoch(self, epoch: int) -> None:
        """Reseed per-sample randomness deterministically for this epoch."""
        self._rng = np.random.default_rng((self.seed + 1) * 1_000_003 + epoch)

    def __len__(self) -> int:
        if self._window_samples is not None:
            return len(self._window_samples)
        return len(self.records)

    def __getitem__(self, idx: int) -> dict:
        if self._window_samples is not None:
            rec, win = self._window_samples[idx]
            raw = self._load(rec.video_id)
            seq = slice_window(raw, win)
            seg_s, lab = _instances_to_arrays(rec, self.database)
            rows = seg_s / raw.seconds_per_row
            seg, kept = remap_annotations(rows, win, self.mapping.keep_threshold)
            lab = lab[kept]
            return self._pack(rec, seq, seg, lab)

        rec = self.records[idx]
        raw = self._load(rec.video_id)
        seg_s, lab = _instances_to_arrays(rec, self.database)
        rows = seg_s / raw.seconds_per_row

        mode = self.mapping.mode if self.training else "none"
        if mode == "none":
            return self._pack(rec, raw, rows, lab)
        if mode == "rescale":
            seq = rescale(raw, self.mapping.target_length)
            seg = rescale_segments(rows, raw.num_rows, self.mapping.target_length)
            return self._pack(rec, seq, seg, lab)
        if mode == "random_crop":
            seq, win = random_crop(raw, self.mapping.target_length, self._rng)
            seg, kept = remap_annotations(rows, win, self.mapping.keep_threshold)
            return self._pack(rec, seq, seg, kept_labels(lab, kept))
        raise AssertionError(f"unhandled mapping mode {mode!r}")

    def eval_windows(self, record: VideoRecord) -> list:
        """Test-time sliding windows for one video (empty list = use full sequence)."""
        if self.mapping.mode != "sliding_window":
            return []
        seq = self._load(record.video_id)
        return sliding_windows(record.video_id, seq.num_rows,
                               self.mapping.target_length,
                               self.mapping.eval_overlap_ratio)

    @staticmethod
    def _pack(rec: VideoRecord, seq: FeatureSequence,
              segments: np.ndarray, labels: np.ndarray) -> dict:
        return {
            "video_id": rec.video_id,
            "features": seq.values,
            "mask": seq.mask,
            "segments": np.asarray(segments, dtype=np.float64).reshape(-1, 2),
            "labels": np.asarray(labels, dtype=np.int64).reshape(-1),
            "sequence": seq,
            "duration": rec.duration,
        }


def kept_labels(labels: np.ndarray, kept_idx: np.ndarray) -> np.ndarray:
    return labels[kept_idx] if len(labels) else labels
