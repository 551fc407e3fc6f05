"""Synthetic planted-action dataset.

Each class owns a fixed unit-norm signature vector. A video is a zero-mean
background of white noise into which non-overlapping action segments are
planted by adding ``strength * signature[class]`` to every feature row the
segment covers. Segment boundaries snap to whole rows and neighbouring
segments are separated by at least one background row, so with zero noise the
class responses recover every planted segment exactly; that exactness is what
makes :func:`correlation_detector` a usable evaluation oracle.

Annotations are emitted in seconds through the usual stride/rate conversion,
so the generated corpus exercises the same unit boundary as real data.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from minitad.core import (
    ActionInstance,
    FeatureSequence,
    LabelSpace,
    ProposalSet,
    TimeInterval,
    VideoRecord,
)
from minitad.data.annotations import AnnotationDatabase


@dataclasses.dataclass(slots=True)
class SyntheticSpec:
    """Parameters of the planted-action corpus; every field has a desk-scale default."""

    num_videos: int = 200
    num_classes: int = 5
    feature_dim: int = 64
    length_range: tuple[int, int] = (96, 192)
    actions_per_video: tuple[int, int] = (1, 4)
    duration_fraction_range: tuple[float, float] = (0.05, 0.35)
    signature_strength: float = 2.0
    noise_std: float = 1.0
    feature_stride: float = 4.0
    frame_rate: float = 8.0
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_videos <= 0 or self.num_classes <= 0 or self.feature_dim <= 0:
            raise ValueError("num_videos, num_classes, feature_dim must be positive")
        lo, hi = self.length_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad length_range {self.length_range}")
        alo, ahi = self.actions_per_video
        if not (0 < alo <= ahi):
            raise ValueError(f"bad actions_per_video {self.actions_per_video}")
        flo, fhi = self.duration_fraction_range
        if not (0 < flo <= fhi <= 1):
            raise ValueError(f"bad duration_fraction_range {self.duration_fraction_range}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclasses.dataclass(slots=True)
class SyntheticDataset:
    database: AnnotationDatabase
    features: dict[str, FeatureSequence]
    signatures: np.ndarray  # (C, D) unit-norm rows
    spec: SyntheticSpec


def _plant_segments(rng: np.random.Generator, total_rows: int, count: int,
                    frac_range: tuple[float, float]) -> list[tuple[int, int]]:
    """Non-overlapping integer segments with >= 1 background row between them."""
    fracs = rng.uniform(frac_range[0], frac_range[1], size=count)
    lengths = [max(1, int(round(f * total_rows))) for f in fracs]
    # shed actions from the back until they fit with mandatory gaps
    while lengths and sum(lengths) + (len(lengths) - 1) > total_rows:
        lengths.pop()
    if not lengths:
        lengths = [max(1, min(total_rows, int(round(frac_range[0] * total_rows))))]
    k = len(lengths)
    free = total_rows - sum(lengths) - (k - 1)
    gaps = rng.multinomial(free, np.full(k + 1, 1.0 / (k + 1)))
    segments = []
    cursor = int(gaps[0])
    for j, ln in enumerate(lengths):
        segments.append((cursor, cursor + ln))
        cursor += ln + 1 + int(gaps[j + 1])
    return segments


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministically build the corpus described by ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n_train = int(round(spec.num_videos * (1.0 - spec.val_fraction)))
    label_space = LabelSpace(
        tuple(f"class_{c:02d}" for c in range(spec.num_classes))
    )

    signatures = rng.normal(size=(spec.num_classes, spec.feature_dim))
    signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)

    seconds_per_row = spec.feature_stride / spec.frame_rate
    videos: dict[str, VideoRecord] = {}
    features: dict[str, FeatureSequence] = {}
    for i in range(spec.num_videos):
        vid = f"synth_{i:04d}"
        t = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        k = int(rng.integers(spec.actions_per_video[0], spec.actions_per_video[1] + 1))
        segments = _plant_segments(rng, t, k, spec.duration_fraction_range)
        labels = rng.integers(0, spec.num_classes, size=len(segments))

        if spec.noise_std > 0:
            values = rng.normal(0.0, spec.noise_std, size=(t, spec.feature_dim))
        else:
            values = np.zeros((t, spec.feature_dim))
        instances = []
        for (s, e), lab in zip(segments, labels):
            values[s:e] += spec.signature_strength * signatures[lab]
            instances.append(ActionInstance(
                TimeInterval(s * seconds_per_row, e * seconds_per_row), int(lab)))

        subset = "training" if i < n_train else "validation"
        videos[vid] = VideoRecord(vid, t * seconds_per_row, subset, tuple(instances))
        features[vid] = FeatureSequence(values.astype(np.float32),
                                        feature_stride=spec.feature_stride,
                                        frame_rate=spec.frame_rate)

    db = AnnotationDatabase(label_space, videos)
    return SyntheticDataset(db, features, signatures, spec)


def correlation_detector(seq: FeatureSequence, signatures: np.ndarray,
                         strength: float, min_response: float = 0.5,
                         video_id: str = "") -> ProposalSet:
    """Matched-filter detector: the Bayes answer on noiseless planted data.

    Each row's response to class c is its dot product with the class
    signature, normalized by ``strength``. A row is claimed by its argmax
    class when that response clears ``min_response``; maximal runs of claimed
    rows become proposals scored by their mean response. On zero-noise data
    the recovered segments coincide exactly with the planted ones.
    """
    signatures = np.asarray(signatures, dtype=np.float64)
    resp = seq.values[seq.mask].astype(np.float64) @ signatures.T / strength
    if resp.shape[0] == 0:
        return ProposalSet.empty(video_id=video_id, unit="features", source="oracle")
    best = np.argmax(resp, axis=1)
    best_resp = resp[np.arange(resp.shape[0]), best]
    claimed = best_resp >= min_response

    segments, scores, labels = [], [], []
    t = 0
    n = resp.shape[0]
    while t < n:
        if not claimed[t]:
            t += 1
            continue
        c = best[t]
        t0 = t
        while t < n and claimed[t] and best[t] == c:
            t += 1
        segments.append((float(t0), float(t)))
        scores.append(float(best_resp[t0:t].mean()))
        labels.append(int(c))
    if not segments:
        return ProposalSet.empty(video_id=video_id, unit="features", source="oracle")
    return ProposalSet(video_id, np.array(segments), np.array(scores),
                       np.array(labels), unit="features", source="oracle")
