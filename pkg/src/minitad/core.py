"""Core domain types and 1-D interval geometry.

Temporal extents are closed intervals [start, end] on a single axis. Two unit
systems appear in the pipeline: feature-row indices (used internally by models,
assignment, and RoI extraction) and seconds (used at every I/O boundary:
annotation files, detection files, evaluation). Containers that cross module
boundaries carry an explicit ``unit`` tag so a mismatch fails loudly instead of
silently producing garbage overlaps.

Geometry terms
--------------
For intervals a and b with intersection I, union U (measure of the set union,
``|a| + |b| - I``) and enclosure E (length of the smallest interval containing
both):

* ``tiou``       I / U, in [0, 1]
* ``giou_term``  tiou - (E - U) / E, in [-1, 1]
* ``diou_term``  tiou - (dc / E)^2 where dc is the distance between centers,
  in (-1, 1]

Zero-length (degenerate) intervals are legal inputs; they have measure zero,
so any overlap involving one is 0 and the epsilon-guarded denominators keep
every term finite. All three terms are symmetric and invariant under a common
shift or positive rescale of both operands.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

EPS = 1e-8

UNIT_FEATURES = "features"
UNIT_SECONDS = "seconds"
_VALID_UNITS = (UNIT_FEATURES, UNIT_SECONDS)


@dataclasses.dataclass(frozen=True, slots=True)
class TimeInterval:
    """Closed interval [start, end]; ``end >= start`` is enforced."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (self.end >= self.start):
            raise ValueError(
                f"interval end must be >= start, got [{self.start}, {self.end}]"
            )

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def is_degenerate(self) -> bool:
        return self.end == self.start

    def as_tuple(self) -> tuple[float, float]:
        return (self.start, self.end)


@dataclasses.dataclass(frozen=True, slots=True)
class ActionInstance:
    """One ground-truth or predicted action: an interval plus a class id."""

    interval: TimeInterval
    label: int
    score: float | None = None


@dataclasses.dataclass(frozen=True, slots=True)
class LabelSpace:
    """Mapping between class names and integer ids.

    ``encode``/``decode`` always work in the dataset's real classes. In binary
    mode the *model* sees only two categories, absence (0) and action (1):
    ``to_model`` collapses any real id onto 1, and ``num_model_classes`` is 2.
    Real ids are what the annotation database stores either way, so label
    names survive a save/load round trip and external-classifier fusion can
    reattach them to binary detections.
    """

    class_names: tuple[str, ...]
    binary: bool = False

    BINARY_NAMES = ("background", "action")

    def __post_init__(self) -> None:
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names in label space")

    @classmethod
    def from_names(cls, names: Iterable[str], binary: bool = False) -> "LabelSpace":
        return cls(tuple(sorted(set(names))), binary=binary)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_model_classes(self) -> int:
        return 2 if self.binary else len(self.class_names)

    def encode(self, name: str) -> int:
        if name not in self.class_names:
            raise KeyError(f"unknown label {name!r}; known: {list(self.class_names)}")
        return self.class_names.index(name)

    def decode(self, label: int) -> str:
        return self.class_names[label]

    def to_model(self, label: int) -> int:
        """Collapse a real class id into model-target space."""
        if not 0 <= label < len(self.class_names):
            raise IndexError(f"label id {label} outside the label space")
        return 1 if self.binary else label


@dataclasses.dataclass(frozen=True, slots=True)
class VideoRecord:
    """One video: id, duration in seconds, subset tag, ground-truth instances.

    Instance intervals are in seconds.
    """

    video_id: str
    duration: float
    subset: str
    instances: tuple[ActionInstance, ...] = ()

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError(f"{self.video_id}: duration must be positive")


@dataclasses.dataclass(slots=True)
class FeatureSequence:
    """A (T, D) float32 feature map with a validity mask and timing metadata.

    ``mask[t]`` is True where row t holds real content; padded suffixes are
    False. ``feature_stride`` is frames per row, ``frame_rate`` frames per
    second, so one row spans ``feature_stride / frame_rate`` seconds.
    """

    values: np.ndarray
    feature_stride: float
    frame_rate: float
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"features must be (T, D), got shape {self.values.shape}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape[0], dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.values.shape[0],):
            raise ValueError("mask length must match the number of feature rows")
        if self.feature_stride <= 0 or self.frame_rate <= 0:
            raise ValueError("feature_stride and frame_rate must be positive")

    @property
    def num_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def valid_rows(self) -> int:
        return int(self.mask.sum())

    @property
    def seconds_per_row(self) -> float:
        return self.feature_stride / self.frame_rate

    def rows_to_seconds(self, x: np.ndarray | float) -> np.ndarray | float:
        return x * self.seconds_per_row


@dataclasses.dataclass(slots=True)
class ProposalSet:
    """Scored candidate segments for one video.

    ``segments`` is (N, 2) float64, ``scores`` (N,), ``labels`` (N,) int64.
    ``unit`` says whether segment endpoints are feature rows or seconds;
    conversions happen exactly once, on the way out of the model. ``source``
    records which stage produced the set ("stage1", "stage2", "fused", ...).
    ``window_offset`` is the originating window's start row when the video
    was processed in sliding windows; aggregation needs it to shift segments
    back into whole-video coordinates.
    """

    video_id: str
    segments: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    unit: str
    source: str = "stage1"
    window_offset: float | None = None

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.segments.shape[0]
        if self.scores.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("segments, scores, and labels must agree in length")
        if self.unit not in _VALID_UNITS:
            raise ValueError(f"unit must be one of {_VALID_UNITS}, got {self.unit!r}")
        if n and np.any(self.segments[:, 1] < self.segments[:, 0]):
            raise ValueError("proposal end must be >= start")

    @classmethod
    def empty(cls, video_id: str, unit: str, source: str = "stage1",
              window_offset: float | None = None) -> "ProposalSet":
        return cls(video_id, np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64),
                   unit=unit, source=source, window_offset=window_offset)

    def __len__(self) -> int:
        return int(self.segments.shape[0])

    def take(self, idx: np.ndarray | Sequence[int]) -> "ProposalSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ProposalSet(self.video_id, self.segments[idx], self.scores[idx],
                           self.labels[idx], unit=self.unit, source=self.source,
                           window_offset=self.window_offset)

    def sorted_by_score(self) -> "ProposalSet":
        # stable: ties keep input order
        order = np.argsort(-self.scores, kind="stable")
        return self.take(order)

    def to_seconds(self, feature_stride: float, frame_rate: float) -> "ProposalSet":
        if self.unit == UNIT_SECONDS:
            raise ValueError(f"{self.video_id}: proposals already in seconds")
        scale = feature_stride / frame_rate
        return ProposalSet(self.video_id, self.segments * scale, self.scores,
                           self.labels, unit=UNIT_SECONDS, source=self.source)


# ---------------------------------------------------------------------------
# interval geometry
# ---------------------------------------------------------------------------

def _as_pair(iv: TimeInterval | tuple[float, float]) -> tuple[float, float]:
    if isinstance(iv, TimeInterval):
        return iv.start, iv.end
    s, e = float(iv[0]), float(iv[1])
    return s, e


def _measures(a, b) -> tuple[float, float, float]:
    """(intersection, union, enclosure) lengths for two intervals."""
    sa, ea = _as_pair(a)
    sb, eb = _as_pair(b)
    inter = max(0.0, min(ea, eb) - max(sa, sb))
    union = (ea - sa) + (eb - sb) - inter
    enclosure = max(ea, eb) - min(sa, sb)
    return inter, union, enclosure


def tiou(a: TimeInterval | tuple, b: TimeInterval | tuple) -> float:
    """Temporal intersection-over-union; 0 whenever either operand is degenerate."""
    inter, union, _ = _measures(a, b)
    return inter / max(union, EPS)


def giou_term(a: TimeInterval | tuple, b: TimeInterval | tuple) -> float:
    """Generalized overlap: tiou minus the normalized empty slack of the enclosure.

    Negative for disjoint intervals (approaching -1 as they separate), equal to
    tiou when the enclosure is fully covered, e.g. for touching intervals.
    """
    inter, union, enclosure = _measures(a, b)
    return inter / max(union, EPS) - (enclosure - union) / max(enclosure, EPS)


def diou_term(a: TimeInterval | tuple, b: TimeInterval | tuple) -> float:
    """Distance-penalized overlap: tiou minus squared normalized center distance."""
    sa, ea = _as_pair(a)
    sb, eb = _as_pair(b)
    inter, union, enclosure = _measures(a, b)
    dc = 0.5 * (sa + ea) - 0.5 * (sb + eb)
    return inter / max(union, EPS) - (dc * dc) / max(enclosure * enclosure, EPS * EPS)


def clamp_interval(iv: TimeInterval | tuple, lo: float, hi: float) -> TimeInterval:
    """Clip an interval to [lo, hi]; may return a degenerate interval at a bound."""
    if hi < lo:
        raise ValueError(f"empty clamp range [{lo}, {hi}]")
    s, e = _as_pair(iv)
    return TimeInterval(min(max(s, lo), hi), min(max(e, lo), hi))


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tiou between (N, 2) and (M, 2) interval arrays, as (N, M) float64."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.maximum(
        0.0,
        np.minimum(a[:, None, 1], b[None, :, 1])
        - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return inter / np.maximum(union, EPS)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise giou_term between (N, 2) and (M, 2) interval arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.maximum(
        0.0,
        np.minimum(a[:, None, 1], b[None, :, 1])
        - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    enclosure = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(
        a[:, None, 0], b[None, :, 0]
    )
    return inter / np.maximum(union, EPS) - (enclosure - union) / np.maximum(
        enclosure, EPS
    )
