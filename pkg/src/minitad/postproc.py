"""Post-processing of scored proposals: duplicate suppression, sliding-window
aggregation back to video coordinates, and external-classifier fusion.

All functions are pure: they take a ProposalSet and return a new one. Ordering
inside a result follows the deterministic ranking (score descending, then
earlier start, then original input index) so equal inputs give equal outputs
byte for byte.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import (
    UNIT_FEATURES,
    UNIT_SECONDS,
    LabelSpace,
    ProposalSet,
    tiou_matrix,
)

NMS_METHODS = ("nms", "soft_nms", "none")
SOFT_DECAYS = ("linear", "gaussian")


@dataclasses.dataclass(slots=True)
class PostprocessConfig:
    method: str = "soft_nms"
    iou_threshold: float = 0.5     # nms suppression and soft-nms linear decay
    per_class: bool = True         # nms only
    decay: str = "gaussian"
    sigma: float = 0.5
    score_floor: float = 1e-4
    max_predictions: int = 100

    def __post_init__(self) -> None:
        if self.method not in NMS_METHODS:
            raise ValueError(f"method must be one of {NMS_METHODS}")
        if self.decay not in SOFT_DECAYS:
            raise ValueError(f"decay must be one of {SOFT_DECAYS}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.score_floor < 0.0:
            raise ValueError("score_floor must be non-negative")
        if self.max_predictions < 1:
            raise ValueError("max_predictions must be positive")


def _ranked_order(proposals: ProposalSet) -> np.ndarray:
    """Score descending, then earlier start, then original index."""
    n = len(proposals)
    return np.lexsort((np.arange(n), proposals.segments[:, 0],
                       -proposals.scores))


def nms(proposals: ProposalSet, iou_threshold: float,
        per_class: bool = True) -> ProposalSet:
    """Greedy suppression: drop any proposal overlapping a kept higher-scored
    one with tiou strictly above the threshold."""
    if len(proposals) <= 1:
        return proposals
    order = _ranked_order(proposals)
    segments = proposals.segments[order]
    labels = proposals.labels[order]
    overlap = tiou_matrix(segments, segments)
    keep: list[int] = []
    for i in range(len(order)):
        suppressed = False
        for j in keep:
            if per_class and labels[i] != labels[j]:
                continue
            if overlap[j, i] > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            keep.append(i)
    return proposals.take(order[keep])


def soft_nms(proposals: ProposalSet, decay: str = "gaussian",
             iou_threshold: float = 0.5, sigma: float = 0.5,
             score_floor: float = 1e-4) -> ProposalSet:
    """Score decay instead of hard suppression.

    Iteratively commits the highest-scored remaining proposal and decays the
    rest: linear multiplies by (1 - tiou) when tiou exceeds the threshold,
    gaussian multiplies by exp(-tiou^2 / sigma) unconditionally. Proposals
    whose decayed score drops below the floor are discarded. Class labels do
    not partition the comparison.
    """
    if decay not in SOFT_DECAYS:
        raise ValueError(f"decay must be one of {SOFT_DECAYS}")
    n = len(proposals)
    if n == 0:
        return proposals
    segments = proposals.segments
    scores = proposals.scores.copy()
    starts = segments[:, 0]
    overlap = tiou_matrix(segments, segments)
    alive = np.ones(n, dtype=bool)
    kept_idx: list[int] = []
    kept_scores: list[float] = []
    while alive.any():
        candidates = np.flatnonzero(alive)
        # max score, ties to the earlier start then the earlier input index
        pick = candidates[np.lexsort((candidates, starts[candidates],
                                      -scores[candidates]))[0]]
        alive[pick] = False
        kept_idx.append(int(pick))
        kept_scores.append(float(scores[pick]))
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        t = overlap[pick, rest]
        if decay == "linear":
            factor = np.where(t > iou_threshold, 1.0 - t, 1.0)
        else:
            factor = np.exp(-(t * t) / sigma)
        scores[rest] *= factor
        alive[rest] &= scores[rest] >= score_floor
    out = proposals.take(np.asarray(kept_idx, dtype=np.int64))
    return ProposalSet(out.video_id, out.segments,
                       np.asarray(kept_scores, dtype=np.float64), out.labels,
                       unit=out.unit, source=out.source,
                       window_offset=out.window_offset)


def apply_postprocess(proposals: ProposalSet,
                      config: PostprocessConfig) -> ProposalSet:
    if config.method == "nms":
        out = nms(proposals, config.iou_threshold, per_class=config.per_class)
    elif config.method == "soft_nms":
        out = soft_nms(proposals, decay=config.decay,
                       iou_threshold=config.iou_threshold, sigma=config.sigma,
                       score_floor=config.score_floor)
    else:
        out = proposals.take(_ranked_order(proposals))
    if len(out) > config.max_predictions:
        out = out.take(np.arange(config.max_predictions))
    return out


def aggregate_windows(window_sets: list[ProposalSet], feature_stride: float,
                      frame_rate: float) -> ProposalSet:
    """Shift per-window proposals back to whole-video coordinates and convert
    to seconds. Suppression deliberately happens after this, never before."""
    if not window_sets:
        raise ValueError("no window proposal sets to aggregate")
    video_ids = {ps.video_id for ps in window_sets}
    if len(video_ids) > 1:
        raise ValueError(f"cannot aggregate windows from different videos: "
                         f"{sorted(video_ids)}")
    segments, scores, labels = [], [], []
    for ps in window_sets:
        if ps.unit != UNIT_FEATURES:
            raise ValueError(f"{ps.video_id}: window proposals must be in "
                             f"feature rows, got {ps.unit!r}")
        if ps.window_offset is None:
            raise ValueError(f"{ps.video_id}: window proposal set lacks its "
                             f"window offset")
        segments.append(ps.segments + ps.window_offset)
        scores.append(ps.scores)
        labels.append(ps.labels)
    merged = ProposalSet(window_sets[0].video_id, np.concatenate(segments),
                         np.concatenate(scores), np.concatenate(labels),
                         unit=UNIT_FEATURES, source=window_sets[0].source)
    return merged.to_seconds(feature_stride, frame_rate)


def fuse_external_classifier(proposals: ProposalSet,
                             external: dict[str, dict],
                             label_space: LabelSpace,
                             top_k: int = 2) -> ProposalSet:
    """Replicate class-agnostic proposals over a video-level classifier's
    top-k classes, multiplying scores by the class probabilities."""
    if top_k < 1:
        raise ValueError("top_k must be positive")
    if proposals.video_id not in external:
        raise KeyError(f"no external classifier scores for video "
                       f"{proposals.video_id!r}")
    entry = external[proposals.video_id]
    names = list(entry["labels"])
    probs = np.asarray(entry["scores"], dtype=np.float64)
    if len(names) != probs.shape[0]:
        raise ValueError(f"{proposals.video_id}: external labels and scores "
                         f"disagree in length")
    k = min(top_k, len(names))
    top = np.argsort(-probs, kind="stable")[:k]
    segments, scores, labels = [], [], []
    for rank in top:
        segments.append(proposals.segments)
        scores.append(proposals.scores * probs[rank])
        labels.append(np.full(len(proposals), label_space.encode(names[rank]),
                              dtype=np.int64))
    if not segments:
        return ProposalSet.empty(proposals.video_id, unit=proposals.unit,
                                 source="fused")
    return ProposalSet(proposals.video_id, np.concatenate(segments),
                       np.concatenate(scores), np.concatenate(labels),
                       unit=proposals.unit, source="fused")
