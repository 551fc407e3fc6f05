"""Detection evaluation: per-class average precision at tIoU thresholds,
dataset-style averaging, multi-seed statistics, and the file formats the CLI
reads and writes.

AP uses all-point interpolation and accumulates recall increments in rank
order. Consecutive recall values differ by exactly one matched instance, and
subtracting two such nearby floats is exact, so a detector that ranks every
true positive above every false positive scores exactly 1.0 rather than
0.999...; a fixture depends on this.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .core import UNIT_SECONDS, ActionInstance, LabelSpace, ProposalSet, TimeInterval
from .data.annotations import AnnotationDatabase

THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
ACTIVITYNET_THRESHOLDS = (0.5, 0.55, 0.6, 0.65, 0.7,
                          0.75, 0.8, 0.85, 0.9, 0.95)


@dataclasses.dataclass(slots=True)
class EvalConfig:
    tiou_thresholds: tuple[float, ...] = ACTIVITYNET_THRESHOLDS
    max_predictions_per_video: int = 100
    top_k_external: int = 2

    def __post_init__(self) -> None:
        if isinstance(self.tiou_thresholds, list):
            self.tiou_thresholds = tuple(self.tiou_thresholds)
        t = self.tiou_thresholds
        if not t:
            raise ValueError("need at least one tiou threshold")
        if any(not 0.0 < x <= 1.0 for x in t):
            raise ValueError("tiou thresholds must lie in (0, 1]")
        if any(t[i] >= t[i + 1] for i in range(len(t) - 1)):
            raise ValueError("tiou thresholds must be strictly increasing")
        if self.max_predictions_per_video < 1:
            raise ValueError("max_predictions_per_video must be positive")
        if self.top_k_external < 1:
            raise ValueError("top_k_external must be positive")


def average_precision(predictions, ground_truth, threshold: float):
    """AP for one class; None when the class has no ground truth.

    ``predictions`` is a sequence of (video_id, start, end, score) and
    ``ground_truth`` of (video_id, start, end). Predictions are ranked by
    descending score (stable for ties); each prediction greedily matches the
    highest-tiou not-yet-matched instance in its video and counts as a true
    positive iff that tiou reaches the threshold.
    """
    npos = len(ground_truth)
    if npos == 0:
        return None
    if not predictions:
        return 0.0
    gt_by_video: dict[str, list[list[float]]] = {}
    for vid, s, e in ground_truth:
        gt_by_video.setdefault(vid, []).append([float(s), float(e), 0.0])

    scores = np.asarray([p[3] for p in predictions], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    n = order.shape[0]
    tp = np.zeros(n, dtype=np.float64)
    for rank, idx in enumerate(order):
        vid, s, e, _ = predictions[idx]
        best_t = -1.0
        best_g = None
        for g in gt_by_video.get(vid, ()):
            if g[2]:
                continue
            inter = max(0.0, min(e, g[1]) - max(s, g[0]))
            union = (e - s) + (g[1] - g[0]) - inter
            t = inter / max(union, 1e-8)
            if t >= threshold and t > best_t:
                best_t = t
                best_g = g
        if best_g is not None:
            best_g[2] = 1.0
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, n + 1)
    recall = cum_tp / npos
    # monotone non-increasing from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for k in range(n):
        if tp[k]:
            ap += (recall[k] - prev_recall) * interp[k]
            prev_recall = recall[k]
    return float(ap)


@dataclasses.dataclass(slots=True)
class EvalResult:
    thresholds: tuple[float, ...]
    map_per_threshold: list[float]
    average_map: float
    ap_per_class: dict[int, list]  # class id -> AP per threshold

    def as_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "map_per_threshold": self.map_per_threshold,
            "average_map": self.average_map,
        }


def mean_average_precision(predictions: list[ProposalSet],
                           database: AnnotationDatabase,
                           config: EvalConfig,
                           subset: str | None = None) -> EvalResult:
    """mAP over the database's classes at each configured threshold.

    Predictions must be in seconds. Each video keeps at most
    ``max_predictions_per_video`` by score before matching; classes without
    ground truth in the evaluated videos are left out of the mean.
    """
    if subset is not None:
        video_ids = {r.video_id for r in database.subset(subset)}
    else:
        video_ids = set(database.video_ids)

    preds_by_class: dict[int, list] = {}
    for ps in predictions:
        if ps.unit != UNIT_SECONDS:
            raise ValueError(f"{ps.video_id}: evaluation needs proposals in "
                             f"seconds, got {ps.unit!r}")
        if ps.video_id not in video_ids:
            continue
        ranked = ps.sorted_by_score()
        if len(ranked) > config.max_predictions_per_video:
            ranked = ranked.take(np.arange(config.max_predictions_per_video))
        for i in range(len(ranked)):
            preds_by_class.setdefault(int(ranked.labels[i]), []).append(
                (ranked.video_id, float(ranked.segments[i, 0]),
                 float(ranked.segments[i, 1]), float(ranked.scores[i])))

    gt_by_class: dict[int, list] = {}
    for vid in sorted(video_ids):
        record = database[vid]
        for inst in record.instances:
            gt_by_class.setdefault(int(inst.label), []).append(
                (vid, inst.interval.start, inst.interval.end))

    if not gt_by_class:
        raise ValueError("no ground-truth instances to evaluate against")

    ap_per_class: dict[int, list] = {}
    for cls in sorted(gt_by_class):
        aps = [average_precision(preds_by_class.get(cls, []),
                                 gt_by_class[cls], thr)
               for thr in config.tiou_thresholds]
        ap_per_class[cls] = aps

    map_per_threshold = []
    for i in range(len(config.tiou_thresholds)):
        vals = [ap_per_class[c][i] for c in ap_per_class]
        map_per_threshold.append(float(np.mean(vals)))
    return EvalResult(
        thresholds=tuple(config.tiou_thresholds),
        map_per_threshold=map_per_threshold,
        average_map=float(np.mean(map_per_threshold)),
        ap_per_class=ap_per_class)


# ---------------------------------------------------------------------------
# multi-seed statistics
# ---------------------------------------------------------------------------

@dataclasses.dataclass(slots=True)
class SeedStatistics:
    mean: float
    std: float | None  # sample std (n-1); absent for a single value

    def formatted(self) -> str:
        if self.std is None:
            return f"{self.mean:.2f}"
        return f"{self.mean:.2f}±{self.std:.2f}"


def seed_statistics(values) -> SeedStatistics:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no values to summarize")
    mean = float(np.mean(vals))
    if len(vals) < 2:
        return SeedStatistics(mean=mean, std=None)
    return SeedStatistics(mean=mean, std=float(np.std(vals, ddof=1)))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_detections(path: str | Path, predictions: list[ProposalSet],
                    label_space: LabelSpace) -> None:
    """JSON with {"results": {video_id: [{"segment", "label", "score"}]}}."""
    results: dict[str, list] = {}
    for ps in predictions:
        if ps.unit != UNIT_SECONDS:
            raise ValueError(f"{ps.video_id}: detections must be saved in "
                             f"seconds, got {ps.unit!r}")
        items = results.setdefault(ps.video_id, [])
        for i in range(len(ps)):
            items.append({
                "segment": [float(ps.segments[i, 0]), float(ps.segments[i, 1])],
                "label": label_space.decode(int(ps.labels[i])),
                "score": float(ps.scores[i]),
            })
    Path(path).write_text(json.dumps({"results": results}, indent=2))


def load_detections(path: str | Path,
                    label_space: LabelSpace) -> list[ProposalSet]:
    data = json.loads(Path(path).read_text())
    if "results" not in data:
        raise ValueError(f"{path}: missing top-level 'results' key")
    out = []
    for vid in sorted(data["results"]):
        items = data["results"][vid]
        segments = np.asarray([it["segment"] for it in items],
                              dtype=np.float64).reshape(-1, 2)
        scores = np.asarray([it["score"] for it in items], dtype=np.float64)
        labels = np.asarray([label_space.encode(it["label"]) for it in items],
                            dtype=np.int64)
        out.append(ProposalSet(vid, segments, scores, labels,
                               unit=UNIT_SECONDS, source="file"))
    return out


def load_external_classifier(path: str | Path) -> dict[str, dict]:
    """JSON with {video_id: {"labels": [...], "scores": [...]}}."""
    data = json.loads(Path(path).read_text())
    for vid, entry in data.items():
        if "labels" not in entry or "scores" not in entry:
            raise ValueError(f"{path}: entry for {vid!r} needs 'labels' and "
                             f"'scores'")
        if len(entry["labels"]) != len(entry["scores"]):
            raise ValueError(f"{path}: {vid!r} labels/scores length mismatch")
    return data


def write_report_csv(path: str | Path, result: EvalResult) -> None:
    """CSV with one row per threshold plus a trailing 'average' row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "mAP"])
        for thr, val in zip(result.thresholds, result.map_per_threshold):
            writer.writerow([f"{thr:g}", f"{val:.6f}"])
        writer.writerow(["average", f"{result.average_map:.6f}"])


def database_to_instances(database: AnnotationDatabase,
                          subset: str | None = None):
    """Flatten a database to (video_id, start, end, label) rows, mainly for
    tests and oracles."""
    rows = []
    vids = ({r.video_id for r in database.subset(subset)}
            if subset is not None else set(database.video_ids))
    for vid in sorted(vids):
        for inst in database[vid].instances:
            rows.append((vid, inst.interval.start, inst.interval.end,
                         int(inst.label)))
    return rows


def proposals_from_instances(video_id: str, instances: list[ActionInstance],
                             unit: str = UNIT_SECONDS) -> ProposalSet:
    """A ProposalSet echoing ground truth; the perfect-detector fixture."""
    segments = np.asarray([[i.interval.start, i.interval.end]
                           for i in instances], dtype=np.float64).reshape(-1, 2)
    labels = np.asarray([i.label for i in instances], dtype=np.int64)
    scores = np.asarray([1.0 if i.score is None else i.score
                         for i in instances], dtype=np.float64)
    return ProposalSet(video_id, segments, scores, labels, unit=unit,
                       source="oracle")


def instances_from_proposals(ps: ProposalSet) -> list[ActionInstance]:
    return [ActionInstance(TimeInterval(float(ps.segments[i, 0]),
                                        float(ps.segments[i, 1])),
                           label=int(ps.labels[i]), score=float(ps.scores[i]))
            for i in range(len(ps))]
