"""Second-stage refinement: pooled per-proposal features and a head that
nudges boundaries and rescores.

Four extraction methods share one sampling kernel. ``roi_align`` pools K
linearly interpolated bins from a (possibly context-extended) interval;
``keypoint`` reads just start/center/end; ``sgalign`` runs one graph
aggregation pass over the whole sequence first; ``boundary_matching``
evaluates the same kernel densely for every integer (start, duration) pair,
so each map entry is bit-equal to the corresponding ``roi_align`` call.

Coordinates handed to :class:`Stage2Refiner` are rows of the finest pyramid
level; it rescales internally when configured to pool a coarser level.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from minitad.core import ProposalSet
from minitad.heads import classification_probs
from minitad.losses import tiou_pairs
from minitad.neck import FeaturePyramid, GraphConvModule
from minitad.postproc import nms

ROI_METHODS = ("keypoint", "roialign", "sgalign", "boundary_matching")

PRIOR_PROBABILITY = 0.01


@dataclasses.dataclass(slots=True)
class RoIConfig:
    """How per-proposal features are pooled from the sequence.

    ``samples`` is the number of bins (forced to 3 for ``keypoint``).
    ``extension_ratio`` extends the pooled interval by that fraction of its
    length on each side. ``bm_max_duration`` caps the duration axis of the
    boundary-matching map; None means the full sequence length.
    """

    method: str = "roialign"
    samples: int = 16
    extension_ratio: float = 0.25
    bm_max_duration: int | None = None

    def __post_init__(self) -> None:
        if self.method not in ROI_METHODS:
            raise ValueError(f"method must be one of {ROI_METHODS}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.extension_ratio < 0:
            raise ValueError("extension_ratio must be >= 0")
        if self.bm_max_duration is not None and self.bm_max_duration < 1:
            raise ValueError("bm_max_duration must be >= 1")

    @property
    def effective_samples(self) -> int:
        return 3 if self.method == "keypoint" else self.samples


@dataclasses.dataclass(slots=True)
class Stage2Config:
    roi: RoIConfig = dataclasses.field(default_factory=RoIConfig)
    level: int = 0
    width: int = 256
    cascade_stages: int = 1
    train_top_n: int = 256
    test_top_n: int = 1000
    pre_nms_tiou: float = 0.9
    iou_positive: float = 0.7
    aux_channels: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.roi, dict):
            self.roi = RoIConfig(**self.roi)
        if self.level < 0:
            raise ValueError("level must be >= 0")
        if self.width < 1 or self.cascade_stages < 1:
            raise ValueError("width and cascade_stages must be positive")
        if self.train_top_n < 1 or self.test_top_n < 1:
            raise ValueError("top-n limits must be positive")
        if not 0 < self.pre_nms_tiou <= 1:
            raise ValueError("pre_nms_tiou must be in (0, 1]")
        if not 0 <= self.iou_positive < 1:
            raise ValueError("iou_positive must be in [0, 1)")
        if self.aux_channels < 0:
            raise ValueError("aux_channels must be >= 0")


@dataclasses.dataclass(slots=True)
class ProposalFeatureBatch:
    """Pooled features for a set of proposals: (N, K, D) values plus the
    intervals they were pooled from, in the pooled level's row units."""

    values: torch.Tensor
    intervals: torch.Tensor


@dataclasses.dataclass(slots=True)
class ProposalHeadOutput:
    boundary_deltas: torch.Tensor  # (N, 2), fractions of proposal length
    class_logits: torch.Tensor    # (N, C)
    aux: torch.Tensor             # (N, X), possibly zero-width


# ---------------------------------------------------------------------------
# sampling kernel
# ---------------------------------------------------------------------------

def interpolate_rows(features: torch.Tensor,
                     positions: torch.Tensor) -> torch.Tensor:
    """Linearly interpolate rows of (T, D) ``features`` at fractional row
    ``positions`` (any shape); positions are clamped to [0, T-1]."""
    t = features.shape[0]
    pos = positions.clamp(0.0, float(t - 1))
    lo = pos.floor().long()
    hi = (lo + 1).clamp(max=t - 1)
    frac = (pos - lo.to(pos.dtype)).unsqueeze(-1)
    return features[lo] * (1.0 - frac) + features[hi] * frac


def _bin_positions(starts: torch.Tensor, ends: torch.Tensor, bins: int,
                   extension_ratio: float) -> torch.Tensor:
    """(N, K) bin-center row coordinates for each [start, end] interval."""
    length = ends - starts
    ext_start = starts - extension_ratio * length
    ext_length = (1.0 + 2.0 * extension_ratio) * length
    offsets = (torch.arange(bins, dtype=starts.dtype, device=starts.device)
               + 0.5) / bins
    return ext_start.unsqueeze(-1) + offsets * ext_length.unsqueeze(-1)


def roi_align(features: torch.Tensor, intervals: torch.Tensor, bins: int,
              extension_ratio: float = 0.0) -> torch.Tensor:
    """Pool (N, K, D) from (T, D) features: K evenly spaced bins across each
    interval, one linear interpolation per bin center. A zero-length interval
    samples its single point K times."""
    pos = _bin_positions(intervals[:, 0], intervals[:, 1], bins,
                         extension_ratio)
    return interpolate_rows(features, pos)


def roi_keypoint(features: torch.Tensor, intervals: torch.Tensor,
                 extension_ratio: float = 0.0) -> torch.Tensor:
    """Sample exactly the (extended) start, the center, and the (extended)
    end: (N, 3, D)."""
    starts, ends = intervals[:, 0], intervals[:, 1]
    length = ends - starts
    pos = torch.stack([starts - extension_ratio * length,
                       0.5 * (starts + ends),
                       ends + extension_ratio * length], dim=-1)
    return interpolate_rows(features, pos)


def sg_align(features: torch.Tensor, mask: torch.Tensor,
             intervals: torch.Tensor, bins: int, graph: GraphConvModule,
             extension_ratio: float = 0.0) -> torch.Tensor:
    """One residual graph-aggregation pass over the whole sequence, then
    ``roi_align`` on the aggregated features."""
    aggregated = features + graph(features.unsqueeze(0),
                                  mask.unsqueeze(0)).squeeze(0)
    return roi_align(aggregated, intervals, bins, extension_ratio)


# ---------------------------------------------------------------------------
# dense boundary-matching map
# ---------------------------------------------------------------------------

@dataclasses.dataclass(slots=True)
class BoundaryMatchingMap:
    """Dense (D_max, T, K, D') pooled features: row d-1 holds every start of
    duration d. ``valid[d-1, s]`` is False where s + d exceeds the sequence."""

    values: torch.Tensor
    valid: torch.Tensor

    def entry(self, start: int, duration: int) -> torch.Tensor:
        if not self.valid[duration - 1, start]:
            raise IndexError(f"(start={start}, duration={duration}) is out of"
                             " range for this map")
        return self.values[duration - 1, start]


def boundary_matching(features, config: RoIConfig) -> BoundaryMatchingMap:
    """Evaluate the pooling kernel for every integer (start, duration) pair
    with duration <= bm_max_duration and start + duration <= T.

    Accepts a (T, D) tensor or a single-level, single-sample pyramid; a
    multi-scale pyramid is rejected because the map is defined on one time
    axis.
    """
    if isinstance(features, FeaturePyramid):
        if len(features) != 1:
            raise ValueError("boundary_matching needs a single-scale input; "
                             f"got a {len(features)}-level pyramid")
        if features.levels[0].shape[0] != 1:
            raise ValueError("boundary_matching maps one sequence at a time")
        features = features.levels[0][0]
    if features.ndim != 2:
        raise ValueError("features must be (T, D)")
    t = features.shape[0]
    d_max = t if config.bm_max_duration is None else min(
        config.bm_max_duration, t)
    k = config.effective_samples

    durations, starts = [], []
    for d in range(1, d_max + 1):
        for s in range(t - d + 1):
            durations.append(d)
            starts.append(s)
    start_t = torch.tensor(starts, dtype=features.dtype,
                           device=features.device)
    dur_t = torch.tensor(durations, dtype=features.dtype,
                         device=features.device)
    pooled = roi_align(features,
                       torch.stack([start_t, start_t + dur_t], dim=-1),
                       k, config.extension_ratio)

    values = features.new_zeros(d_max, t, k, features.shape[1])
    valid = torch.zeros(d_max, t, dtype=torch.bool, device=features.device)
    d_idx = torch.tensor(durations, device=features.device) - 1
    s_idx = torch.tensor(starts, device=features.device)
    values[d_idx, s_idx] = pooled
    valid[d_idx, s_idx] = True
    return BoundaryMatchingMap(values, valid)


def _snap_to_grid(intervals: torch.Tensor, t: int,
                  d_max: int) -> torch.Tensor:
    """Round intervals onto the integer (start, duration) lattice the
    boundary-matching map is defined on."""
    starts = intervals[:, 0].round()
    durations = (intervals[:, 1] - intervals[:, 0]).round().clamp(
        1.0, float(d_max))
    starts = torch.minimum(starts.clamp(min=0.0),
                           torch.tensor(float(t), dtype=starts.dtype,
                                        device=starts.device) - durations)
    starts = starts.clamp(min=0.0)
    return torch.stack([starts, starts + durations], dim=-1)


# ---------------------------------------------------------------------------
# proposal head and cascade
# ---------------------------------------------------------------------------

class ProposalHead(nn.Module):
    """MLP over the flattened (K, D') pool: 2 boundary deltas, C class
    logits, X aux channels. The output layer starts at zero so refinement is
    the identity at initialization; class bias starts at the focal prior."""

    def __init__(self, feature_dim: int, bins: int, width: int,
                 num_classes: int, aux_channels: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.aux_channels = aux_channels
        self.body = nn.Sequential(
            nn.Linear(bins * feature_dim, width), nn.GELU(),
            nn.Linear(width, width), nn.GELU())
        self.out = nn.Linear(width, 2 + num_classes + aux_channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        prior = -float(torch.log(torch.tensor(
            (1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)))
        nn.init.constant_(self.out.bias[2:2 + num_classes], prior)

    def forward(self, pooled: torch.Tensor) -> ProposalHeadOutput:
        raw = self.out(self.body(pooled.flatten(1)))
        c = self.num_classes
        return ProposalHeadOutput(boundary_deltas=raw[:, :2],
                                  class_logits=raw[:, 2:2 + c],
                                  aux=raw[:, 2 + c:])


def apply_deltas(intervals: torch.Tensor, deltas: torch.Tensor,
                 valid_length: float) -> torch.Tensor:
    """start += ds*length, end += de*length, then clamp into [0, valid] with
    start <= end."""
    length = intervals[:, 1] - intervals[:, 0]
    start = (intervals[:, 0] + deltas[:, 0] * length).clamp(0.0, valid_length)
    end = (intervals[:, 1] + deltas[:, 1] * length).clamp(0.0, valid_length)
    return torch.stack([torch.minimum(start, end),
                        torch.maximum(start, end)], dim=-1)


def fuse_scores(stage1_scores: torch.Tensor,
                stage_probs: list[torch.Tensor]) -> torch.Tensor:
    """Joint geometric mean of the first-stage score and every cascade
    stage's probability."""
    product = stage1_scores
    for p in stage_probs:
        product = product * p
    return product.clamp(min=0.0) ** (1.0 / (1 + len(stage_probs)))


@dataclasses.dataclass(slots=True)
class Stage2Output:
    """Per-cascade-stage head outputs plus the intervals each stage pooled
    from (pre-refinement, level-0 rows) and the final refined results."""

    stage_outputs: list[ProposalHeadOutput]
    stage_inputs: list[torch.Tensor]
    refined: torch.Tensor
    fused_scores: torch.Tensor


class Stage2Refiner(nn.Module):
    """Pool per-proposal features from one pyramid level and run the cascade.

    Proposals come and go in rows of the finest level; pooling on level l
    divides by 2**l. With the boundary-matching method each stage snaps its
    intervals to the integer grid first, so every pooled feature equals an
    entry of the dense map (same kernel, same coordinates).
    """

    def __init__(self, config: Stage2Config, feature_dim: int,
                 num_classes: int, graph_k: int = 8):
        super().__init__()
        self.config = config
        self.graph = (GraphConvModule(feature_dim, graph_k)
                      if config.roi.method == "sgalign" else None)
        self.heads = nn.ModuleList(
            ProposalHead(feature_dim, config.roi.effective_samples,
                         config.width, num_classes, config.aux_channels)
            for _ in range(config.cascade_stages))

    def extract(self, features: torch.Tensor, mask: torch.Tensor,
                intervals: torch.Tensor) -> ProposalFeatureBatch:
        roi = self.config.roi
        if roi.method == "keypoint":
            pooled = roi_keypoint(features, intervals, roi.extension_ratio)
        elif roi.method == "roialign":
            pooled = roi_align(features, intervals, roi.samples,
                               roi.extension_ratio)
        elif roi.method == "sgalign":
            pooled = sg_align(features, mask, intervals, roi.samples,
                              self.graph, roi.extension_ratio)
        else:
            t = features.shape[0]
            d_max = t if roi.bm_max_duration is None else min(
                roi.bm_max_duration, t)
            intervals = _snap_to_grid(intervals, t, d_max)
            pooled = roi_align(features, intervals, roi.samples,
                               roi.extension_ratio)
        return ProposalFeatureBatch(pooled, intervals)

    def forward(self, pyramid: FeaturePyramid, sample_index: int,
                proposals: torch.Tensor, stage1_scores: torch.Tensor,
                labels: torch.Tensor, cls_loss: str = "focal") -> Stage2Output:
        """``proposals`` (N, 2) in level-0 rows, detached; returns refined
        intervals in the same units."""
        cfg = self.config
        if cfg.roi.method == "boundary_matching" and len(pyramid) != 1:
            raise ValueError("boundary_matching needs a single-scale neck; "
                             f"got {len(pyramid)} pyramid levels")
        if cfg.level >= len(pyramid):
            raise ValueError(f"stage2 level {cfg.level} does not exist in a "
                             f"{len(pyramid)}-level pyramid")
        features = pyramid.levels[cfg.level][sample_index]
        mask = pyramid.masks[cfg.level][sample_index]
        scale = float(pyramid.strides[cfg.level])
        valid = float(mask.sum().item())

        current = proposals / scale
        stage_outputs: list[ProposalHeadOutput] = []
        stage_inputs: list[torch.Tensor] = []
        probs: list[torch.Tensor] = []
        for head in self.heads:
            batch = self.extract(features, mask, current)
            out = head(batch.values)
            stage_outputs.append(out)
            stage_inputs.append(batch.intervals * scale)
            current = apply_deltas(batch.intervals, out.boundary_deltas,
                                   valid)
            all_probs = classification_probs(out.class_logits, cls_loss)
            probs.append(all_probs.gather(
                1, labels.view(-1, 1)).squeeze(1))
        fused = fuse_scores(stage1_scores, probs)
        return Stage2Output(stage_outputs, stage_inputs, current * scale,
                            fused)


# ---------------------------------------------------------------------------
# selection and targets
# ---------------------------------------------------------------------------

def select_for_stage2(proposals: ProposalSet, config: Stage2Config,
                      training: bool) -> ProposalSet:
    """Light de-duplication (class-agnostic NMS at a high overlap) followed
    by a top-N cut, so the cascade cost stays bounded."""
    kept = nms(proposals, config.pre_nms_tiou, per_class=False)
    limit = config.train_top_n if training else config.test_top_n
    return kept.take(np.arange(min(limit, len(kept))))


def assign_stage2_targets(proposals: torch.Tensor, segments: torch.Tensor,
                          labels: torch.Tensor, iou_positive: float = 0.7):
    """Positive iff best tIoU against ground truth is strictly above the
    threshold. Returns (cls_target with -1 for background, matched gt boxes,
    positive mask)."""
    n = proposals.shape[0]
    cls_target = torch.full((n,), -1, dtype=torch.long,
                            device=proposals.device)
    boxes = torch.zeros_like(proposals)
    pos = torch.zeros(n, dtype=torch.bool, device=proposals.device)
    if n == 0 or segments.shape[0] == 0:
        return cls_target, boxes, pos
    overlap = tiou_pairs(proposals.unsqueeze(1), segments.unsqueeze(0))
    best, best_idx = overlap.max(dim=1)
    pos = best > iou_positive
    cls_target[pos] = labels[best_idx[pos]]
    boxes[pos] = segments[best_idx[pos]]
    return cls_target, boxes, pos


def encode_stage2_deltas(proposals: torch.Tensor,
                         boxes: torch.Tensor) -> torch.Tensor:
    """Fraction-of-length offsets that ``apply_deltas`` would need to move
    each proposal onto its box."""
    length = (proposals[:, 1] - proposals[:, 0]).clamp(min=1e-6)
    return torch.stack([(boxes[:, 0] - proposals[:, 0]) / length,
                        (boxes[:, 1] - proposals[:, 1]) / length], dim=-1)
