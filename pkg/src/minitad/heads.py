"""Dense detection head over the feature pyramid.

Every pyramid cell becomes one or more prediction slots. In the ``point``
parameterization a slot is the cell's center and regression predicts
stride-normalized distances to the action's start and end. In the ``anchor``
parameterization each cell carries one slot per configured anchor scale and
regression predicts a center offset and a log length ratio relative to that
anchor. Classification and regression towers are shared across levels.

Target assignment, the auxiliary point supervision (actionness, startness,
endness), and the proposal decode all work in row units of the pyramid input
grid: location ``i`` at stride ``s`` sits at ``(i + 0.5) * s`` rows.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import UNIT_FEATURES, ProposalSet
from .neck import FeaturePyramid, masked_fill_zero

ASSIGNMENTS = ("center_radius", "max_iou", "inside_gt", "simota")
PARAMETERIZATIONS = ("point", "anchor")


def default_regression_ranges(levels: int) -> tuple[tuple[float, float], ...]:
    """Per-level action-length ranges in rows: (0, 8), (8, 16), ... (.., inf)."""
    bounds = [0.0] + [8.0 * 2 ** lvl for lvl in range(levels - 1)] + [math.inf]
    return tuple((bounds[i], bounds[i + 1]) for i in range(levels))


@dataclasses.dataclass(slots=True)
class HeadConfig:
    num_classes: int = 1
    parameterization: str = "point"
    anchor_scales: tuple[float, ...] = (3.0, 6.0)
    head_width: int | None = None  # defaults to the neck width
    head_depth: int = 2
    assignment: str = "center_radius"
    center_radius: float = 1.5
    iou_pos_threshold: float = 0.6
    regression_ranges: tuple[tuple[float, float], ...] | None = None
    with_aux_heads: bool = True
    boundary_width_ratio: float = 0.1
    cls_prior: float = 0.01

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {ASSIGNMENTS}")
        if isinstance(self.anchor_scales, list):
            self.anchor_scales = tuple(self.anchor_scales)
        if isinstance(self.regression_ranges, list):
            self.regression_ranges = tuple(tuple(r) for r in self.regression_ranges)
        if self.parameterization == "anchor" and not self.anchor_scales:
            raise ValueError("anchor parameterization needs at least one scale")
        if not 0.0 < self.cls_prior < 1.0:
            raise ValueError("cls_prior must lie in (0, 1)")

    @property
    def slots_per_location(self) -> int:
        return len(self.anchor_scales) if self.parameterization == "anchor" else 1


# ---------------------------------------------------------------------------
# offset encoding
# ---------------------------------------------------------------------------

def encode_point(segments: torch.Tensor, centers: torch.Tensor,
                 strides: torch.Tensor) -> torch.Tensor:
    """(P, 2) stride-normalized distances from center to start and end."""
    d_start = (centers - segments[:, 0]) / strides
    d_end = (segments[:, 1] - centers) / strides
    return torch.stack([d_start, d_end], dim=-1)


def decode_point(params: torch.Tensor, centers: torch.Tensor,
                 strides: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`encode_point`; distances are clamped non-negative."""
    d = F.relu(params)
    start = centers - d[..., 0] * strides
    end = centers + d[..., 1] * strides
    return torch.stack([start, end], dim=-1)


def encode_anchor(segments: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """(P, 2) center offset / anchor length and log length ratio."""
    a_center = 0.5 * (anchors[:, 0] + anchors[:, 1])
    a_len = anchors[:, 1] - anchors[:, 0]
    g_center = 0.5 * (segments[:, 0] + segments[:, 1])
    g_len = (segments[:, 1] - segments[:, 0]).clamp(min=1e-6)
    return torch.stack([(g_center - a_center) / a_len,
                        torch.log(g_len / a_len)], dim=-1)


def decode_anchor(params: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`encode_anchor`."""
    a_center = 0.5 * (anchors[..., 0] + anchors[..., 1])
    a_len = anchors[..., 1] - anchors[..., 0]
    center = a_center + params[..., 0] * a_len
    length = a_len * torch.exp(params[..., 1])
    return torch.stack([center - 0.5 * length, center + 0.5 * length], dim=-1)


# ---------------------------------------------------------------------------
# head module
# ---------------------------------------------------------------------------

def _tower(width: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for _ in range(depth):
        layers += [nn.Conv1d(width, width, kernel_size=3, padding=1), nn.GELU()]
    return nn.Sequential(*layers)


@dataclasses.dataclass(slots=True)
class FlatOutputs:
    """All levels and anchor slots concatenated along one slot axis."""

    cls_logits: torch.Tensor          # (B, N, C)
    reg_params: torch.Tensor          # (B, N, 2)
    centers: torch.Tensor             # (N,) row units
    strides: torch.Tensor             # (N,)
    level_ranges: torch.Tensor        # (N, 2) action-length range of the slot's level
    valid: torch.Tensor               # (B, N) bool
    anchors: torch.Tensor | None      # (N, 2) in anchor mode
    aux_logits: torch.Tensor | None   # (B, M, 3); one row per location, not per slot
    aux_centers: torch.Tensor | None  # (M,)
    aux_valid: torch.Tensor | None    # (B, M)

    def decode(self, params: torch.Tensor) -> torch.Tensor:
        if self.anchors is None:
            return decode_point(params, self.centers, self.strides)
        return decode_anchor(params, self.anchors)


@dataclasses.dataclass(slots=True)
class HeadOutputs:
    cls_logits: list[torch.Tensor]    # per level (B, T_l, A, C)
    reg_params: list[torch.Tensor]    # per level (B, T_l, A, 2)
    aux_logits: list[torch.Tensor] | None
    locations: list[torch.Tensor]     # per level (T_l,)
    anchors: list[torch.Tensor] | None  # per level (T_l, A, 2)
    strides: tuple[int, ...]
    masks: list[torch.Tensor]
    regression_ranges: tuple[tuple[float, float], ...]

    def flatten(self) -> FlatOutputs:
        b = self.cls_logits[0].shape[0]
        num_classes = self.cls_logits[0].shape[-1]
        cls_flat, reg_flat, centers, strides, ranges, valid = [], [], [], [], [], []
        anchors_flat = [] if self.anchors is not None else None
        for lvl, (cls, reg) in enumerate(zip(self.cls_logits, self.reg_params)):
            t_l, a = cls.shape[1], cls.shape[2]
            cls_flat.append(cls.reshape(b, t_l * a, num_classes))
            reg_flat.append(reg.reshape(b, t_l * a, 2))
            centers.append(self.locations[lvl].repeat_interleave(a))
            strides.append(torch.full((t_l * a,), float(self.strides[lvl]),
                                      dtype=torch.float32))
            lo, hi = self.regression_ranges[lvl]
            ranges.append(torch.tensor([[lo, hi]]).expand(t_l * a, 2))
            valid.append(self.masks[lvl].repeat_interleave(a, dim=1))
            if anchors_flat is not None:
                anchors_flat.append(self.anchors[lvl].reshape(t_l * a, 2))
        aux = aux_centers = aux_valid = None
        if self.aux_logits is not None:
            aux = torch.cat(self.aux_logits, dim=1)
            aux_centers = torch.cat(self.locations)
            aux_valid = torch.cat(self.masks, dim=1)
        return FlatOutputs(
            cls_logits=torch.cat(cls_flat, dim=1),
            reg_params=torch.cat(reg_flat, dim=1),
            centers=torch.cat(centers),
            strides=torch.cat(strides),
            level_ranges=torch.cat(ranges).to(torch.float32),
            valid=torch.cat(valid, dim=1),
            anchors=torch.cat(anchors_flat) if anchors_flat is not None else None,
            aux_logits=aux, aux_centers=aux_centers, aux_valid=aux_valid)


class DenseHead(nn.Module):
    """Shared classification/regression towers applied to every level."""

    def __init__(self, config: HeadConfig, in_dim: int, levels: int):
        super().__init__()
        self.config = config
        self.levels = levels
        width = config.head_width or in_dim
        self.pre = (nn.Identity() if width == in_dim
                    else nn.Conv1d(in_dim, width, kernel_size=1))
        self.cls_tower = _tower(width, config.head_depth)
        self.reg_tower = _tower(width, config.head_depth)
        slots = config.slots_per_location
        self.cls_out = nn.Conv1d(width, slots * config.num_classes,
                                 kernel_size=3, padding=1)
        self.reg_out = nn.Conv1d(width, slots * 2, kernel_size=3, padding=1)
        # rare-positive prior keeps early classification loss small
        bias = -math.log((1.0 - config.cls_prior) / config.cls_prior)
        nn.init.constant_(self.cls_out.bias, bias)
        if config.with_aux_heads:
            self.aux_out = nn.Conv1d(width, 3, kernel_size=3, padding=1)
            nn.init.constant_(self.aux_out.bias, bias)
        else:
            self.aux_out = None
        if config.regression_ranges is not None \
                and len(config.regression_ranges) != levels:
            raise ValueError(f"got {len(config.regression_ranges)} regression "
                             f"ranges for {levels} pyramid levels")
        self.regression_ranges = (config.regression_ranges
                                  or default_regression_ranges(levels))
        # every action length must land on exactly one level
        ranges = self.regression_ranges
        if ranges[0][0] != 0.0 or not math.isinf(ranges[-1][1]) or any(
                ranges[i][1] != ranges[i + 1][0] for i in range(len(ranges) - 1)):
            raise ValueError("regression ranges must partition (0, inf) "
                             "without gaps or overlap")

    def level_locations(self, length: int, stride: int,
                        device=None) -> torch.Tensor:
        idx = torch.arange(length, dtype=torch.float32, device=device)
        return (idx + 0.5) * stride

    def level_anchors(self, locations: torch.Tensor,
                      stride: int) -> torch.Tensor:
        spans = torch.tensor(self.config.anchor_scales,
                             device=locations.device) * stride
        half = 0.5 * spans.unsqueeze(0)  # (1, A)
        c = locations.unsqueeze(1)       # (T, 1)
        return torch.stack([c - half, c + half], dim=-1)  # (T, A, 2)

    def forward(self, pyramid: FeaturePyramid) -> HeadOutputs:
        if len(pyramid) != self.levels:
            raise ValueError(f"head built for {self.levels} levels, "
                             f"pyramid has {len(pyramid)}")
        cfg = self.config
        slots = cfg.slots_per_location
        cls_list, reg_list, aux_list, loc_list, anchor_list = [], [], [], [], []
        for feats, mask, stride in zip(pyramid.levels, pyramid.masks,
                                       pyramid.strides):
            b, t_l, _ = feats.shape
            h = self.pre(masked_fill_zero(feats, mask).transpose(1, 2))
            ch = self.cls_tower(h)
            cls = self.cls_out(ch).transpose(1, 2)
            reg = self.reg_out(self.reg_tower(h)).transpose(1, 2)
            cls_list.append(masked_fill_zero(cls, mask)
                            .reshape(b, t_l, slots, cfg.num_classes))
            reg_list.append(masked_fill_zero(reg, mask).reshape(b, t_l, slots, 2))
            if self.aux_out is not None:
                aux = self.aux_out(ch).transpose(1, 2)
                aux_list.append(masked_fill_zero(aux, mask))
            locs = self.level_locations(t_l, stride, device=feats.device)
            loc_list.append(locs)
            if cfg.parameterization == "anchor":
                anchor_list.append(self.level_anchors(locs, stride))
        return HeadOutputs(
            cls_logits=cls_list, reg_params=reg_list,
            aux_logits=aux_list if self.aux_out is not None else None,
            locations=loc_list,
            anchors=anchor_list if cfg.parameterization == "anchor" else None,
            strides=pyramid.strides, masks=pyramid.masks,
            regression_ranges=self.regression_ranges)


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

def _pairwise_tiou(boxes: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
    inter = (torch.minimum(boxes[:, None, 1], segments[None, :, 1])
             - torch.maximum(boxes[:, None, 0], segments[None, :, 0])).clamp(min=0)
    union = ((boxes[:, 1] - boxes[:, 0])[:, None]
             + (segments[:, 1] - segments[:, 0])[None, :] - inter)
    return inter / union.clamp(min=1e-8)


def _pick_shortest(candidate: torch.Tensor, lengths: torch.Tensor):
    """Among (N, M) candidate flags choose the shortest segment per row."""
    masked_len = torch.where(candidate, lengths.unsqueeze(0).expand_as(candidate),
                             torch.full_like(candidate, math.inf,
                                             dtype=lengths.dtype))
    best_len, best_idx = masked_len.min(dim=1)
    return torch.isfinite(best_len), best_idx


def assign_targets(flat: FlatOutputs, segments: torch.Tensor,
                   labels: torch.Tensor, config: HeadConfig,
                   batch_index: int):
    """Targets for one sample: (cls_target (N,), reg_target (N, 2), pos (N,)).

    ``segments`` is (M, 2) in row units and ``labels`` (M,) model-class ids.
    ``cls_target`` holds -1 for background. ``reg_target`` is encoded in the
    head's parameterization and is only meaningful where ``pos`` is True.
    """
    n = flat.centers.shape[0]
    device = flat.centers.device
    cls_target = torch.full((n,), -1, dtype=torch.int64, device=device)
    reg_target = torch.zeros(n, 2, dtype=torch.float32, device=device)
    pos = torch.zeros(n, dtype=torch.bool, device=device)
    if segments.shape[0] == 0:
        return cls_target, reg_target, pos

    segments = segments.to(torch.float32)
    lengths = segments[:, 1] - segments[:, 0]
    centers = flat.centers
    gt_centers = 0.5 * (segments[:, 0] + segments[:, 1])

    if config.assignment == "simota":
        raise NotImplementedError(
            "simota assignment is a registered extension point and is not "
            "implemented; use center_radius, max_iou, or inside_gt")

    if config.assignment == "center_radius":
        near = (centers.unsqueeze(1) - gt_centers.unsqueeze(0)).abs() \
            <= config.center_radius * flat.strides.unsqueeze(1)
        inside = (centers.unsqueeze(1) >= segments[None, :, 0]) \
            & (centers.unsqueeze(1) <= segments[None, :, 1])
        in_range = (lengths.unsqueeze(0) >= flat.level_ranges[:, :1]) \
            & (lengths.unsqueeze(0) < flat.level_ranges[:, 1:])
        matched, best = _pick_shortest(near & inside & in_range, lengths)
    elif config.assignment == "inside_gt":
        inside = (centers.unsqueeze(1) >= segments[None, :, 0]) \
            & (centers.unsqueeze(1) <= segments[None, :, 1])
        in_range = (lengths.unsqueeze(0) >= flat.level_ranges[:, :1]) \
            & (lengths.unsqueeze(0) < flat.level_ranges[:, 1:])
        matched, best = _pick_shortest(inside & in_range, lengths)
    else:  # max_iou
        if flat.anchors is not None:
            boxes = flat.anchors
        else:
            # point slots fall back to a fixed-span pseudo box per stride
            half = 2.0 * flat.strides
            boxes = torch.stack([centers - half, centers + half], dim=-1)
        overlap = _pairwise_tiou(boxes, segments)
        best_iou, best = overlap.max(dim=1)
        matched = best_iou >= config.iou_pos_threshold

    matched = matched & flat.valid[batch_index]
    idx = best[matched]
    cls_target[matched] = labels[idx]
    gt = segments[idx]
    if flat.anchors is None:
        reg_target[matched] = encode_point(gt, centers[matched],
                                           flat.strides[matched])
    else:
        reg_target[matched] = encode_anchor(gt, flat.anchors[matched])
    pos = matched
    return cls_target, reg_target, pos


def aux_targets(centers: torch.Tensor, segments: torch.Tensor,
                boundary_width_ratio: float = 0.1) -> torch.Tensor:
    """(M, 3) actionness / startness / endness targets for location centers.

    A center is a start (end) point when it lies within half a boundary
    window of a segment's start (end); the window is a tenth of the segment
    length, floored at one row.
    """
    out = torch.zeros(centers.shape[0], 3, dtype=torch.float32,
                      device=centers.device)
    if segments.shape[0] == 0:
        return out
    segments = segments.to(torch.float32)
    c = centers.unsqueeze(1)
    inside = (c >= segments[None, :, 0]) & (c <= segments[None, :, 1])
    width = (boundary_width_ratio
             * (segments[:, 1] - segments[:, 0])).clamp(min=1.0)
    near_start = (c - segments[None, :, 0]).abs() <= 0.5 * width.unsqueeze(0)
    near_end = (c - segments[None, :, 1]).abs() <= 0.5 * width.unsqueeze(0)
    out[:, 0] = inside.any(dim=1).float()
    out[:, 1] = near_start.any(dim=1).float()
    out[:, 2] = near_end.any(dim=1).float()
    return out


# ---------------------------------------------------------------------------
# proposal decode
# ---------------------------------------------------------------------------

def classification_probs(logits: torch.Tensor, cls_loss: str) -> torch.Tensor:
    """Logits to per-class probabilities, matching the training loss."""
    if cls_loss == "cross_entropy":
        zeros = logits.new_zeros(*logits.shape[:-1], 1)
        return torch.softmax(torch.cat([zeros, logits], dim=-1), dim=-1)[..., 1:]
    return torch.sigmoid(logits)


def decode_proposals(flat: FlatOutputs, video_ids: list[str],
                     valid_rows: torch.Tensor, cls_loss: str = "focal",
                     score_threshold: float = 0.01,
                     pre_nms_topk: int = 2000) -> list[ProposalSet]:
    """Per-video proposals from flattened head outputs, in row units."""
    probs = classification_probs(flat.cls_logits, cls_loss)
    boxes = flat.decode(flat.reg_params)  # (B, N, 2)
    results = []
    for b, video_id in enumerate(video_ids):
        p = probs[b].clone()
        p[~flat.valid[b]] = 0.0
        scores_flat = p.reshape(-1)
        keep = scores_flat > score_threshold
        if keep.sum() > pre_nms_topk:
            top = torch.topk(scores_flat, pre_nms_topk).indices
            keep = torch.zeros_like(keep)
            keep[top] = True
            keep &= scores_flat > score_threshold
        idx = keep.nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            results.append(ProposalSet.empty(video_id, unit=UNIT_FEATURES))
            continue
        num_classes = probs.shape[-1]
        slot = torch.div(idx, num_classes, rounding_mode="floor")
        cls = idx % num_classes
        seg = boxes[b, slot].clamp(min=0.0, max=float(valid_rows[b].item()))
        results.append(ProposalSet(
            video_id=video_id,
            segments=seg.detach().cpu().numpy().astype(np.float64),
            scores=scores_flat[idx].detach().cpu().numpy().astype(np.float64),
            labels=cls.detach().cpu().numpy().astype(np.int64),
            unit=UNIT_FEATURES, source="stage1"))
    return results
