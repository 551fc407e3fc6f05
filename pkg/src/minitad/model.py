"""Assembly of the detection pipeline: optional trainable backbone, neck,
dense head, optional second stage, plus the loss computation and the
training-free predict path that hands row-unit proposals to post-processing.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from minitad.backbone import build_backbone
from minitad.config import ExperimentConfig
from minitad.core import ProposalSet
from minitad.heads import (
    DenseHead,
    assign_targets,
    aux_targets,
    decode_proposals,
)
from minitad.losses import (
    CLS_LOSSES,
    REG_LOSS_SPACE,
    REG_LOSSES,
    focal_loss,
    weighted_bce_loss,
)
from minitad.neck import FeaturePyramid, Neck
from minitad.stage2 import (
    Stage2Refiner,
    apply_deltas,
    assign_stage2_targets,
    encode_stage2_deltas,
    select_for_stage2,
)


def frames_to_rows(segments: torch.Tensor, config) -> torch.Tensor:
    """Convert frame-unit segments to backbone-output row units."""
    if config.mode == "snippet":
        offset = config.snippet_length / 2.0
        return ((segments - offset) / config.snippet_stride).clamp(min=0.0)
    if config.mode == "frame":
        return segments / config.temporal_pool_factor
    return segments


class TadModel(nn.Module):
    """features (B, T, D) + mask -> pyramid -> dense predictions, with the
    optional cascade refinement stage behind a config flag."""

    def __init__(self, config: ExperimentConfig, num_classes: int,
                 feature_dim: int):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone)
        in_dim = (config.backbone.output_dim if self.backbone is not None
                  else feature_dim)
        self.neck = Neck(config.neck, in_dim)
        self.head_config = dataclasses.replace(config.heads,
                                               num_classes=num_classes)
        self.head = DenseHead(self.head_config, config.neck.width,
                              levels=config.neck.levels)
        self.stage2 = None
        if config.stage2 is not None:
            self.stage2 = Stage2Refiner(config.stage2, config.neck.width,
                                        num_classes,
                                        graph_k=config.neck.graph_k)

    def encode(self, features: torch.Tensor,
               mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the trainable backbone, if any, and rebuild the row mask from
        each sample's true length."""
        if self.backbone is None:
            return features, mask
        encoded = self.backbone(features)
        cfg = self.config.backbone
        lengths = mask.sum(dim=1)
        if cfg.mode == "snippet":
            out_len = torch.div(lengths - cfg.snippet_length,
                                cfg.snippet_stride,
                                rounding_mode="floor") + 1
        else:
            out_len = (lengths + cfg.temporal_pool_factor - 1) \
                // cfg.temporal_pool_factor
        idx = torch.arange(encoded.shape[1], device=encoded.device)
        new_mask = idx.unsqueeze(0) < out_len.unsqueeze(1)
        return encoded * new_mask.unsqueeze(-1), new_mask

    def forward(self, features: torch.Tensor, mask: torch.Tensor):
        rows, row_mask = self.encode(features, mask)
        pyramid = self.neck(rows, row_mask)
        return pyramid, self.head(pyramid)

    # -- training ----------------------------------------------------------

    def _cls_loss(self, logits: torch.Tensor,
                  targets: torch.Tensor) -> torch.Tensor:
        loss_cfg = self.config.losses
        if loss_cfg.cls_loss == "focal":
            return focal_loss(logits, targets, gamma=loss_cfg.focal_gamma,
                              alpha=loss_cfg.focal_alpha)
        return CLS_LOSSES[loss_cfg.cls_loss](logits, targets)

    def training_losses(self, features, mask, segments, labels,
                        video_ids, valid_rows) -> dict[str, torch.Tensor]:
        """Weighted loss terms for one batch.

        ``segments`` and ``labels`` are per-sample tensors in row units;
        ``valid_rows`` is the per-sample valid row count of the neck input.
        """
        loss_cfg = self.config.losses
        pyramid, outputs = self.forward(features, mask)
        flat = outputs.flatten()
        b = features.shape[0]

        cls_t, reg_t, pos = [], [], []
        aux_t = []
        for i in range(b):
            ct, rt, p = assign_targets(flat, segments[i], labels[i],
                                       self.head_config, i)
            cls_t.append(ct)
            reg_t.append(rt)
            pos.append(p)
            if flat.aux_logits is not None:
                aux_t.append(aux_targets(
                    flat.aux_centers, segments[i],
                    self.head_config.boundary_width_ratio))
        cls_t = torch.stack(cls_t)
        reg_t = torch.stack(reg_t)
        pos = torch.stack(pos)

        valid = flat.valid
        losses = {"cls": self._cls_loss(flat.cls_logits[valid], cls_t[valid])}

        if REG_LOSS_SPACE[loss_cfg.reg_loss] == "interval":
            pred = flat.decode(flat.reg_params)[pos]
            target = flat.decode(reg_t)[pos]
        else:
            pred = flat.reg_params[pos]
            target = reg_t[pos]
        losses["reg"] = REG_LOSSES[loss_cfg.reg_loss](pred, target)

        if aux_t and loss_cfg.aux_weight > 0:
            aux_t = torch.stack(aux_t)
            av = flat.aux_valid
            losses["aux"] = weighted_bce_loss(
                flat.aux_logits[av].reshape(-1), aux_t[av].reshape(-1))

        if self.stage2 is not None:
            s2 = self._stage2_losses(pyramid, flat, segments, labels,
                                     video_ids, valid_rows)
            losses.update(s2)

        total = (loss_cfg.cls_weight * losses["cls"]
                 + loss_cfg.reg_weight * losses["reg"])
        if "aux" in losses:
            total = total + loss_cfg.aux_weight * losses["aux"]
        if "stage2_cls" in losses:
            total = (total + loss_cfg.cls_weight * losses["stage2_cls"]
                     + loss_cfg.reg_weight * losses["stage2_reg"])
        losses["total"] = total
        return losses

    def _stage2_losses(self, pyramid: FeaturePyramid, flat, segments, labels,
                       video_ids, valid_rows) -> dict[str, torch.Tensor]:
        cfg = self.config.stage2
        loss_cfg = self.config.losses
        train_cfg = self.config.train
        with torch.no_grad():
            proposals = decode_proposals(
                flat, video_ids, valid_rows, loss_cfg.cls_loss,
                score_threshold=train_cfg.score_threshold,
                pre_nms_topk=train_cfg.pre_nms_topk)
        cls_terms, reg_terms = [], []
        for i, pset in enumerate(proposals):
            pset = select_for_stage2(pset, cfg, training=True)
            if len(pset) == 0:
                continue
            boxes_in = torch.from_numpy(pset.segments).float()
            scores = torch.from_numpy(pset.scores).float()
            lab = torch.from_numpy(pset.labels).long()
            out = self.stage2(pyramid, i, boxes_in, scores, lab,
                              loss_cfg.cls_loss)
            vl = float(valid_rows[i].item())
            for k, stage_out in enumerate(out.stage_outputs):
                inp = out.stage_inputs[k]
                ct, gt_boxes, p = assign_stage2_targets(
                    inp, segments[i].float(), labels[i], cfg.iou_positive)
                cls_terms.append(self._cls_loss(stage_out.class_logits, ct))
                if REG_LOSS_SPACE[loss_cfg.reg_loss] == "interval":
                    pred = apply_deltas(inp, stage_out.boundary_deltas, vl)
                    reg_terms.append(REG_LOSSES[loss_cfg.reg_loss](
                        pred[p], gt_boxes[p]))
                else:
                    target = encode_stage2_deltas(inp[p], gt_boxes[p])
                    reg_terms.append(REG_LOSSES[loss_cfg.reg_loss](
                        stage_out.boundary_deltas[p], target))
        if not cls_terms:
            zero = flat.cls_logits.sum() * 0.0
            return {"stage2_cls": zero, "stage2_reg": zero}
        return {"stage2_cls": torch.stack(cls_terms).mean(),
                "stage2_reg": torch.stack(reg_terms).mean()}

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def predict(self, features, mask, video_ids,
                valid_rows) -> list[ProposalSet]:
        """Row-unit proposals per video; the second stage, when configured,
        replaces each set with its refined and rescored version."""
        train_cfg = self.config.train
        loss_cfg = self.config.losses
        pyramid, outputs = self.forward(features, mask)
        flat = outputs.flatten()
        proposals = decode_proposals(
            flat, video_ids, valid_rows, loss_cfg.cls_loss,
            score_threshold=train_cfg.score_threshold,
            pre_nms_topk=train_cfg.pre_nms_topk)
        if self.stage2 is None:
            return proposals
        refined = []
        for i, pset in enumerate(proposals):
            pset = select_for_stage2(pset, self.config.stage2, training=False)
            if len(pset) == 0:
                refined.append(pset)
                continue
            out = self.stage2(pyramid, i,
                              torch.from_numpy(pset.segments).float(),
                              torch.from_numpy(pset.scores).float(),
                              torch.from_numpy(pset.labels).long(),
                              loss_cfg.cls_loss)
            vl = float(valid_rows[i].item())
            seg = out.refined.cpu().numpy().astype(np.float64)
            refined.append(ProposalSet(
                pset.video_id, np.clip(seg, 0.0, vl),
                out.fused_scores.cpu().numpy().astype(np.float64),
                pset.labels, unit=pset.unit, source="stage2"))
        return refined


def build_model(config: ExperimentConfig, num_classes: int,
                feature_dim: int) -> TadModel:
    return TadModel(config, num_classes, feature_dim)
