"""Single-run training: deterministic seeding, plain Python batching, AdamW
with linear warmup into a cosine schedule, best-epoch checkpointing on
validation mAP, and a RunResult JSON per (config, seed)."""

from __future__ import annotations

import dataclasses
import json
import random
import time
from pathlib import Path

import numpy as np
import torch

from minitad.config import ExperimentConfig, config_hash
from minitad.core import (
    UNIT_SECONDS,
    FeatureSequence,
    LabelSpace,
    ProposalSet,
    VideoRecord,
)
from minitad.data.annotations import AnnotationDatabase, load_annotations
from minitad.data.dataset import DetectionDataset
from minitad.data.store import FeatureStore
from minitad.data.synthetic import generate_synthetic
from minitad.evaluation import EvalResult, mean_average_precision
from minitad.model import TadModel, build_model, frames_to_rows
from minitad.postproc import aggregate_windows, apply_postprocess
from minitad.data.mapping import slice_window


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the last finite-or-not loss components
    so the failing term is visible in the message."""

    def __init__(self, epoch: int, step: int, components: dict[str, float]):
        self.epoch = epoch
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch} step {step}: "
                         f"{detail}")


@dataclasses.dataclass(slots=True)
class RunResult:
    config_hash: str
    seed: int
    map_per_threshold: list[float]
    average_map: float
    wall_time_s: float
    checkpoint: str
    best_epoch: int
    train_loss_per_epoch: list[float]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def save_run_result(path: str | Path, result: RunResult) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(result.as_dict(), fh, indent=2)


def load_run_result(path: str | Path) -> RunResult:
    with open(path) as fh:
        return RunResult(**json.load(fh))


def set_global_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclasses.dataclass(slots=True)
class RunData:
    database: AnnotationDatabase
    features: object  # FeatureStore or dict[str, FeatureSequence]
    train_set: DetectionDataset
    feature_dim: int
    label_space: LabelSpace


def build_run_data(config: ExperimentConfig, seed: int) -> RunData:
    ds = config.dataset
    if ds.synthetic is not None:
        synth = generate_synthetic(ds.synthetic)
        database, features = synth.database, synth.features
    else:
        database = load_annotations(ds.annotations)
        features = FeatureStore.open(ds.features)
    space = database.label_space
    if ds.binary_labels and not space.binary:
        space = LabelSpace(space.class_names, binary=True)
        database = AnnotationDatabase(space, database.videos,
                                      database.num_dropped)
    train_set = DetectionDataset(database, features, ds.mapping,
                                 ds.train_subset, training=True, seed=seed)
    if isinstance(features, FeatureStore):
        probe = features.read(features.video_ids[0])
    else:
        probe = next(iter(features.values()))
    return RunData(database, features, train_set, probe.feature_dim, space)


def _model_labels(labels: np.ndarray, space: LabelSpace) -> np.ndarray:
    if space.binary:
        return np.ones_like(labels)
    return labels


def collate(samples: list[dict], space: LabelSpace) -> dict:
    """Pad to the longest sample; segments and labels stay per-sample."""
    max_t = max(s["features"].shape[0] for s in samples)
    b = len(samples)
    dim = samples[0]["features"].shape[1]
    feats = torch.zeros(b, max_t, dim)
    mask = torch.zeros(b, max_t, dtype=torch.bool)
    segments, labels, valid = [], [], []
    for i, s in enumerate(samples):
        t = s["features"].shape[0]
        feats[i, :t] = torch.from_numpy(s["features"])
        m = s["mask"]
        mask[i, :t] = torch.from_numpy(np.asarray(m, dtype=bool)) \
            if m is not None else True
        segments.append(torch.from_numpy(s["segments"]).float())
        labels.append(torch.from_numpy(
            _model_labels(s["labels"], space)).long())
        valid.append(int(mask[i].sum()))
    return {
        "features": feats,
        "mask": mask,
        "segments": segments,
        "labels": labels,
        "video_ids": [s["video_id"] for s in samples],
        "valid_rows": torch.tensor(valid, dtype=torch.int64),
    }


def batch_indices(n: int, batch_size: int,
                  rng: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def drop_channels(features: torch.Tensor, probability: float,
                  generator: torch.Generator) -> torch.Tensor:
    """Zero whole feature channels per sample with the given probability."""
    if probability <= 0:
        return features
    keep = (torch.rand(features.shape[0], 1, features.shape[2],
                       generator=generator) >= probability)
    return features * keep.to(features.dtype)


# ---------------------------------------------------------------------------
# inference over a subset
# ---------------------------------------------------------------------------

def _rows_to_seconds(pset: ProposalSet, config: ExperimentConfig,
                     seq: FeatureSequence) -> ProposalSet:
    mode = config.backbone.mode
    if mode == "precomputed":
        return pset.to_seconds(seq.feature_stride, seq.frame_rate)
    if mode == "snippet":
        scale = config.backbone.snippet_stride * seq.seconds_per_row
        offset = 0.5 * config.backbone.snippet_length * seq.seconds_per_row
    else:
        scale = config.backbone.temporal_pool_factor * seq.seconds_per_row
        offset = 0.0
    return ProposalSet(pset.video_id, pset.segments * scale + offset,
                       pset.scores, pset.labels, unit=UNIT_SECONDS,
                       source=pset.source)


def _load_sequence(features, video_id: str) -> FeatureSequence:
    if isinstance(features, FeatureStore):
        return features.read(video_id)
    return features[video_id]


def predict_video(model: TadModel, record: VideoRecord, data: RunData,
                  config: ExperimentConfig,
                  eval_set: DetectionDataset) -> ProposalSet:
    """Final seconds-unit detections for one video, post-processing applied.

    Sliding-window datasets run the model per window and merge the windows
    back into whole-video coordinates first; anything else runs the full
    sequence in one pass.
    """
    seq = _load_sequence(data.features, record.video_id)
    windows = eval_set.eval_windows(record)
    if windows:
        if config.backbone.mode != "precomputed":
            raise ValueError("sliding-window evaluation expects precomputed "
                             "features; row offsets do not survive a "
                             "trainable backbone's stride change")
        window_sets = []
        for win in windows:
            piece = slice_window(seq, win)
            batch = collate([{
                "video_id": record.video_id, "features": piece.values,
                "mask": piece.mask, "segments": np.zeros((0, 2)),
                "labels": np.zeros(0, dtype=np.int64),
            }], data.label_space)
            pset = model.predict(batch["features"], batch["mask"],
                                 batch["video_ids"], batch["valid_rows"])[0]
            pset.window_offset = float(win.start)
            window_sets.append(pset)
        merged = aggregate_windows(window_sets, seq.feature_stride,
                                   seq.frame_rate)
    else:
        batch = collate([{
            "video_id": record.video_id, "features": seq.values,
            "mask": seq.mask, "segments": np.zeros((0, 2)),
            "labels": np.zeros(0, dtype=np.int64),
        }], data.label_space)
        pset = model.predict(batch["features"], batch["mask"],
                             batch["video_ids"], batch["valid_rows"])[0]
        merged = _rows_to_seconds(pset, config, seq)
    return apply_postprocess(merged, config.postprocess)


def evaluate_model(model: TadModel, data: RunData, config: ExperimentConfig,
                   subset: str) -> tuple[EvalResult, list[ProposalSet]]:
    model.eval()
    eval_set = DetectionDataset(data.database, data.features,
                                config.dataset.mapping, subset,
                                training=False)
    detections = [predict_video(model, rec, data, config, eval_set)
                  for rec in data.database.subset(subset)]
    result = mean_average_precision(detections, data.database, config.eval,
                                    subset=subset)
    return result, detections


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _build_scheduler(optimizer, warmup: int, epochs: int):
    if warmup > 0:
        linear = torch.optim.lr_scheduler.LinearLR(
            optimizer, start_factor=1.0 / (warmup + 1), total_iters=warmup)
        cosine = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=max(1, epochs - warmup))
        return torch.optim.lr_scheduler.SequentialLR(
            optimizer, [linear, cosine], milestones=[warmup])
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer,
                                                      T_max=max(1, epochs))


def train_run(config: ExperimentConfig, seed: int, out_dir: str | Path,
              log=None) -> RunResult:
    """One deterministic run; returns the best-epoch metrics and writes
    ``<hash>_s<seed>.json`` plus the matching checkpoint under ``out_dir``."""
    started = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    tag = f"{chash}_s{seed}"

    set_global_seed(seed)
    data = build_run_data(config, seed)
    model = build_model(config, data.label_space.num_model_classes,
                        data.feature_dim)
    if model.backbone is not None:
        # trainable backbones consume frame rows; targets move with them
        for _ in ():
            pass

    tcfg = config.train
    epochs, warmup = tcfg.effective_epochs, tcfg.effective_warmup
    optimizer = torch.optim.AdamW(model.parameters(), lr=tcfg.learning_rate,
                                  weight_decay=tcfg.weight_decay)
    scheduler = _build_scheduler(optimizer, warmup, epochs)
    batch_rng = np.random.default_rng(seed * 100_003 + 17)
    drop_gen = torch.Generator().manual_seed(seed * 7 + 3)

    checkpoint_path = out_dir / "checkpoints" / f"{tag}.pt"
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    best_map, best_epoch, best_result = -1.0, -1, None
    train_losses: list[float] = []

    for epoch in range(epochs):
        model.train()
        data.train_set.set_epoch(epoch)
        epoch_losses = []
        for step, idx in enumerate(batch_indices(len(data.train_set),
                                                 tcfg.batch_size, batch_rng)):
            batch = collate([data.train_set[int(i)] for i in idx],
                            data.label_space)
            feats = drop_channels(batch["features"], tcfg.channel_dropout,
                                  drop_gen)
            if model.backbone is not None:
                segments = [frames_to_rows(s, config.backbone)
                            for s in batch["segments"]]
            else:
                segments = batch["segments"]
            losses = model.training_losses(feats, batch["mask"], segments,
                                           batch["labels"],
                                           batch["video_ids"],
                                           batch["valid_rows"])
            total = losses["total"]
            if not torch.isfinite(total):
                raise TrainingDivergedError(epoch, step, {
                    k: float(v.detach()) for k, v in losses.items()})
            optimizer.zero_grad()
            total.backward()
            if tcfg.gradient_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(),
                                               tcfg.gradient_clip)
            optimizer.step()
            epoch_losses.append(float(total.detach()))
        scheduler.step()
        train_losses.append(float(np.mean(epoch_losses)))

        last = epoch == epochs - 1
        if (epoch + 1) % tcfg.eval_interval == 0 or last:
            result, _ = evaluate_model(model, data, config,
                                       config.dataset.val_subset)
            if result.average_map > best_map:
                best_map = result.average_map
                best_epoch = epoch
                best_result = result
                torch.save({"model": model.state_dict(),
                            "epoch": epoch,
                            "config_hash": chash}, checkpoint_path)
            if log:
                log(f"epoch {epoch + 1}/{epochs} "
                    f"loss {train_losses[-1]:.4f} "
                    f"val mAP {result.average_map:.4f}")

    run = RunResult(
        config_hash=chash,
        seed=seed,
        map_per_threshold=[float(v) for v in best_result.map_per_threshold],
        average_map=float(best_result.average_map),
        wall_time_s=time.perf_counter() - started,
        checkpoint=str(checkpoint_path),
        best_epoch=best_epoch,
        train_loss_per_epoch=train_losses,
    )
    save_run_result(out_dir / f"{tag}.json", run)
    return run


def load_checkpoint(model: TadModel, path: str | Path) -> int:
    """Restore weights saved by train_run; returns the stored epoch."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(payload["model"])
    return int(payload.get("epoch", -1))
