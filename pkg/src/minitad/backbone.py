"""Stage 0: turning per-frame inputs into feature sequences.

Three modes. ``snippet`` encodes fixed windows of frames independently, so
output row i is a function of frames [i*stride, i*stride + snippet_length)
and nothing else; T' = floor((T - snippet_length) / stride) + 1. ``frame``
runs temporal convolutions over the whole frame sequence before pooling, so
every output row may depend on frames beyond its own pooling cell;
T' = ceil(T / pool_factor). ``precomputed`` skips encoding and reads rows
from a feature store.

Frames are (T, F) float arrays; at desk scale a "frame" is any per-timestep
measurement vector. Timing metadata is attached at encode time: the snippet
path emits one row per ``snippet_stride`` frames, the frame path one row per
``temporal_pool_factor`` frames.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from minitad.core import FeatureSequence
from minitad.data.store import FeatureStore

BACKBONE_MODES = ("snippet", "frame", "precomputed")


@dataclasses.dataclass(slots=True)
class BackboneConfig:
    mode: str = "precomputed"
    frame_dim: int = 64
    output_dim: int = 64
    snippet_length: int = 16
    snippet_stride: int | None = None  # defaults to snippet_length // 2
    temporal_pool_factor: int = 4

    def __post_init__(self) -> None:
        if self.mode not in BACKBONE_MODES:
            raise ValueError(f"mode must be one of {BACKBONE_MODES}, got {self.mode!r}")
        if self.snippet_stride is None:
            self.snippet_stride = max(1, self.snippet_length // 2)
        if min(self.frame_dim, self.output_dim, self.snippet_length,
               self.snippet_stride, self.temporal_pool_factor) < 1:
            raise ValueError("backbone dimensions and strides must be positive")


def snippet_output_length(num_frames: int, snippet_length: int, stride: int) -> int:
    if num_frames < snippet_length:
        raise ValueError(
            f"need at least snippet_length={snippet_length} frames, got {num_frames}"
        )
    return (num_frames - snippet_length) // stride + 1


class SnippetEncoder(nn.Module):
    """Shared two-layer encoder applied to each snippet in isolation.

    Per-frame projection, mean pool over the snippet, output projection. The
    receptive field of an output row is exactly its snippet, by construction.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.pre = nn.Linear(config.frame_dim, config.output_dim)
        self.post = nn.Linear(config.output_dim, config.output_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, F) frames -> (B, T', D) snippet features."""
        cfg = self.config
        snippet_output_length(frames.shape[1], cfg.snippet_length, cfg.snippet_stride)
        # unfold appends the window axis: (B, T', F, L) -> (B, T', L, F)
        windows = frames.unfold(1, cfg.snippet_length, cfg.snippet_stride)
        windows = windows.permute(0, 1, 3, 2)
        h = torch.nn.functional.gelu(self.pre(windows))
        return self.post(h.mean(dim=2))

    @torch.no_grad()
    def encode(self, frames: np.ndarray, frame_rate: float) -> FeatureSequence:
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
        out = self.forward(x.unsqueeze(0)).squeeze(0).numpy()
        return FeatureSequence(out, feature_stride=float(self.config.snippet_stride),
                               frame_rate=frame_rate)


class FrameEncoder(nn.Module):
    """Two temporal convolutions over the full sequence, then average pooling.

    Receptive field crosses pooling-cell boundaries (kernel 3, two layers), so
    unlike the snippet path, encoding a video in pieces does not commute with
    encoding it whole.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.output_dim
        self.conv1 = nn.Conv1d(config.frame_dim, d, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(d, d, kernel_size=3, padding=1)
        self.pool = nn.AvgPool1d(config.temporal_pool_factor,
                                 ceil_mode=True, count_include_pad=False)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, F) frames -> (B, ceil(T / pool_factor), D)."""
        h = frames.transpose(1, 2)
        h = torch.nn.functional.gelu(self.conv1(h))
        h = self.conv2(h)
        return self.pool(h).transpose(1, 2)

    @torch.no_grad()
    def encode(self, frames: np.ndarray, frame_rate: float) -> FeatureSequence:
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
        out = self.forward(x.unsqueeze(0)).squeeze(0).numpy()
        return FeatureSequence(out,
                               feature_stride=float(self.config.temporal_pool_factor),
                               frame_rate=frame_rate)


def build_backbone(config: BackboneConfig) -> nn.Module | None:
    """Encoder module for the configured mode; None means precomputed features."""
    if config.mode == "snippet":
        return SnippetEncoder(config)
    if config.mode == "frame":
        return FrameEncoder(config)
    return None


def load_precomputed(video_id: str, store: FeatureStore,
                     expected_dim: int | None = None) -> FeatureSequence:
    """Fetch stored features, enforcing the caller's dimension expectation."""
    return store.read(video_id, expected_dim=expected_dim)
