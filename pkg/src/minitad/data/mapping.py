"""Mapping variable-length feature sequences onto fixed model input lengths.

Three modes, all operating in feature-row units:

* ``rescale``: linear interpolation to a fixed length (whole-video datasets).
  Annotations scale proportionally; timing metadata is adjusted so the
  sequence still spans the same wall-clock extent.
* ``random_crop``: one fixed-length window at a random offset per draw
  (untrimmed datasets at training time). Videos shorter than the window are
  zero-padded on the right with the padding masked out.
* ``sliding_window``: a deterministic cover of overlapping windows
  (untrimmed datasets at test time). The last window is right-aligned so
  coverage is exact; a video shorter than the window yields a single padded
  window at offset 0.

``remap_annotations`` carries ground truth into a window: segments are
intersected with the window's valid extent, shifted to window-local
coordinates, and kept only when at least ``keep_threshold`` of the original
length survives.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from minitad.core import FeatureSequence

VALID_MODES = ("none", "rescale", "random_crop", "sliding_window")


@dataclasses.dataclass(frozen=True, slots=True)
class WindowSpec:
    """One window into a feature sequence, in feature-row units.

    ``length`` is the window's nominal size (the model input length);
    ``valid`` counts the rows actually backed by content (< length means the
    tail is zero padding).
    """

    video_id: str
    offset: int
    length: int
    valid: int

    def __post_init__(self) -> None:
        if self.offset < 0 or self.length <= 0 or not (0 < self.valid <= self.length):
            raise ValueError(
                f"bad window offset={self.offset} length={self.length} valid={self.valid}"
            )


@dataclasses.dataclass(slots=True)
class TemporalMappingConfig:
    """How raw sequences become model inputs.

    ``window_overlap_ratio`` applies to training-time sliding windows,
    ``eval_overlap_ratio`` to test-time ones; they are deliberately separate
    knobs since test time usually wants denser coverage.
    """

    mode: str = "none"
    target_length: int = 128
    window_overlap_ratio: float = 0.5
    eval_overlap_ratio: float = 0.5
    keep_threshold: float = 0.75

    def __post_init__(self) -> None:
        if self.mode not in VALID_MODES:
            raise ValueError(f"mode must be one of {VALID_MODES}, got {self.mode!r}")
        if self.target_length <= 0:
            raise ValueError("target_length must be positive")
        for name in ("window_overlap_ratio", "eval_overlap_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not 0.0 < self.keep_threshold <= 1.0:
            raise ValueError("keep_threshold must lie in (0, 1]")


def rescale(features: FeatureSequence, target_length: int) -> FeatureSequence:
    """Linearly resample a fully-valid sequence to ``target_length`` rows.

    Sampling is center-aligned: output row i reads source coordinate
    (i + 0.5) * T/L - 0.5, clamped at the ends. ``feature_stride`` is scaled
    by T/L so the resampled sequence spans the same number of seconds.
    """
    if not features.mask.all():
        raise ValueError("rescale expects a fully-valid sequence, got masked rows")
    src = features.values.astype(np.float64)
    t_src = src.shape[0]
    pos = (np.arange(target_length) + 0.5) * (t_src / target_length) - 0.5
    pos = np.clip(pos, 0.0, t_src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, t_src - 1)
    w = (pos - i0)[:, None]
    out = (1.0 - w) * src[i0] + w * src[i1]
    return FeatureSequence(
        out.astype(np.float32),
        feature_stride=features.feature_stride * (t_src / target_length),
        frame_rate=features.frame_rate,
    )


def rescale_segments(segments: np.ndarray, src_length: int,
                     dst_length: int) -> np.ndarray:
    """Proportionally rescale (N, 2) row-unit segments from src to dst length."""
    segments = np.asarray(segments, dtype=np.float64)
    return segments * (dst_length / src_length)


def _pad_to(values: np.ndarray, length: int) -> tuple[np.ndarray, np.ndarray]:
    t = values.shape[0]
    mask = np.zeros(length, dtype=bool)
    mask[:t] = True
    if t == length:
        return values.copy(), mask
    out = np.zeros((length, values.shape[1]), dtype=values.dtype)
    out[:t] = values
    return out, mask


def slice_window(features: FeatureSequence, window: WindowSpec) -> FeatureSequence:
    """Extract a window; rows beyond the source are zero-padded and masked."""
    take = features.values[window.offset:window.offset + window.valid]
    if take.shape[0] != window.valid:
        raise ValueError(
            f"{window.video_id}: window [{window.offset}, "
            f"{window.offset + window.valid}) exceeds {features.num_rows} rows"
        )
    values, mask = _pad_to(take, window.length)
    return FeatureSequence(values, feature_stride=features.feature_stride,
                           frame_rate=features.frame_rate, mask=mask)


def random_crop(features: FeatureSequence, target_length: int,
                rng: np.random.Generator) -> tuple[FeatureSequence, WindowSpec]:
    """One window of ``target_length`` rows at a uniform random offset.

    A sequence shorter than the target yields the whole sequence padded to
    length, with the padding masked.
    """
    t = features.num_rows
    if t <= target_length:
        window = WindowSpec("", 0, target_length, valid=t)
    else:
        offset = int(rng.integers(0, t - target_length + 1))
        window = WindowSpec("", offset, target_length, valid=target_length)
    return slice_window(features, window), window


def sliding_windows(video_id: str, num_rows: int, window_length: int,
                    overlap_ratio: float) -> list[WindowSpec]:
    """Deterministic overlapping cover of [0, num_rows) by fixed windows.

    Stride is round(window_length * (1 - overlap_ratio)); the final window is
    right-aligned so the cover is exact rather than overshooting.
    """
    if num_rows <= 0 or window_length <= 0:
        raise ValueError("num_rows and window_length must be positive")
    if num_rows <= window_length:
        return [WindowSpec(video_id, 0, window_length, valid=num_rows)]
    stride = int(round(window_length * (1.0 - overlap_ratio)))
    if stride < 1:
        raise ValueError(f"overlap_ratio {overlap_ratio} leaves a stride below 1")
    offsets = []
    o = 0
    while o + window_length < num_rows:
        offsets.append(o)
        o += stride
    offsets.append(num_rows - window_length)
    return [WindowSpec(video_id, off, window_length, valid=window_length)
            for off in offsets]


def remap_annotations(segments: np.ndarray, window: WindowSpec,
                      keep_threshold: float = 0.75
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Carry (N, 2) row-unit segments into window-local coordinates.

    Returns (remapped (M, 2), kept indices (M,)). A segment survives when its
    intersection with the window's valid extent is at least ``keep_threshold``
    times its original length; survivors are clipped and shifted by -offset,
    so fully-inside segments are preserved exactly.
    """
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    lo = float(window.offset)
    hi = float(window.offset + window.valid)
    clipped = np.clip(segments, lo, hi)
    surviving = clipped[:, 1] - clipped[:, 0]
    original = segments[:, 1] - segments[:, 0]
    keep = (surviving > 0) & (surviving >= keep_threshold * original)
    kept_idx = np.nonzero(keep)[0]
    return clipped[kept_idx] - lo, kept_idx
