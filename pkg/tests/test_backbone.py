"""Snippet and frame encoders: output-length arithmetic, receptive-field
contracts, and timing metadata."""

import numpy as np
import pytest
import torch

from minitad.backbone import (
    BackboneConfig,
    FrameEncoder,
    SnippetEncoder,
    build_backbone,
    load_precomputed,
    snippet_output_length,
)
from minitad.core import FeatureSequence
from minitad.data import FeatureStore


class TestOutputLength:
    def test_reference_case(self):
        assert snippet_output_length(64, 16, 8) == 7

    def test_exact_fit(self):
        assert snippet_output_length(16, 16, 8) == 1

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="snippet_length"):
            snippet_output_length(10, 16, 8)

    def test_matches_forward_shape_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            t = int(rng.integers(16, 200))
            length = int(rng.integers(2, 17))
            stride = int(rng.integers(1, length + 1))
            if t < length:
                continue
            cfg = BackboneConfig(mode="snippet", frame_dim=4, output_dim=6,
                                 snippet_length=length, snippet_stride=stride)
            enc = SnippetEncoder(cfg)
            out = enc(torch.zeros(1, t, 4))
            assert out.shape == (1, snippet_output_length(t, length, stride), 6)


class TestSnippetLocality:
    """Row i must depend on its own snippet's frames and nothing else."""

    def setup_method(self):
        torch.manual_seed(0)
        self.cfg = BackboneConfig(mode="snippet", frame_dim=8, output_dim=12,
                                  snippet_length=16, snippet_stride=8)
        self.enc = SnippetEncoder(self.cfg)
        rng = np.random.default_rng(1)
        self.frames = torch.from_numpy(
            rng.normal(size=(1, 64, 8)).astype(np.float32))

    def test_outside_perturbation_leaves_row_unchanged(self):
        base = self.enc(self.frames)
        for row in range(base.shape[1]):
            lo = row * 8
            hi = lo + 16
            perturbed = self.frames.clone()
            perturbed[:, :lo] += 100.0
            perturbed[:, hi:] -= 50.0
            out = self.enc(perturbed)
            torch.testing.assert_close(out[:, row], base[:, row])

    def test_inside_perturbation_changes_row(self):
        base = self.enc(self.frames)
        perturbed = self.frames.clone()
        perturbed[:, 8:24] += 1.0  # snippet of row 1
        out = self.enc(perturbed)
        assert not torch.allclose(out[:, 1], base[:, 1])

    def test_default_stride_is_half_snippet(self):
        cfg = BackboneConfig(mode="snippet", snippet_length=16)
        assert cfg.snippet_stride == 8


class TestFrameEncoder:
    def setup_method(self):
        torch.manual_seed(0)
        self.cfg = BackboneConfig(mode="frame", frame_dim=8, output_dim=12,
                                  temporal_pool_factor=4)
        self.enc = FrameEncoder(self.cfg)

    def test_output_length(self):
        assert self.enc(torch.zeros(1, 64, 8)).shape == (1, 16, 12)
        assert self.enc(torch.zeros(1, 66, 8)).shape == (1, 17, 12)  # ceil

    def test_splitting_the_video_changes_the_result(self):
        # global temporal awareness: halves encoded separately differ from
        # the whole, near the split point
        rng = np.random.default_rng(2)
        frames = torch.from_numpy(rng.normal(size=(1, 64, 8)).astype(np.float32))
        whole = self.enc(frames)
        left = self.enc(frames[:, :32])
        right = self.enc(frames[:, 32:])
        stitched = torch.cat([left, right], dim=1)
        assert stitched.shape == whole.shape
        assert not torch.allclose(stitched, whole)

    def test_interior_rows_far_from_split_agree(self):
        # the conv receptive field is 5 frames, so rows well inside each half
        # are identical whether encoded separately or together
        rng = np.random.default_rng(3)
        frames = torch.from_numpy(rng.normal(size=(1, 64, 8)).astype(np.float32))
        whole = self.enc(frames)
        left = self.enc(frames[:, :32])
        torch.testing.assert_close(whole[:, :6], left[:, :6])


class TestEncodeWrappers:
    def test_snippet_metadata(self):
        cfg = BackboneConfig(mode="snippet", frame_dim=4, output_dim=6,
                             snippet_length=8, snippet_stride=4)
        seq = SnippetEncoder(cfg).encode(np.zeros((40, 4), dtype=np.float32),
                                         frame_rate=8.0)
        assert seq.num_rows == snippet_output_length(40, 8, 4)
        assert seq.feature_stride == 4.0
        assert seq.frame_rate == 8.0
        assert seq.mask.all()

    def test_frame_metadata(self):
        cfg = BackboneConfig(mode="frame", frame_dim=4, output_dim=6,
                             temporal_pool_factor=4)
        seq = FrameEncoder(cfg).encode(np.zeros((40, 4), dtype=np.float32),
                                       frame_rate=10.0)
        assert seq.num_rows == 10
        assert seq.feature_stride == 4.0
        assert seq.frame_rate == 10.0

    def test_build_backbone_dispatch(self):
        assert isinstance(build_backbone(BackboneConfig(mode="snippet")),
                          SnippetEncoder)
        assert isinstance(build_backbone(BackboneConfig(mode="frame")),
                          FrameEncoder)
        assert build_backbone(BackboneConfig(mode="precomputed")) is None

    def test_load_precomputed_checks_dim(self, tmp_path):
        store = FeatureStore.create(tmp_path / "s")
        store.write("v", FeatureSequence(np.zeros((5, 8), dtype=np.float32), 4, 8))
        seq = load_precomputed("v", store, expected_dim=8)
        assert seq.dim == 8
        with pytest.raises(Exception, match="expects"):
            load_precomputed("v", store, expected_dim=16)

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            BackboneConfig(mode="resnet")
