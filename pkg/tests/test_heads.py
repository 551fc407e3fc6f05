"""Dense head tests: locations, offset encoding round trips, assignment
strategies with hand-placed actions, auxiliary point targets, and decoding."""

import math

import numpy as np
import pytest
import torch

from minitad.heads import (
    DenseHead,
    FlatOutputs,
    HeadConfig,
    assign_targets,
    aux_targets,
    classification_probs,
    decode_anchor,
    decode_point,
    decode_proposals,
    default_regression_ranges,
    encode_anchor,
    encode_point,
)
from minitad.neck import FeaturePyramid

torch.manual_seed(0)


def make_pyramid(batch=2, length=32, dim=24, levels=3, valid=None):
    gen = torch.Generator().manual_seed(1)
    tensors, masks, strides = [], [], []
    t = length
    for lvl in range(levels):
        x = torch.randn(batch, t, dim, generator=gen)
        m = torch.ones(batch, t, dtype=torch.bool)
        if valid is not None:
            for i, v in enumerate(valid):
                m[i, math.ceil(v / 2 ** lvl):] = False
        x = torch.where(m.unsqueeze(-1), x, torch.zeros(()))
        tensors.append(x)
        masks.append(m)
        strides.append(2 ** lvl)
        t = math.ceil(t / 2)
    return FeaturePyramid(tensors, masks, tuple(strides))


def make_flat(length=16, num_classes=2, stride=1.0, length_range=(0.0, math.inf),
              anchors=None, valid=None):
    centers = (torch.arange(length, dtype=torch.float32) + 0.5) * stride
    mask = torch.ones(1, length, dtype=torch.bool)
    if valid is not None:
        mask[0, valid:] = False
    return FlatOutputs(
        cls_logits=torch.zeros(1, length, num_classes),
        reg_params=torch.zeros(1, length, 2),
        centers=centers,
        strides=torch.full((length,), float(stride)),
        level_ranges=torch.tensor([list(length_range)]).expand(length, 2).float(),
        valid=mask,
        anchors=anchors,
        aux_logits=None, aux_centers=None, aux_valid=None)


class TestEncoding:
    def test_point_decode_fixture(self):
        params = torch.tensor([[2.0, 3.0]])
        centers = torch.tensor([10.5])
        strides = torch.tensor([1.0])
        out = decode_point(params, centers, strides)
        torch.testing.assert_close(out, torch.tensor([[8.5, 13.5]]))

    def test_point_round_trip(self):
        gen = torch.Generator().manual_seed(2)
        seg = torch.rand(50, 1, generator=gen) * 40
        seg = torch.cat([seg, seg + 0.5 + torch.rand(50, 1, generator=gen) * 20],
                        dim=1)
        frac = torch.rand(50, generator=gen)
        centers = seg[:, 0] + frac * (seg[:, 1] - seg[:, 0])
        strides = torch.tensor([1.0, 2.0, 4.0, 8.0]).repeat(13)[:50]
        rec = decode_point(encode_point(seg, centers, strides), centers, strides)
        torch.testing.assert_close(rec, seg, atol=1e-5, rtol=1e-5)

    def test_point_decode_clamps_negative_distances(self):
        params = torch.tensor([[-3.0, -1.0]])
        out = decode_point(params, torch.tensor([5.0]), torch.tensor([2.0]))
        torch.testing.assert_close(out, torch.tensor([[5.0, 5.0]]))

    def test_anchor_round_trip(self):
        gen = torch.Generator().manual_seed(3)
        seg = torch.rand(50, 1, generator=gen) * 40
        seg = torch.cat([seg, seg + 0.5 + torch.rand(50, 1, generator=gen) * 20],
                        dim=1)
        a_start = seg[:, :1] - torch.rand(50, 1, generator=gen) * 5
        anchors = torch.cat([a_start, a_start + 1 + torch.rand(50, 1,
                                                               generator=gen) * 30],
                            dim=1)
        rec = decode_anchor(encode_anchor(seg, anchors), anchors)
        torch.testing.assert_close(rec, seg, atol=1e-5, rtol=1e-5)

    def test_anchor_fixture(self):
        seg = torch.tensor([[4.0, 12.0]])     # center 8, length 8
        anchor = torch.tensor([[6.0, 10.0]])  # center 8, length 4
        params = encode_anchor(seg, anchor)
        torch.testing.assert_close(params,
                                   torch.tensor([[0.0, math.log(2.0)]]))


class TestDefaultRanges:
    def test_four_level_layout(self):
        assert default_regression_ranges(4) == (
            (0.0, 8.0), (8.0, 16.0), (16.0, 32.0), (32.0, math.inf))

    def test_single_level_covers_everything(self):
        assert default_regression_ranges(1) == ((0.0, math.inf),)


class TestDenseHead:
    def test_output_shapes_point_mode(self):
        cfg = HeadConfig(num_classes=4)
        head = DenseHead(cfg, in_dim=24, levels=3)
        out = head(make_pyramid())
        for lvl, t_l in enumerate([32, 16, 8]):
            assert out.cls_logits[lvl].shape == (2, t_l, 1, 4)
            assert out.reg_params[lvl].shape == (2, t_l, 1, 2)
            assert out.aux_logits[lvl].shape == (2, t_l, 3)
            assert out.locations[lvl].shape == (t_l,)
        assert out.anchors is None

    def test_output_shapes_anchor_mode(self):
        cfg = HeadConfig(num_classes=2, parameterization="anchor",
                         anchor_scales=(2.0, 5.0), with_aux_heads=False)
        head = DenseHead(cfg, in_dim=24, levels=3)
        out = head(make_pyramid())
        assert out.cls_logits[0].shape == (2, 32, 2, 2)
        assert out.anchors[1].shape == (16, 2, 2)
        assert out.aux_logits is None

    def test_locations_sit_at_cell_centers(self):
        cfg = HeadConfig(num_classes=1)
        head = DenseHead(cfg, in_dim=24, levels=3)
        out = head(make_pyramid())
        torch.testing.assert_close(out.locations[0][:3],
                                   torch.tensor([0.5, 1.5, 2.5]))
        torch.testing.assert_close(out.locations[1][:3],
                                   torch.tensor([1.0, 3.0, 5.0]))
        torch.testing.assert_close(out.locations[2][:2],
                                   torch.tensor([2.0, 6.0]))

    def test_anchor_boxes_center_on_locations(self):
        cfg = HeadConfig(num_classes=1, parameterization="anchor",
                         anchor_scales=(4.0,))
        head = DenseHead(cfg, in_dim=24, levels=2)
        out = head(make_pyramid(levels=2))
        # stride 2, scale 4 -> span 8 rows around each center
        torch.testing.assert_close(out.anchors[1][0, 0],
                                   torch.tensor([1.0 - 4.0, 1.0 + 4.0]))

    def test_classification_bias_matches_prior(self):
        cfg = HeadConfig(num_classes=3, cls_prior=0.01)
        head = DenseHead(cfg, in_dim=24, levels=3)
        p = torch.sigmoid(head.cls_out.bias).detach()
        torch.testing.assert_close(p, torch.full_like(p, 0.01))

    def test_flatten_counts_and_masks(self):
        cfg = HeadConfig(num_classes=2)
        head = DenseHead(cfg, in_dim=24, levels=3)
        flat = head(make_pyramid(valid=(32, 20))).flatten()
        assert flat.cls_logits.shape == (2, 32 + 16 + 8, 2)
        assert int(flat.valid[0].sum()) == 56
        assert int(flat.valid[1].sum()) == 20 + 10 + 5
        assert flat.aux_logits.shape == (2, 56, 3)

    def test_mismatched_level_count_raises(self):
        head = DenseHead(HeadConfig(num_classes=1), in_dim=24, levels=4)
        with pytest.raises(ValueError, match="levels"):
            head(make_pyramid(levels=3))

    def test_explicit_ranges_must_match_levels(self):
        cfg = HeadConfig(num_classes=1,
                         regression_ranges=((0.0, 8.0), (8.0, math.inf)))
        with pytest.raises(ValueError, match="regression ranges"):
            DenseHead(cfg, in_dim=24, levels=3)

    def test_ranges_must_partition_without_gaps(self):
        cfg = HeadConfig(num_classes=1,
                         regression_ranges=((0.0, 8.0), (10.0, math.inf)))
        with pytest.raises(ValueError, match="partition"):
            DenseHead(cfg, in_dim=24, levels=2)
        cfg = HeadConfig(num_classes=1,
                         regression_ranges=((0.0, 8.0), (8.0, 64.0)))
        with pytest.raises(ValueError, match="partition"):
            DenseHead(cfg, in_dim=24, levels=2)


class TestAssignment:
    def test_center_radius_marks_cells_near_action_center(self):
        flat = make_flat(length=16)
        segments = torch.tensor([[4.0, 8.0]])
        labels = torch.tensor([1])
        cfg = HeadConfig(num_classes=2, assignment="center_radius",
                         center_radius=1.5)
        cls_t, reg_t, pos = assign_targets(flat, segments, labels, cfg, 0)
        # action center 6.0, radius 1.5 rows: centers 4.5 through 7.5 qualify
        assert pos.nonzero(as_tuple=True)[0].tolist() == [4, 5, 6, 7]
        assert cls_t[5].item() == 1
        assert cls_t[0].item() == -1
        torch.testing.assert_close(reg_t[4], torch.tensor([0.5, 3.5]))
        torch.testing.assert_close(reg_t[7], torch.tensor([3.5, 0.5]))

    def test_center_radius_requires_center_inside_action(self):
        flat = make_flat(length=16)
        segments = torch.tensor([[4.0, 4.6]])  # only center 4.5 is inside
        labels = torch.tensor([0])
        cfg = HeadConfig(num_classes=1, center_radius=5.0)
        _, _, pos = assign_targets(flat, segments, labels, cfg, 0)
        assert pos.nonzero(as_tuple=True)[0].tolist() == [4]

    def test_ties_resolve_to_shortest_action(self):
        flat = make_flat(length=16, num_classes=2)
        segments = torch.tensor([[2.0, 14.0], [5.0, 9.0]])
        labels = torch.tensor([0, 1])
        cfg = HeadConfig(num_classes=2, assignment="inside_gt")
        cls_t, _, pos = assign_targets(flat, segments, labels, cfg, 0)
        assert cls_t[7].item() == 1   # inside both, shorter one wins
        assert cls_t[3].item() == 0   # only inside the long one

    def test_level_range_filters_action_lengths(self):
        flat = make_flat(length=16, length_range=(0.0, 4.0))
        segments = torch.tensor([[2.0, 12.0]])  # length 10 exceeds the range
        labels = torch.tensor([0])
        cfg = HeadConfig(num_classes=1, assignment="inside_gt")
        _, _, pos = assign_targets(flat, segments, labels, cfg, 0)
        assert int(pos.sum()) == 0

    def test_max_iou_with_anchors(self):
        length = 16
        centers = (torch.arange(length, dtype=torch.float32) + 0.5)
        anchors = torch.stack([centers - 2.0, centers + 2.0], dim=-1)
        flat = make_flat(length=length, anchors=anchors)
        segments = torch.tensor([[3.5, 7.5]])
        labels = torch.tensor([1])
        cfg = HeadConfig(num_classes=2, assignment="max_iou",
                         iou_pos_threshold=0.6)
        cls_t, reg_t, pos = assign_targets(flat, segments, labels, cfg, 0)
        # anchor at center 5.5 is [3.5, 7.5]: exact match; neighbours reach
        # tiou 3/5 = 0.6 at centers 4.5 and 6.5
        assert pos.nonzero(as_tuple=True)[0].tolist() == [4, 5, 6]
        assert cls_t[5].item() == 1
        torch.testing.assert_close(reg_t[5], torch.tensor([0.0, 0.0]))

    def test_simota_is_reserved(self):
        flat = make_flat()
        cfg = HeadConfig(num_classes=1, assignment="simota")
        with pytest.raises(NotImplementedError, match="simota"):
            assign_targets(flat, torch.tensor([[1.0, 3.0]]),
                           torch.tensor([0]), cfg, 0)

    def test_masked_cells_are_never_positive(self):
        flat = make_flat(length=16, valid=6)
        segments = torch.tensor([[8.0, 12.0]])  # entirely in the masked tail
        labels = torch.tensor([0])
        cfg = HeadConfig(num_classes=1, assignment="inside_gt")
        _, _, pos = assign_targets(flat, segments, labels, cfg, 0)
        assert int(pos.sum()) == 0

    def test_no_actions_means_all_background(self):
        flat = make_flat()
        cfg = HeadConfig(num_classes=1)
        cls_t, _, pos = assign_targets(flat, torch.zeros(0, 2),
                                       torch.zeros(0, dtype=torch.int64), cfg, 0)
        assert int(pos.sum()) == 0
        assert torch.all(cls_t == -1)

    def test_growing_radius_never_removes_positives(self):
        gen = torch.Generator().manual_seed(5)
        flat = make_flat(length=32)
        segments = torch.rand(4, 1, generator=gen) * 20
        segments = torch.cat([segments, segments + 1 + torch.rand(4, 1,
                                                                  generator=gen) * 8],
                             dim=1)
        labels = torch.zeros(4, dtype=torch.int64)
        previous = None
        for radius in (0.5, 1.0, 2.0, 4.0, 8.0):
            cfg = HeadConfig(num_classes=1, center_radius=radius)
            _, _, pos = assign_targets(flat, segments, labels, cfg, 0)
            if previous is not None:
                assert torch.all(previous <= pos)
            previous = pos

    def test_lowering_iou_threshold_never_removes_positives(self):
        length = 24
        centers = (torch.arange(length, dtype=torch.float32) + 0.5)
        anchors = torch.stack([centers - 3.0, centers + 3.0], dim=-1)
        flat = make_flat(length=length, anchors=anchors)
        segments = torch.tensor([[4.0, 11.0], [15.0, 19.0]])
        labels = torch.tensor([0, 0])
        previous = None
        for thr in (0.9, 0.7, 0.5, 0.3):
            cfg = HeadConfig(num_classes=1, assignment="max_iou",
                             iou_pos_threshold=thr)
            _, _, pos = assign_targets(flat, segments, labels, cfg, 0)
            if previous is not None:
                assert torch.all(previous <= pos)
            previous = pos


class TestAuxTargets:
    def test_boundary_rows_for_ten_row_action(self):
        centers = torch.arange(30, dtype=torch.float32) + 0.5
        out = aux_targets(centers, torch.tensor([[10.0, 20.0]]))
        assert out[:, 0].nonzero(as_tuple=True)[0].tolist() == list(range(10, 20))
        assert out[:, 1].nonzero(as_tuple=True)[0].tolist() == [9, 10]
        assert out[:, 2].nonzero(as_tuple=True)[0].tolist() == [19, 20]

    def test_window_floors_at_one_row(self):
        centers = torch.arange(10, dtype=torch.float32) + 0.5
        out = aux_targets(centers, torch.tensor([[4.0, 6.0]]))  # 0.1*len = 0.2
        assert out[:, 1].nonzero(as_tuple=True)[0].tolist() == [3, 4]

    def test_no_actions_gives_zeros(self):
        centers = torch.arange(5, dtype=torch.float32)
        assert aux_targets(centers, torch.zeros(0, 2)).sum() == 0


class TestDecodeProposals:
    def test_scores_labels_and_clamping(self):
        flat = make_flat(length=8, num_classes=2)
        flat.cls_logits[0, 2, 1] = 4.0
        flat.cls_logits[0, 6, 0] = 2.0
        flat.reg_params[0, 2] = torch.tensor([2.0, 3.0])
        flat.reg_params[0, 6] = torch.tensor([9.0, 9.0])
        out = decode_proposals(flat, ["vid"], torch.tensor([8]),
                               cls_loss="focal", score_threshold=0.5)
        ps = out[0]
        assert ps.video_id == "vid"
        assert len(ps.scores) == 2
        order = np.argsort(-ps.scores)
        assert ps.labels[order[0]] == 1
        np.testing.assert_allclose(ps.segments[order[0]], [0.5, 5.5])
        np.testing.assert_allclose(ps.segments[order[1]], [0.0, 8.0])  # clamped

    def test_threshold_and_topk(self):
        flat = make_flat(length=8, num_classes=1)
        flat.cls_logits[0, :, 0] = torch.linspace(1.0, 2.0, 8)
        out = decode_proposals(flat, ["v"], torch.tensor([8]),
                               score_threshold=0.5, pre_nms_topk=3)
        assert len(out[0].scores) == 3
        assert out[0].scores.min() > 0.8  # the three largest survive

    def test_empty_when_nothing_clears_threshold(self):
        flat = make_flat(length=4, num_classes=1)
        flat.cls_logits -= 10.0
        out = decode_proposals(flat, ["v"], torch.tensor([4]),
                               score_threshold=0.5)
        assert len(out[0].scores) == 0

    def test_masked_cells_cannot_emit(self):
        flat = make_flat(length=8, num_classes=1, valid=4)
        flat.cls_logits[0, 6, 0] = 10.0
        out = decode_proposals(flat, ["v"], torch.tensor([4]),
                               score_threshold=0.5)
        assert len(out[0].scores) == 0

    def test_softmax_probs_for_cross_entropy(self):
        logits = torch.zeros(1, 2)
        p = classification_probs(logits, "cross_entropy")
        torch.testing.assert_close(p, torch.full((1, 2), 1 / 3))
        p = classification_probs(logits, "focal")
        torch.testing.assert_close(p, torch.full((1, 2), 0.5))


class TestConfigValidation:
    def test_rejects_unknown_names(self):
        with pytest.raises(ValueError, match="parameterization"):
            HeadConfig(parameterization="grid")
        with pytest.raises(ValueError, match="assignment"):
            HeadConfig(assignment="hungarian")
        with pytest.raises(ValueError, match="cls_prior"):
            HeadConfig(cls_prior=1.5)
