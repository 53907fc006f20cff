import itertools

import numpy as np
import pytest
import torch

from config import TargetMatchConfig
from corruptions import ACTION_SPACE
from errors import MetricError
from metrics import (RobustnessAccumulator, RobustnessRecord, RobustnessReport, binarize, iou, pd_fa, rce,
                     soft_iou_loss, target_counts)


class TestRCE:
    def test_reference_rows(self):
        assert rce(67.10, 29.87) == pytest.approx(55.48, abs=0.01)
        assert rce(68.52, 36.43) == pytest.approx(46.84, abs=0.01)

    def test_clean_vs_clean_is_zero(self):
        assert rce(0.7, 0.7) == 0.0

    def test_undefined_without_clean_score(self):
        assert rce(0.0, 0.3) is None


class TestSoftIoU:
    def test_perfect_prediction(self):
        mask = torch.zeros(1, 1, 8, 8)
        mask[0, 0, 2:4, 2:4] = 1.0
        assert soft_iou_loss(mask.clone(), mask).item() == pytest.approx(0.0)

    def test_empty_prediction(self):
        mask = torch.zeros(8, 8)
        mask[:2, :2] = 1.0
        assert soft_iou_loss(torch.zeros(8, 8), mask).item() == pytest.approx(1.0 - 1.0 / 5.0)

    def test_per_sample_reduction(self):
        pred = torch.rand(3, 1, 4, 4)
        mask = (torch.rand(3, 1, 4, 4) > 0.5).float()
        per_sample = soft_iou_loss(pred, mask, reduction="none")
        assert per_sample.shape == (3,)
        assert soft_iou_loss(pred, mask).item() == pytest.approx(per_sample.mean().item())

    def test_rejects_soft_mask(self):
        with pytest.raises(MetricError):
            soft_iou_loss(torch.rand(4, 4), torch.full((4, 4), 0.5))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(MetricError):
            soft_iou_loss(torch.rand(4, 4), torch.zeros(5, 5))


def test_binarize_includes_threshold():
    assert binarize(np.array([0.49, 0.5, 0.51])).tolist() == [False, True, True]


def _brute_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def test_iou_matches_brute_force_on_all_3x3_masks():
    masks = [np.array(bits, dtype=bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]
    assert len(masks) == 512
    for a in masks:
        for b in masks:
            assert iou(a, b) == pytest.approx(_brute_iou(a, b))


def _scene():
    mask = np.zeros((32, 32), dtype=bool)
    mask[5:8, 5:8] = True
    mask[20:23, 20:23] = True
    pred = np.zeros((32, 32), dtype=bool)
    pred[5:8, 5:8] = True
    for y, x in [(11, 25), (10, 26), (11, 26), (12, 26), (11, 27)]:
        pred[y, x] = True
    return pred, mask


class TestTargetLevel:
    def test_constructed_scene(self):
        pred, mask = _scene()
        pd, fa = pd_fa(pred, mask)
        assert pd == 0.5
        assert fa == 5 / 1024

    def test_both_empty(self):
        empty = np.zeros((8, 8), dtype=bool)
        assert pd_fa(empty, empty) == (1.0, 0.0)

    def test_one_prediction_matches_one_target(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[5, 5] = mask[5, 8] = True
        pred = np.zeros((16, 16), dtype=bool)
        pred[5, 6] = True
        counts = target_counts(pred, mask)
        assert counts.targets == 2
        assert counts.detected == 1
        assert counts.false_pixels == 0

    def test_distance_threshold(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[2, 2] = True
        pred = np.zeros((16, 16), dtype=bool)
        pred[2, 6] = True
        assert pd_fa(pred, mask)[0] == 0.0
        assert pd_fa(pred, mask, TargetMatchConfig(match_distance=4.0))[0] == 1.0

    def test_diagonal_pixels_form_one_component(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[1, 1] = mask[2, 2] = True
        assert target_counts(mask, mask).targets == 1

    def test_rejects_non_binary(self):
        with pytest.raises(MetricError):
            pd_fa(np.full((4, 4), 0.3), np.zeros((4, 4)))


def test_accumulator_pools_pd_and_fa():
    acc = RobustnessAccumulator()
    pred, mask = _scene()
    acc.add(pred, mask)
    acc.add(mask, mask)
    mean_iou, pd, fa = acc.summary()
    assert mean_iou == pytest.approx((iou(pred, mask) + 1.0) / 2)
    assert pd == 3 / 4
    assert fa == 5 / 2048


def test_empty_accumulator():
    with pytest.raises(MetricError):
        RobustnessAccumulator().summary()


def test_record_validation():
    with pytest.raises(MetricError):
        RobustnessRecord(iou_clean=1.2, iou_cor=0.5, rce=None, pd=1.0, fa=0.0)


def test_report_layout():
    clean = RobustnessRecord(0.8, 0.8, 0.0, 0.9, 1e-5)
    records = [RobustnessRecord(0.8, 0.4, rce(0.8, 0.4), 0.5, 2e-5, kind=a.kind, severity=a.severity)
               for a in ACTION_SPACE]
    report = RobustnessReport(clean=clean, records=records)
    assert len(report.to_frame()) == 31
    assert report.row_count == 1 + 30 + 10 + 3 + 1
    summary = report.summary_frame()
    assert list(summary["scope"]).count("group") == 3
    grid = summary[summary["scope"] == "grid"].iloc[0]
    assert grid["rce"] == pytest.approx(50.0)


class TestSoftIoUExamples:
    def test_worked_example(self):
        mask = torch.zeros(4, 4)
        mask[0, :] = 1.0
        pred = torch.zeros(4, 4)
        pred[0, :2] = 1.0
        pred[3, 3] = 1.0
        # sum p*y = 2, sum p = 3, sum y = 4
        assert soft_iou_loss(pred, mask).item() == pytest.approx(0.5)

    def test_both_empty_is_zero_loss(self):
        assert soft_iou_loss(torch.zeros(6, 6), torch.zeros(6, 6)).item() == pytest.approx(0.0)

    def test_strictly_decreasing_towards_the_mask(self):
        mask = torch.zeros(8, 8)
        mask[2:5, 3:6] = 1.0
        losses = [soft_iou_loss((1 - t) * torch.full((8, 8), 0.5) + t * mask, mask).item()
                  for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] == pytest.approx(0.0)


def test_iou_is_symmetric():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a = rng.random((12, 12)) > 0.6
        b = rng.random((12, 12)) > 0.6
        assert iou(a, b) == iou(b, a)


@pytest.mark.parametrize("alpha", [0.01, 0.5, 3.0, 100.0])
def test_rce_is_scale_free(alpha):
    assert rce(alpha * 0.6712, alpha * 0.2987) == pytest.approx(rce(0.6712, 0.2987))


class TestTargetLevelLabelling:
    @pytest.mark.parametrize("transform", [np.fliplr, np.flipud, np.transpose, lambda a: np.rot90(a, 2)],
                             ids=["fliplr", "flipud", "transpose", "rot180"])
    def test_component_order_does_not_matter(self, transform):
        pred, mask = _scene()
        assert pd_fa(transform(pred), transform(mask)) == pd_fa(pred, mask)

    def test_shifted_predictions_within_distance_match(self):
        blobs = [(3, 3), (3, 12), (12, 3), (12, 12)]
        shifted = [(y + 1, x + 2) for y, x in blobs[:3]] + [(20, 20)]

        def draw(points):
            canvas = np.zeros((24, 24), dtype=bool)
            for y, x in points:
                canvas[y:y + 2, x:x + 2] = True
            return canvas

        assert pd_fa(draw(shifted), draw(blobs)) == (0.75, 4 / 576)
