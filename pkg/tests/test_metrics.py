import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slicescan.errors import ShapeError
from slicescan.metrics import (
    boundary,
    confusion_counts,
    hd95_binary,
    mean_dice,
    mean_reports,
    segmentation_metrics,
)


def brute_boundary(mask):
    H, W = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for r, c in itertools.product(range(H), range(W)):
        if not mask[r, c]:
            continue
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < H and 0 <= cc < W) or not mask[rr, cc]:
                out[r, c] = True
    return out


def brute_hd95(a, b):
    """Enumerate every boundary pair; nearest-neighbour distance both ways, then the 95th percentile."""
    pa = np.argwhere(brute_boundary(a))
    pb = np.argwhere(brute_boundary(b))
    d = []
    for p in pa:
        d.append(min(math.dist(p, q) for q in pb))
    for q in pb:
        d.append(min(math.dist(q, p) for p in pa))
    return float(np.percentile(d, 95))


small_masks = arrays(np.bool_, (7, 9), elements=st.booleans())


class TestConfusion:
    def test_hand_example(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [0, 0]])
        assert confusion_counts(pred, gt, 1) == (1, 1, 0, 2)
        r = segmentation_metrics(pred, gt, 2)
        assert r.dsc == pytest.approx(2 / 3, abs=1e-9)
        assert r.miou == pytest.approx(1 / 2, abs=1e-9)
        assert r.acc == pytest.approx(3 / 4, abs=1e-9)
        assert r.sen == pytest.approx(1.0, abs=1e-9)
        assert r.spe == pytest.approx(2 / 3, abs=1e-9)

    def test_identical_masks(self):
        rng = np.random.default_rng(0)
        m = (rng.random((16, 16)) > 0.6).astype(int)
        r = segmentation_metrics(m, m, 2)
        assert (r.dsc, r.miou, r.acc, r.hd95) == (1.0, 1.0, 1.0, 0.0)

    def test_include_background_flag(self):
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [0, 0]])
        r = segmentation_metrics(pred, gt, 2, include_background=True)
        # background IoU = 2/3, foreground IoU = 1/2
        assert r.miou == pytest.approx((2 / 3 + 1 / 2) / 2, abs=1e-12)

    def test_dsc_iou_identity_random(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            K = int(rng.integers(2, 5))
            shape = tuple(rng.integers(1, 12, size=2))
            pred = rng.integers(0, K, size=shape)
            gt = rng.integers(0, K, size=shape)
            r = segmentation_metrics(pred, gt, K, include_background=True)
            for k in range(K):
                tp, fp, fn, _ = confusion_counts(pred, gt, k)
                if tp + fp + fn == 0:
                    continue
                iou = tp / (tp + fp + fn)
                assert r.per_class_dsc[k] == pytest.approx(2 * iou / (1 + iou), abs=1e-12)

    def test_multiclass_averaging(self):
        pred = np.array([[0, 1, 2], [2, 2, 1]])
        gt = np.array([[0, 1, 1], [2, 2, 2]])
        r = segmentation_metrics(pred, gt, 3)
        d1 = 2 * 1 / (2 * 1 + 1 + 1)
        d2 = 2 * 2 / (2 * 2 + 1 + 1)
        assert r.dsc == pytest.approx((d1 + d2) / 2, abs=1e-12)

    def test_fractions_in_range(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = rng.integers(0, 3, (10, 10))
            g = rng.integers(0, 3, (10, 10))
            r = segmentation_metrics(p, g, 3)
            for v in (r.miou, r.dsc, r.acc, r.spe, r.sen):
                assert 0.0 <= v <= 1.0
            assert np.isfinite(r.hd95) and r.hd95 >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            segmentation_metrics(np.zeros((2, 2)), np.zeros((2, 3)), 2)


class TestHD95:
    def test_shifted_square(self):
        gt = np.zeros((12, 12), bool)
        gt[3:8, 3:8] = True
        pred = np.roll(gt, 1, axis=1)
        assert hd95_binary(pred, gt) == 1.0
        assert segmentation_metrics(pred.astype(int), gt.astype(int), 2).hd95 == 1.0

    def test_identical_is_zero(self):
        m = np.zeros((6, 6), bool)
        m[1:4, 2:5] = True
        assert hd95_binary(m, m) == 0.0

    def test_empty_cases(self):
        m = np.zeros((3, 4), bool)
        full = m.copy()
        full[1, 1] = True
        assert hd95_binary(m, m) is None
        assert hd95_binary(full, m) == pytest.approx(5.0)
        assert hd95_binary(m, full) == pytest.approx(5.0)

    def test_both_empty_skipped(self):
        z = np.zeros((4, 4), int)
        assert segmentation_metrics(z, z, 2).hd95 == 0.0

    def test_boundary_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            m = rng.random((9, 11)) > 0.4
            assert np.array_equal(boundary(m), brute_boundary(m))

    @settings(max_examples=60, deadline=None)
    @given(small_masks, small_masks)
    def test_matches_brute_force(self, a, b):
        if not a.any() or not b.any():
            return
        assert hd95_binary(a, b) == pytest.approx(brute_hd95(a, b), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(small_masks, small_masks)
    def test_symmetric(self, a, b):
        assert hd95_binary(a, b) == hd95_binary(b, a)


class TestAggregation:
    def test_mean_reports_fieldwise(self):
        a = segmentation_metrics(np.array([[1, 0]]), np.array([[1, 0]]), 2)
        b = segmentation_metrics(np.array([[1, 1]]), np.array([[1, 0]]), 2)
        m = mean_reports([a, b])
        assert m.dsc == pytest.approx((a.dsc + b.dsc) / 2)
        assert m.per_class_dsc[1] == pytest.approx((a.per_class_dsc[1] + b.per_class_dsc[1]) / 2)

    def test_mean_dice_is_per_image_mean(self):
        rng = np.random.default_rng(4)
        p = rng.integers(0, 2, (5, 8, 8))
        g = rng.integers(0, 2, (5, 8, 8))
        want = np.mean([segmentation_metrics(pi, gi, 2).dsc for pi, gi in zip(p, g)])
        assert mean_dice(p, g, 2) == pytest.approx(want, abs=1e-12)

    def test_csv_row(self):
        r = segmentation_metrics(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]]), 2)
        assert r.csv_header() == "miou,dsc,acc,spe,sen,hd95"
        assert r.csv_row().split(",")[1] == "0.666667"
