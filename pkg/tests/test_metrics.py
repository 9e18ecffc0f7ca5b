"""
Test suite for metrics.py
"""
import math

import numpy as np
import pytest

from app.errors import DegenerateRegionError
from app.metrics import contrast, evaluate, iou, ncd, snr_db
from app.seqcore import BBox, RoiLabels

DEFECT = BBox(2, 2, 6, 6)
SOUND = BBox(10, 10, 16, 16)


def _two_region_image(mean_d, mean_s, sigma_s=0.0):
    """Defect region at mean_d; sound region alternating mean_s +/- sigma_s"""
    img = np.full((16, 16), mean_s, dtype=np.float64)
    img[2:6, 2:6] = mean_d
    checker = np.indices((6, 6)).sum(axis=0) % 2
    img[10:16, 10:16] = mean_s + sigma_s * np.where(checker == 0, 1.0, -1.0)
    return img


def test_contrast_examples():
    """Equal means give 0, means 3 and 1 give 0.5"""
    assert contrast(_two_region_image(1.0, 1.0), DEFECT, SOUND) == 0.0
    assert contrast(_two_region_image(3.0, 1.0), DEFECT, SOUND) == pytest.approx(0.5)


def test_contrast_shifts_signed_images():
    """Images with negative values are shifted by -min before the ratio"""
    img = _two_region_image(1.0, -1.0)
    assert contrast(img, DEFECT, SOUND) == pytest.approx(1.0)
    assert 0.0 <= contrast(-img, DEFECT, SOUND) <= 1.0


def test_contrast_zero_denominator_is_zero():
    """A zero image has zero contrast"""
    assert contrast(np.zeros((16, 16)), DEFECT, SOUND) == 0.0


def test_snr_examples():
    """Mean difference equal to sigma is 0 dB, ten sigma is 20 dB"""
    assert snr_db(_two_region_image(3.0, 2.0, 1.0), DEFECT, SOUND) == pytest.approx(0.0, abs=1e-12)
    assert snr_db(_two_region_image(12.0, 2.0, 1.0), DEFECT, SOUND) == 20.0


def test_snr_degenerate_sound_region():
    """A flat sound region has no SNR"""
    with pytest.raises(DegenerateRegionError, match='degenerate sound region'):
        snr_db(_two_region_image(3.0, 1.0), DEFECT, SOUND)


def test_snr_affine_invariance():
    """Offsets and positive scaling leave the SNR unchanged"""
    img = np.random.default_rng(2).normal(size=(16, 16))
    base = snr_db(img, DEFECT, SOUND)
    assert snr_db(img + 5.0, DEFECT, SOUND) == pytest.approx(base, abs=1e-9)
    assert snr_db(3.0 * img, DEFECT, SOUND) == pytest.approx(base, abs=1e-9)


def test_iou_examples():
    """Identical, disjoint and half-shifted boxes"""
    a = BBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    assert iou(a, BBox(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-12)


def test_iou_symmetry_and_invariance():
    """IoU is symmetric and unchanged by joint translation and scaling"""
    a, b = BBox(1, 2, 7, 9), BBox(4, 0, 12, 5)
    assert iou(a, b) == iou(b, a)
    moved = [BBox(x.x1 + 3, x.y1 - 2, x.x2 + 3, x.y2 - 2) for x in (a, b)]
    scaled = [BBox(x.x1 * 2, x.y1 * 2, x.x2 * 2, x.y2 * 2) for x in (a, b)]
    assert iou(*moved) == pytest.approx(iou(a, b), abs=1e-12)
    assert iou(*scaled) == pytest.approx(iou(a, b), abs=1e-12)
    assert ncd(*scaled) == pytest.approx(ncd(a, b), abs=1e-12)


def test_ncd_examples():
    """Same centre is 0, an offset of (1, 1) on a 10x10 box is 0.1"""
    gt = BBox(0, 0, 10, 10)
    assert ncd(gt, gt) == 0.0
    assert ncd(BBox(1, 1, 11, 11), gt) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        ncd(gt, BBox(3, 3, 3, 3))


def test_evaluate_bundle():
    """Predicting the ground truth box gives IoU 1 and NCD 0 plus details"""
    labels = RoiLabels(DEFECT, SOUND)
    bundle = evaluate(_two_region_image(12.0, 2.0, 1.0), DEFECT, labels)
    assert bundle.iou == 1.0 and bundle.ncd == 0.0
    assert bundle.snr_db == 20.0
    assert bundle.details['n_defect'] == 16 and bundle.details['n_sound'] == 36
    assert bundle.details['sigma_sound'] == pytest.approx(1.0)


def test_evaluate_uniform_image_marks_snr():
    """A uniform image gives contrast 0 and an SNR error marker"""
    bundle = evaluate(np.ones((16, 16)), BBox(0, 0, 4, 4), RoiLabels(DEFECT, SOUND))
    assert bundle.contrast == 0.0
    assert bundle.snr_db is None
    assert 'degenerate' in bundle.details['snr_error']
    assert bundle.to_dict()['snr_db'] is None


def test_to_dict_replaces_infinite_snr():
    """Identical means give -inf dB, serialized as None with a marker"""
    bundle = evaluate(_two_region_image(2.0, 2.0, 1.0), DEFECT, RoiLabels(DEFECT, SOUND))
    assert bundle.snr_db == float('-inf')
    out = bundle.to_dict()
    assert out['snr_db'] is None and out['details']['snr_nonfinite'] == '-inf'


def _brute_region(img, box):
    values = [img[y, x] for y in range(img.shape[0]) for x in range(img.shape[1])
              if box.x1 <= x + 0.5 < box.x2 and box.y1 <= y + 0.5 < box.y2]
    return np.array(values)


def _random_box(rng, size=16):
    x1, y1 = rng.uniform(0, size - 4, 2)
    return BBox(x1, y1, x1 + rng.uniform(2, size - x1), y1 + rng.uniform(2, size - y1))


def test_metrics_match_brute_force_oracle():
    """All four metrics agree with pixel and area enumeration on random instances"""
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(1000):
        img = rng.random((16, 16)) + 0.1
        d, s = _random_box(rng), _random_box(rng)
        dv, sv = _brute_region(img, d), _brute_region(img, s)
        if dv.size == 0 or sv.size < 2:
            continue
        expected_c = abs(dv.mean() - sv.mean()) / (dv.mean() + sv.mean())
        assert contrast(img, d, s) == pytest.approx(expected_c, rel=1e-9, abs=1e-12)
        expected_snr = 20 * math.log10(abs(dv.mean() - sv.mean()) / sv.std())
        assert snr_db(img, d, s) == pytest.approx(expected_snr, rel=1e-9, abs=1e-9)

        a = BBox(*map(float, rng.integers(0, 8, 2)), *map(float, rng.integers(8, 16, 2)))
        b = BBox(*map(float, rng.integers(0, 8, 2)), *map(float, rng.integers(8, 16, 2)))
        cells_a = {(x, y) for x in range(int(a.x1), int(a.x2)) for y in range(int(a.y1), int(a.y2))}
        cells_b = {(x, y) for x in range(int(b.x1), int(b.x2)) for y in range(int(b.y1), int(b.y2))}
        assert iou(a, b) == pytest.approx(len(cells_a & cells_b) / len(cells_a | cells_b), rel=1e-9)
        dist = math.dist(((a.x1 + a.x2) / 2, (a.y1 + a.y2) / 2), ((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2))
        assert ncd(a, b) == pytest.approx(dist / math.hypot(b.width, b.height), rel=1e-9, abs=1e-12)
        checked += 1
    assert checked > 500


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
