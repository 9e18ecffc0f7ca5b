"""
metrics.py

Evaluation quantities for one image + one predicted box + labels:
contrast, SNR (dB), IoU and normalized centre distance (NCD).

Conventions:
- SNR is reported in dB as 20*log10(|mean_d - mean_s| / sigma_s), sigma_s the
  population standard deviation of the sound region.
- Contrast is computed on the image shifted by -min(img) when the image has
  negative values (zero-centred adapter outputs), so the denominator is
  non-negative; the shift is recorded in the details.
- Boxes are half-open pixel regions, areas are continuous box arithmetic.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from app.errors import DegenerateRegionError
from app.seqcore import BBox, RoiLabels, extract_roi_stats


@dataclass
class MetricBundle:
    contrast: float
    snr_db: Optional[float]
    iou: float
    ncd: float
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        if out["snr_db"] is not None and not math.isfinite(out["snr_db"]):
            out["details"] = dict(out["details"], snr_nonfinite=str(out["snr_db"]))
            out["snr_db"] = None
        return out


def contrast_shift(img: np.ndarray) -> float:
    lo = float(np.min(img))
    return -lo if lo < 0 else 0.0


def contrast(img: np.ndarray, defect: BBox, sound: BBox) -> float:
    img = np.asarray(img, dtype=np.float64)
    shift = contrast_shift(img)
    mean_d, _, _ = extract_roi_stats(img, defect)
    mean_s, _, _ = extract_roi_stats(img, sound)
    mean_d += shift
    mean_s += shift
    denom = mean_d + mean_s
    if denom == 0:
        return 0.0
    return abs(mean_d - mean_s) / denom


def snr_db(img: np.ndarray, defect: BBox, sound: BBox) -> float:
    img = np.asarray(img, dtype=np.float64)
    mean_d, _, _ = extract_roi_stats(img, defect)
    mean_s, sigma_s, _ = extract_roi_stats(img, sound)
    if sigma_s == 0:
        raise DegenerateRegionError("degenerate sound region: sigma_s = 0")
    ratio = abs(mean_d - mean_s) / sigma_s
    if ratio == 0:
        return float("-inf")
    return 20.0 * math.log10(ratio)


def iou(a: BBox, b: BBox) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def ncd(pred: BBox, gt: BBox) -> float:
    diag = math.hypot(gt.width, gt.height)
    if diag == 0:
        raise ValueError("ground-truth box has zero diagonal")
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot(px - gx, py - gy) / diag


def evaluate(img: np.ndarray, pred: BBox, labels: RoiLabels) -> MetricBundle:
    """All four metrics plus the region statistics they were computed from."""
    img = np.asarray(img, dtype=np.float64)
    mean_d, std_d, n_d = extract_roi_stats(img, labels.defect_box)
    mean_s, std_s, n_s = extract_roi_stats(img, labels.sound_box)
    details: Dict[str, Any] = {
        "mean_defect": mean_d,
        "mean_sound": mean_s,
        "std_defect": std_d,
        "sigma_sound": std_s,
        "n_defect": n_d,
        "n_sound": n_s,
        "contrast_shift": contrast_shift(img),
        "snr_convention": "20*log10",
    }
    try:
        snr = snr_db(img, labels.defect_box, labels.sound_box)
    except DegenerateRegionError as e:
        snr = None
        details["snr_error"] = str(e)
    return MetricBundle(
        contrast=contrast(img, labels.defect_box, labels.sound_box),
        snr_db=snr,
        iou=iou(pred, labels.defect_box),
        ncd=ncd(pred, labels.defect_box),
        details=details,
    )
