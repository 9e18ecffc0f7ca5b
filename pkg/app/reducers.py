"""
reducers.py

Classic thermographic dimensionality-reduction baselines that the adapter is
benchmarked against:

- raw:  every frame is a candidate, the best-contrast frame is scored;
- TSR:  per-pixel polynomial fit of ln(dT) against ln(t) after the pulse,
        coefficient maps plus first/second log-derivative maps;
- PCT:  SVD of the per-pixel standardized (N_t x P) matrix, the right
        singular vectors reshaped to images (EOFs).

Selection of the scored image is label-aware for raw and PCT (best case for
the baseline); that is an interpretation and is echoed in `params`.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import linalg
from scipy.stats import skew

from app.errors import NumericError
from app.metrics import contrast
from app.seqcore import InspectionSequence, RoiLabels

logger = logging.getLogger(__name__)

VARIANCE_EPS = 1e-12


class ReductionMethod(str, Enum):
    RAW = "raw_best_frame"
    TSR = "tsr"
    PCT = "pct"


@dataclass
class ReductionResult:
    images: List[np.ndarray]
    method: ReductionMethod
    selected: int
    params: Dict[str, str] = field(default_factory=dict)
    spectrum: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("reduction produced no images")
        shape = self.images[0].shape
        if any(img.shape != shape for img in self.images):
            raise ValueError("reduction images differ in shape")
        if not 0 <= self.selected < len(self.images):
            raise ValueError(f"selected index {self.selected} out of range")

    @property
    def image(self) -> np.ndarray:
        return self.images[self.selected]


# --- Raw frames ---

def reduce_raw(seq: InspectionSequence, labels: RoiLabels) -> ReductionResult:
    """All frames; the frame with the highest contrast against the labels is selected."""
    images = [seq.frames[k] for k in range(seq.n_t)]
    scores = np.array([contrast(img, labels.defect_box, labels.sound_box) for img in images])
    selected = int(np.argmax(scores))
    params = {"selection": "label-aware max contrast", "contrast": f"{scores[selected]:.6g}"}
    return ReductionResult(images, ReductionMethod.RAW, selected, params)


# --- Thermographic signal reconstruction ---

def _excitation_window(mean_t: np.ndarray) -> Tuple[int, int]:
    """(onset, peak): onset is the first frame risen 1% of the peak rise above frame 0."""
    peak = int(np.argmax(mean_t))
    rise = mean_t - mean_t[0]
    if rise[peak] <= 0:
        return 1, peak
    onset = int(np.argmax(rise > 0.01 * rise[peak]))
    return max(onset, 1), peak


def reduce_tsr(seq: InspectionSequence, degree: int = 5) -> ReductionResult:
    if degree < 1:
        raise ValueError("TSR degree must be >= 1")
    n_t, n_y, n_x = seq.shape
    if n_t < degree + 2:
        raise ValueError(f"TSR degree {degree} needs at least {degree + 2} frames, got {n_t}")
    frames = seq.frames.reshape(n_t, n_y * n_x).astype(np.float64)
    onset, peak = _excitation_window(frames.mean(axis=1))
    ambient = frames[:onset].mean(axis=0)
    window = np.arange(peak + 1, n_t)
    if window.size < degree + 1:
        raise ValueError(f"only {window.size} post-pulse frames for a degree-{degree} fit")

    # time origin at the last ambient frame
    t = (window - (onset - 1)) / seq.frame_rate_hz
    log_t = np.log(t)
    centre = 0.5 * (log_t[0] + log_t[-1])
    half = 0.5 * (log_t[-1] - log_t[0])
    u = (log_t - centre) / half

    delta = frames[window] - ambient
    bad = np.any(delta <= 0, axis=0)
    log_delta = np.log(np.where(delta > 0, delta, 1.0))
    vander = P.polyvander(u, degree)
    coeffs, *_ = np.linalg.lstsq(vander, log_delta, rcond=None)
    coeffs[:, bad] = 0.0
    fitted = vander @ coeffs
    residual = log_delta[:, ~bad] - fitted[:, ~bad]
    rms = float(np.sqrt(np.mean(residual ** 2))) if residual.size else 0.0

    # derivatives with respect to ln(t) at the log-mid time (u = 0)
    d1 = coeffs[1] / half
    d2 = 2.0 * coeffs[2] / half ** 2 if degree >= 2 else np.zeros_like(d1)
    images = [c.reshape(n_y, n_x) for c in coeffs] + [d1.reshape(n_y, n_x), d2.reshape(n_y, n_x)]
    n_bad = int(bad.sum())
    if n_bad:
        logger.warning("TSR: %d pixels had non-positive signal after ambient shift; zeroed", n_bad)
    params = {
        "degree": str(degree),
        "onset_frame": str(onset),
        "peak_frame": str(peak),
        "log_time_centre": f"{centre:.9g}",
        "log_time_half_range": f"{half:.9g}",
        "fallback_pixels": str(n_bad),
        "rms_residual": f"{rms:.9g}",
        "basis": "polynomial in (ln t - centre) / half_range",
    }
    return ReductionResult(images, ReductionMethod.TSR, len(images) - 1, params)


# --- Principal component thermography ---

def pct_decompose(seq: InspectionSequence) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Standardized (N_t x P) matrix and its sign-fixed thin SVD (A, U, s, Vt)."""
    n_t, n_y, n_x = seq.shape
    A = seq.frames.reshape(n_t, n_y * n_x).astype(np.float64)
    A = A - A.mean(axis=0)
    std = np.sqrt(A.var(axis=0))
    A = A / np.where(std > np.sqrt(VARIANCE_EPS), std, 1.0)
    if not np.any(A):
        raise NumericError("degenerate sequence: standardized matrix is all zeros")
    U, s, Vt = linalg.svd(A, full_matrices=False)
    with np.errstate(invalid="ignore", divide="ignore"):
        skews = skew(Vt, axis=1)
    signs = np.where(np.nan_to_num(skews) < 0, -1.0, 1.0)
    return A, U * signs, s, Vt * signs[:, None]


def reduce_pct(seq: InspectionSequence, n_components: int = 10, labels: Optional[RoiLabels] = None) -> ReductionResult:
    n_t, n_y, n_x = seq.shape
    if not 1 <= n_components <= min(n_t, n_y * n_x):
        raise ValueError(f"n_components must be in [1, {min(n_t, n_y * n_x)}], got {n_components}")
    _A, _U, s, Vt = pct_decompose(seq)
    images = [Vt[i].reshape(n_y, n_x) for i in range(n_components)]
    if labels is not None:
        scores = [contrast(img, labels.defect_box, labels.sound_box) for img in images]
        selected = int(np.argmax(np.abs(scores)))
        selection = "label-aware max |contrast|"
    else:
        selected = 1 if n_components > 1 else 0
        selection = "default EOF index 1"
    params = {
        "n_components": str(n_components),
        "selection": selection,
        "standardization": "per-pixel centring and unit variance",
        "sign_convention": "non-negative skewness",
    }
    return ReductionResult(images, ReductionMethod.PCT, selected, params, spectrum=s)
