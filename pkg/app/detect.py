"""
detect.py

Defect localization on aligned images.

Backends:
- mock: deterministic local oracle (Otsu threshold + 8-connected components),
  so the whole pipeline runs offline;
- http: JSON wire protocol to an external vision-language model shim.

Wire protocol (one request per image):
    POST <endpoint>  {"image": base64(PGM P5 bytes), "prompt": str}
    200 OK           {"bbox": [x1, y1, x2, y2], "confidence": float (optional)}
Coordinates are pixels of the sent image, half-open boxes.

`nms_ensemble` runs the backend on every latent image and merges the boxes
with greedy non-maximum suppression.
"""
import base64
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple, Union
from urllib.parse import urlparse

import numpy as np
import requests
from joblib import Parallel, delayed
from skimage import filters, measure

from app.adapter import AlignedImage, LatentStack
from app.errors import AirtError, EnsembleError, NoStructureError, ProtocolError, TransportError
from app.metrics import iou
from app.seqcore import BBox, encode_pgm

logger = logging.getLogger(__name__)

DEFAULT_PROMPT = (
    "Inspect the thermal image of a CFRP sheet and output the defect bounding box "
    "as <x1, y1, x2, y2>."
)
DEFAULT_CONFIDENCE = 0.5
BACKEND_KINDS = ("mock", "http")


@dataclass(frozen=True)
class Prompt:
    text: str = DEFAULT_PROMPT

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("prompt text must be non-empty")


@dataclass
class Detection:
    box: BBox
    confidence: float
    backend_id: str
    latency_s: float
    support: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "bbox": self.box.to_list(),
            "confidence": self.confidence,
            "backend_id": self.backend_id,
            "latency_s": self.latency_s,
        }
        if self.support is not None:
            out["support"] = self.support
        return out


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint_url: str = ""
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.5
    prompt: Prompt = field(default_factory=Prompt)
    name: str = ""

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}; expected one of {BACKEND_KINDS}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.retries < 0 or self.backoff_s < 0:
            raise ValueError("retries and backoff_s must be non-negative")
        if self.kind == "http":
            parsed = urlparse(self.endpoint_url)
            if parsed.scheme not in ("http", "https") or not parsed.netloc:
                raise ValueError(f"http backend needs an http(s) endpoint_url, got {self.endpoint_url!r}")

    @property
    def backend_id(self) -> str:
        if self.name:
            return self.name
        return "mock" if self.kind == "mock" else f"http:{self.endpoint_url}"


# --- Local oracle ---

def _largest_component(mask: np.ndarray) -> Optional[Tuple[Any, float]]:
    labels = measure.label(mask, connectivity=2)
    regions = measure.regionprops(labels)
    if not regions:
        return None
    best = max(regions, key=lambda r: r.area)  # ties keep the first label in raster order
    r0, c0, r1, c1 = best.bbox
    compactness = best.area / float((r1 - r0) * (c1 - c0))
    return best, compactness


def mock_localize(img: np.ndarray) -> Detection:
    """Bounding box of the largest blob on the more compact side of an Otsu threshold.

    The image is min-max normalized first. Both polarities are segmented and
    the one whose largest component fills more of its own box (area over box
    area) wins; ties go to the bright polarity.

    The confidence is polarity-relative: the blob mean minus the global mean,
    sign-flipped for the dark polarity, over the global std, clamped to [0, 1].
    """
    started = time.perf_counter()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise ValueError("mock_localize needs a finite 2-D image")
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        raise NoStructureError("no structure: image is constant")
    norm = (img - lo) / (hi - lo)
    thresh = filters.threshold_otsu(norm)
    bright = norm > thresh

    candidates = []
    for polarity, mask in (("bright", bright), ("dark", ~bright)):
        found = _largest_component(mask)
        if found is None:
            continue
        region, compactness = found
        candidates.append((compactness, polarity, region))
    if not candidates:
        raise NoStructureError("no structure: threshold produced no components")
    # stable max keeps "bright" on ties
    _, polarity, region = max(candidates, key=lambda c: c[0])

    r0, c0, r1, c1 = region.bbox
    rows, cols = region.coords[:, 0], region.coords[:, 1]
    global_std = float(norm.std())
    sign = 1.0 if polarity == "bright" else -1.0
    score = sign * (float(norm[rows, cols].mean()) - float(norm.mean())) / global_std
    box = BBox(float(c0), float(r0), float(c1), float(r1))
    logger.debug("mock_localize: %s polarity, box %s, area %d", polarity, box.to_list(), region.area)
    return Detection(box, min(max(score, 0.0), 1.0), "mock", time.perf_counter() - started)


# --- HTTP backend ---

def parse_response(payload: Any, shape: Tuple[int, int]) -> Tuple[BBox, float]:
    """Validate a backend reply and clamp its box to the image."""
    if not isinstance(payload, dict) or "bbox" not in payload:
        raise ProtocolError("response has no 'bbox' field", payload)
    coords = payload["bbox"]
    if not isinstance(coords, list) or len(coords) != 4:
        raise ProtocolError("'bbox' must be a list of four numbers", payload)
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) for v in coords):
        raise ProtocolError("'bbox' has a missing or non-numeric coordinate", payload)
    x1, y1, x2, y2 = (float(v) for v in coords)
    if x1 > x2 or y1 > y2:
        raise ProtocolError("'bbox' corners out of order", payload)
    confidence = payload.get("confidence", DEFAULT_CONFIDENCE)
    if confidence is None:
        confidence = DEFAULT_CONFIDENCE
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)) or not 0.0 <= confidence <= 1.0:
        raise ProtocolError("'confidence' must be a number in [0, 1]", payload)
    return BBox(x1, y1, x2, y2).clamp(*shape), float(confidence)


def request_body(pixels: np.ndarray, prompt: Prompt) -> Dict[str, str]:
    return {"image": base64.b64encode(encode_pgm(pixels)).decode("ascii"), "prompt": prompt.text}


def post_detect(body: Dict[str, str], cfg: BackendConfig, session: Optional[requests.Session] = None) -> Any:
    """POST with exponential backoff on connection errors, timeouts and 5xx answers."""
    if session is None:
        with requests.Session() as own:
            return _post_with_retries(body, cfg, own)
    return _post_with_retries(body, cfg, session)


def _post_with_retries(body: Dict[str, str], cfg: BackendConfig, http: requests.Session) -> Any:
    attempts = cfg.retries + 1
    last_error: Optional[Exception] = None
    for attempt in range(attempts):
        try:
            resp = http.post(cfg.endpoint_url, json=body, timeout=cfg.timeout_s)
            if resp.status_code >= 500:
                raise TransportError(f"backend answered HTTP {resp.status_code}")
            if resp.status_code != 200:
                raise ProtocolError(f"backend answered HTTP {resp.status_code}", resp.text)
            try:
                return resp.json()
            except ValueError as e:
                raise ProtocolError(f"response is not JSON: {e}", resp.text) from e
        except ProtocolError:
            raise
        except (requests.RequestException, TransportError) as e:
            last_error = e
            if attempt < attempts - 1:
                delay = cfg.backoff_s * 2 ** attempt
                logger.warning("detect request to %s failed (attempt %d/%d): %s; retrying in %.2fs",
                               cfg.endpoint_url, attempt + 1, attempts, e, delay)
                time.sleep(delay)
    raise TransportError(f"{cfg.endpoint_url}: giving up after {attempts} attempts: {last_error}")


def detect(img: Union[AlignedImage, np.ndarray], cfg: BackendConfig,
           session: Optional[requests.Session] = None) -> Detection:
    pixels = img.pixels if isinstance(img, AlignedImage) else np.asarray(img, dtype=np.float64)
    if pixels.ndim != 2 or not np.all(np.isfinite(pixels)):
        raise ValueError("detect needs a finite 2-D image")
    if cfg.kind == "mock":
        det = mock_localize(pixels)
        return replace(det, backend_id=cfg.backend_id)

    started = time.perf_counter()
    payload = post_detect(request_body(pixels, cfg.prompt), cfg, session)
    box, confidence = parse_response(payload, pixels.shape)
    return Detection(box, confidence, cfg.backend_id, time.perf_counter() - started)


# --- Ensemble ---

def greedy_nms(detections: List[Detection], iou_thresh: float = 0.5) -> List[Detection]:
    """Survivors of greedy NMS, each with support = own confidence + suppressed confidences.

    Order: confidence descending, then lower x1, then lower y1.
    """
    order = sorted(detections, key=lambda d: (-d.confidence, d.box.x1, d.box.y1))
    survivors: List[Detection] = []
    while order:
        keep, rest = order[0], order[1:]
        support = keep.confidence
        order = []
        for other in rest:
            if iou(keep.box, other.box) > iou_thresh:
                support += other.confidence
            else:
                order.append(other)
        survivors.append(replace(keep, support=support))
    return survivors


def _try_detect(img: np.ndarray, cfg: BackendConfig) -> Union[Detection, AirtError]:
    try:
        return detect(img, cfg)
    except AirtError as e:
        return e


def nms_ensemble(stack: LatentStack, cfg: BackendConfig, iou_thresh: float = 0.5, n_jobs: int = 1) -> Detection:
    """Detect on each latent image, then keep the NMS survivor with the most support."""
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_try_detect)(img, cfg) for img in stack.images
    )
    detections = [r for r in results if isinstance(r, Detection)]
    errors = [r for r in results if not isinstance(r, Detection)]
    if not detections:
        raise EnsembleError(errors)
    for e in errors:
        logger.warning("ensemble member failed: %s", e)
    survivors = greedy_nms(detections, iou_thresh)
    winner = max(survivors, key=lambda d: (d.support, d.confidence, -d.box.x1, -d.box.y1))
    return replace(
        winner,
        backend_id=f"nms[{stack.latent_dim}]:{cfg.backend_id}",
        latency_s=sum(d.latency_s for d in detections),
    )
