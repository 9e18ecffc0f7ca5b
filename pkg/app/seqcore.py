"""
seqcore.py

Core data types and file formats shared by every stage of the pipeline:
inspection sequences (.airt), ground-truth labels (JSON), full-precision
images (.aimg) and 8-bit PGM export, plus the per-pixel temporal
standardization the autoencoder trains on.

Raster order is row-major everywhere: pixel index n = y * n_x + x.
Boxes are half-open pixel regions [x1, x2) x [y1, y2); a pixel belongs to a
box when its centre (x + 0.5, y + 0.5) falls inside.
"""
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from PIL import Image

from app.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

SEQUENCE_MAGIC = b"AIRT"
SEQUENCE_VERSION = 1
# magic | version u16 | reserved u16 | n_t u32 | n_y u32 | n_x u32 | frame_rate f32
_SEQ_HEADER = struct.Struct("<4sHHIIIf")
IMAGE_MAGIC = b"AIMG"
_IMG_HEADER = struct.Struct("<4sII")
MAX_SAMPLES = 1 << 34

# --- Domain types ---


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def clamp(self, height: int, width: int) -> "BBox":
        """Clip the box to an image of the given shape."""
        x1 = min(max(self.x1, 0.0), float(width))
        x2 = min(max(self.x2, 0.0), float(width))
        y1 = min(max(self.y1, 0.0), float(height))
        y2 = min(max(self.y2, 0.0), float(height))
        return BBox(x1, y1, x2, y2)

    def overlaps(self, other: "BBox") -> bool:
        ix = min(self.x2, other.x2) - max(self.x1, other.x1)
        iy = min(self.y2, other.y2) - max(self.y1, other.y1)
        return ix > 0 and iy > 0

    def pixel_slices(self, shape: Tuple[int, int]) -> Optional[Tuple[slice, slice]]:
        """Row/column slices of the pixels whose centres lie in the box, or None if empty."""
        height, width = shape
        c0 = min(max(math.ceil(self.x1 - 0.5), 0), width)
        c1 = min(max(math.ceil(self.x2 - 0.5), 0), width)
        r0 = min(max(math.ceil(self.y1 - 0.5), 0), height)
        r1 = min(max(math.ceil(self.y2 - 0.5), 0), height)
        if c1 <= c0 or r1 <= r0:
            return None
        return slice(r0, r1), slice(c0, c1)

    def to_list(self) -> list:
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    @classmethod
    def from_list(cls, values, pointer: str = "") -> "BBox":
        if not isinstance(values, (list, tuple)) or len(values) != 4:
            raise ConfigError("expected [x1, y1, x2, y2]", pointer)
        for i, v in enumerate(values):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError("coordinate must be a number", f"{pointer}/{i}")
        try:
            return cls(*(float(v) for v in values))
        except ValueError as e:
            raise ConfigError(str(e), pointer) from e


@dataclass(frozen=True)
class RoiLabels:
    defect_box: BBox
    sound_box: BBox
    source: str = "manual"

    def __post_init__(self):
        if self.defect_box.overlaps(self.sound_box):
            raise ValueError("defect_box and sound_box overlap")
        if self.sound_box.area < 25:
            raise ValueError(f"sound_box area {self.sound_box.area} < 25 pixels")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "defect_box": self.defect_box.to_list(),
            "sound_box": self.sound_box.to_list(),
            "source": self.source,
        }


@dataclass(eq=False)
class InspectionSequence:
    """Stack of thermograms indexed (k, y, x)."""
    frames: np.ndarray
    frame_rate_hz: float
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be 3-D (n_t, n_y, n_x), got shape {self.frames.shape}")
        n_t, n_y, n_x = self.frames.shape
        if n_t < 2 or n_y < 1 or n_x < 1:
            raise ValueError(f"invalid sequence shape {self.frames.shape}: need n_t >= 2, n_y >= 1, n_x >= 1")
        if not (self.frame_rate_hz > 0 and math.isfinite(self.frame_rate_hz)):
            raise ValueError(f"frame_rate_hz must be > 0, got {self.frame_rate_hz}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("sequence contains non-finite samples")

    @property
    def n_t(self) -> int:
        return self.frames.shape[0]

    @property
    def n_y(self) -> int:
        return self.frames.shape[1]

    @property
    def n_x(self) -> int:
        return self.frames.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.frames.shape


@dataclass(eq=False)
class StandardizedSequence:
    """Per-pixel centred temporal responses, one row per pixel in raster order."""
    signals: np.ndarray
    pixel_means: np.ndarray
    shape: Tuple[int, int, int]

    @property
    def n_pixels(self) -> int:
        return self.signals.shape[0]

    def restore(self) -> np.ndarray:
        """Add the pixel means back and return frames shaped (n_t, n_y, n_x)."""
        n_t, n_y, n_x = self.shape
        full = self.signals + self.pixel_means[:, None]
        return full.T.reshape(n_t, n_y, n_x)


# --- Sequence file format ---

def write_sequence(seq: InspectionSequence, path) -> None:
    """Write the little-endian .airt format: 24-byte header then float32 frames."""
    if seq.n_t < 2:
        raise ValueError("refusing to write a sequence with fewer than 2 frames")
    header = _SEQ_HEADER.pack(
        SEQUENCE_MAGIC, SEQUENCE_VERSION, 0, seq.n_t, seq.n_y, seq.n_x, float(seq.frame_rate_hz)
    )
    payload = seq.frames.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_sequence(path) -> InspectionSequence:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _SEQ_HEADER.size:
        if data[:4] != SEQUENCE_MAGIC[: len(data[:4])]:
            raise FormatError("bad magic, expected 'AIRT'", 0)
        raise FormatError("truncated header", len(data))
    magic, version, _reserved, n_t, n_y, n_x, frame_rate = _SEQ_HEADER.unpack_from(data, 0)
    if magic != SEQUENCE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected 'AIRT'", 0)
    if version != SEQUENCE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n_t < 2:
        raise FormatError(f"n_t = {n_t} < 2", 8)
    if n_y < 1:
        raise FormatError("n_y = 0", 12)
    if n_x < 1:
        raise FormatError("n_x = 0", 16)
    if not (frame_rate > 0 and math.isfinite(frame_rate)):
        raise FormatError(f"invalid frame rate {frame_rate}", 20)
    count = n_t * n_y * n_x
    if count > MAX_SAMPLES:
        raise FormatError(f"dimension overflow: {n_t} x {n_y} x {n_x} samples", 8)
    expected = _SEQ_HEADER.size + 4 * count
    if len(data) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    frames = np.frombuffer(data, dtype="<f4", count=count, offset=_SEQ_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(frames))
    if bad.size:
        raise FormatError("non-finite sample", _SEQ_HEADER.size + 4 * int(bad[0]))
    frames = frames.astype(np.float32).reshape(n_t, n_y, n_x)
    meta = {"source": os.path.basename(str(path))}
    return InspectionSequence(frames=frames, frame_rate_hz=float(frame_rate), meta=meta)


# --- Labels ---

def labels_from_dict(doc: Any) -> RoiLabels:
    if not isinstance(doc, dict):
        raise ConfigError("labels must be a JSON object", "/")
    unknown = set(doc) - {"defect_box", "sound_box", "source"}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError("unknown key", f"/{key}")
    for key in ("defect_box", "sound_box"):
        if key not in doc:
            raise ConfigError("missing required key", f"/{key}")
    source = doc.get("source", "manual")
    if not isinstance(source, str):
        raise ConfigError("source must be a string", "/source")
    defect = BBox.from_list(doc["defect_box"], "/defect_box")
    sound = BBox.from_list(doc["sound_box"], "/sound_box")
    try:
        return RoiLabels(defect, sound, source)
    except ValueError as e:
        raise ConfigError(str(e), "/sound_box") from e


def read_labels(path) -> RoiLabels:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"labels file is not JSON: {e.msg}", e.pos) from e
    return labels_from_dict(doc)


def write_labels(labels: RoiLabels, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(labels.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


# --- Standardization and ROI statistics ---

def standardize(seq: InspectionSequence) -> StandardizedSequence:
    """Subtract each pixel's own temporal mean (computed in float64)."""
    n_t, n_y, n_x = seq.shape
    signals = seq.frames.reshape(n_t, n_y * n_x).T.astype(np.float64)
    means = signals.mean(axis=1)
    return StandardizedSequence(signals=signals - means[:, None], pixel_means=means, shape=(n_t, n_y, n_x))


def extract_roi_stats(img: np.ndarray, roi: BBox) -> Tuple[float, float, int]:
    """Mean, population std and pixel count of the image inside the clamped roi."""
    img = np.asarray(img, dtype=np.float64)
    slices = roi.pixel_slices(img.shape)
    if slices is None:
        raise ValueError(f"roi {roi.to_list()} does not intersect image of shape {img.shape}")
    region = img[slices]
    return float(region.mean()), float(region.std()), int(region.size)


# --- Image export (.aimg sidecar and PGM) ---

def write_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(_IMG_HEADER.pack(IMAGE_MAGIC, h, w))
        f.write(img.astype("<f4").tobytes(order="C"))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _IMG_HEADER.size:
        raise FormatError("truncated image header", len(data))
    magic, h, w = _IMG_HEADER.unpack_from(data, 0)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected 'AIMG'", 0)
    expected = _IMG_HEADER.size + 4 * h * w
    if len(data) != expected:
        raise FormatError(f"image payload size mismatch: expected {expected} bytes, got {len(data)}",
                          min(len(data), expected))
    return np.frombuffer(data, dtype="<f4", offset=_IMG_HEADER.size).astype(np.float32).reshape(h, w)


def normalize_to_uint8(img: np.ndarray) -> np.ndarray:
    """Min-max map to 0..255; a constant image maps to 128."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.full(img.shape, 128, dtype=np.uint8)
    scaled = np.round((img - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    """Binary P5 PGM bytes of the min-max normalized image."""
    buf = io.BytesIO()
    Image.fromarray(normalize_to_uint8(img)).save(buf, format="PPM")
    return buf.getvalue()


def decode_pgm(data: bytes) -> np.ndarray:
    """Pixels of a binary P5 PGM as uint8 (header comments allowed)."""
    if data[:2] != b"P5":
        raise FormatError(f"unsupported PGM magic {data[:2]!r}", 0)
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "PPM" or im.mode != "L":
                raise FormatError(f"expected an 8-bit grayscale PGM, got mode {im.mode}", 0)
            return np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as e:
        raise FormatError(f"unreadable PGM: {e}", 0) from e


def write_pgm(img: np.ndarray, path) -> None:
    Image.fromarray(normalize_to_uint8(img)).save(path, format="PPM")


def load_any_image(path) -> np.ndarray:
    """Read an .aimg sidecar, or a PGM (as float) when that is all there is."""
    path = str(path)
    if path.endswith(".pgm"):
        with open(path, "rb") as f:
            return decode_pgm(f.read()).astype(np.float32)
    return read_image(path)
