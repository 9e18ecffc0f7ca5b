"""
adapter.py

The thermography-to-image adapter: a masked denoising autoencoder trained
online on the pixel signals of a single inspection sequence. Each pixel's
temporal response is encoded into `latent_dim` numbers; the latent images are
pooled (avg / max / pca) into one aligned image for the detectors.

Pipeline (`run_adapter`):
    standardize -> resample to arch.input_len -> divide by global RMS
    -> train (mask + noise corruption, MSE against the clean signal, Adam)
    -> latent_stack -> pool

Network (see `build_encoder` / `build_decoder`):
    encoder: [Conv1d -> LeakyReLU -> SqueezeExcite] x len(channels)
             -> SelfAttention -> TemporalMean -> Dense(latent_dim)
    decoder: Dense -> Upsample -> [LeakyReLU -> ConvTranspose1d] x len(channels)
"""
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import skew
from sklearn.decomposition import PCA

from app.errors import DivergenceError, FormatError
from app.layers import (
    Conv1d,
    ConvTranspose1d,
    Dense,
    LeakyReLU,
    Reshape,
    SelfAttention,
    Sequential,
    SqueezeExcite,
    TemporalMean,
    Upsample,
)
from app.optim import Adam
from app.seqcore import InspectionSequence, StandardizedSequence, standardize

logger = logging.getLogger(__name__)

POOLINGS = ("avg", "max", "pca")
CHECKPOINT_MAGIC = b"AVLM"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")
_CKPT_COUNT = struct.Struct("<I")

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 5
LATENT_CHUNK = 1024


@dataclass(frozen=True)
class MaskSpec:
    patch_len: int = 16
    mask_ratio: float = 0.5
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def n_masked(self, n_patches: int) -> int:
        # round half up, always leaving one visible patch
        return min(int(math.floor(self.mask_ratio * n_patches + 0.5)), n_patches - 1)


@dataclass(frozen=True)
class ArchSpec:
    input_len: int = 512
    channels: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 7
    stride: int = 2
    se_reduction: int = 4
    attention: bool = True
    decoder_seed_len: int = 8
    leaky_slope: float = 0.01
    latent_dim: int = 10

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive widths")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.stride < 1 or self.stride - 1 > self.kernel_size // 2:
            raise ValueError("stride must be in [1, kernel_size // 2 + 1]")
        if self.input_len % (self.stride ** len(self.channels)):
            raise ValueError(
                f"input_len {self.input_len} not divisible by stride^{len(self.channels)}")
        if self.decoder_seed_len < 1 or self.token_len % self.decoder_seed_len:
            raise ValueError(
                f"decoder_seed_len {self.decoder_seed_len} must divide token length {self.token_len}")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be >= 1")

    @property
    def token_len(self) -> int:
        return self.input_len // self.stride ** len(self.channels)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["channels"] = list(self.channels)
        return out

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ArchSpec":
        return cls(**doc)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    latent_dim: int = 10
    mask: MaskSpec = field(default_factory=MaskSpec)
    seed: int = 0
    max_pixels_per_epoch: int = 512
    log_every: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.latent_dim < 1 or self.max_pixels_per_epoch < 1:
            raise ValueError("batch_size, latent_dim and max_pixels_per_epoch must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class LatentStack:
    images: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] < 1:
            raise ValueError(f"latent stack must be (l, n_y, n_x), got {self.images.shape}")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("latent stack has non-finite values")

    @property
    def latent_dim(self) -> int:
        return self.images.shape[0]


@dataclass
class AlignedImage:
    pixels: np.ndarray
    pooling: str
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.pixels.ndim != 2:
            raise ValueError(f"aligned image must be 2-D, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("aligned image has non-finite values")


# --- Network ---

def build_encoder(arch: ArchSpec, rng: np.random.Generator) -> Sequential:
    k, s = arch.kernel_size, arch.stride
    layers = [Reshape((1, arch.input_len))]
    c_prev = 1
    for c in arch.channels:
        layers += [
            Conv1d(c_prev, c, k, s, k // 2, rng),
            LeakyReLU(arch.leaky_slope),
            SqueezeExcite(c, arch.se_reduction, rng, arch.leaky_slope),
        ]
        c_prev = c
    if arch.attention:
        layers.append(SelfAttention(c_prev, rng))
    layers += [TemporalMean(), Dense(c_prev, arch.latent_dim, rng)]
    return Sequential(layers)


def build_decoder(arch: ArchSpec, rng: np.random.Generator) -> Sequential:
    k, s = arch.kernel_size, arch.stride
    widths = list(reversed(arch.channels)) + [1]
    layers = [
        Dense(arch.latent_dim, widths[0] * arch.decoder_seed_len, rng),
        Reshape((widths[0], arch.decoder_seed_len)),
        Upsample(arch.token_len // arch.decoder_seed_len),
    ]
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        layers += [
            LeakyReLU(arch.leaky_slope),
            ConvTranspose1d(c_in, c_out, k, s, k // 2, s - 1, rng),
        ]
    layers.append(Reshape((arch.input_len,)))
    return Sequential(layers)


class AdapterModel:
    """Encoder f_theta and decoder g_phi plus the input amplitude scale they were trained at."""

    def __init__(self, arch: ArchSpec, encoder: Sequential, decoder: Sequential, input_scale: float = 1.0):
        self.arch = arch
        self.encoder = encoder
        self.decoder = decoder
        self.input_scale = float(input_scale)

    @classmethod
    def initialize(cls, arch: ArchSpec, rng: np.random.Generator, input_scale: float = 1.0) -> "AdapterModel":
        return cls(arch, build_encoder(arch, rng), build_decoder(arch, rng), input_scale)

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    @property
    def encoder_params(self) -> np.ndarray:
        return self.encoder.flat()

    @property
    def decoder_params(self) -> np.ndarray:
        return self.decoder.flat()

    def n_params(self) -> int:
        return self.encoder.n_params() + self.decoder.n_params()

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_parameters()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.named_parameters()})
        return out

    def grads(self) -> Dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_grads()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.named_grads()})
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([self.encoder.flat(), self.decoder.flat()])

    def load_flat(self, vector: np.ndarray) -> None:
        n_enc = self.encoder.n_params()
        self.encoder.load_flat(vector[:n_enc])
        self.decoder.load_flat(vector[n_enc:])

    def freeze(self) -> None:
        """Round parameters through float32 so the model equals its checkpoint."""
        for p in self.parameters().values():
            p[...] = p.astype(np.float32).astype(np.float64)

    def encode_batch(self, signals: np.ndarray) -> np.ndarray:
        signals = np.asarray(signals, dtype=np.float64)
        if signals.ndim != 2 or signals.shape[1] != self.arch.input_len:
            raise ValueError(f"expected signals of length {self.arch.input_len}, got shape {signals.shape}")
        return self.encoder.forward(signals)

    def decode_batch(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of size {self.latent_dim}, got shape {latents.shape}")
        return self.decoder.forward(latents)


def encode(model: AdapterModel, signal: np.ndarray) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError("encode takes a single 1-D signal")
    return model.encode_batch(signal[None, :])[0]


def decode(model: AdapterModel, latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 1:
        raise ValueError("decode takes a single 1-D latent vector")
    return model.decode_batch(latent[None, :])[0]


# --- Corruption ---

def corrupt_batch(signals: np.ndarray, mask: MaskSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Zero whole patches and add Gaussian noise scaled by each signal's own std."""
    signals = np.asarray(signals, dtype=np.float64)
    b, n = signals.shape
    n_patches = -(-n // mask.patch_len)
    n_masked = mask.n_masked(n_patches)
    patch_bits = np.ones((b, n_patches))
    if n_masked > 0:
        hidden = np.argsort(rng.random((b, n_patches)), axis=1)[:, :n_masked]
        np.put_along_axis(patch_bits, hidden, 0.0, axis=1)
    bits = np.repeat(patch_bits, mask.patch_len, axis=1)[:, :n]
    corrupted = bits * signals
    if mask.noise_std > 0:
        sigma = mask.noise_std * signals.std(axis=1, keepdims=True)
        corrupted = corrupted + sigma * rng.standard_normal((b, n))
    return corrupted, bits


def corrupt(signal: np.ndarray, mask: MaskSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    signal = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(signal)):
        raise ValueError("signal has non-finite samples")
    corrupted, bits = corrupt_batch(signal[None, :], mask, rng)
    return corrupted[0], bits[0]


# --- Preprocessing ---

def resample_signals(signals: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of each row onto `length` evenly spaced samples."""
    n = signals.shape[1]
    if n == length:
        return signals.copy()
    pos = np.linspace(0.0, n - 1, length)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    w = pos - i0
    return signals[:, i0] * (1.0 - w) + signals[:, i0 + 1] * w


def network_inputs(std_seq: StandardizedSequence, arch: ArchSpec) -> np.ndarray:
    return resample_signals(std_seq.signals, arch.input_len)


def rms_scale(signals: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(signals ** 2)))
    return rms if rms > 0 else 1.0


# --- Training ---

def train(std_seq: StandardizedSequence, cfg: TrainConfig,
          arch: Optional[ArchSpec] = None) -> Tuple[AdapterModel, List[float]]:
    arch = replace(arch or ArchSpec(), latent_dim=cfg.latent_dim)
    if std_seq.n_pixels < cfg.batch_size:
        raise ValueError(f"{std_seq.n_pixels} pixels is fewer than batch_size {cfg.batch_size}")
    X = network_inputs(std_seq, arch)
    scale = rms_scale(X)
    X = X / scale

    rng = np.random.default_rng(cfg.seed)
    mask_rng = np.random.default_rng([cfg.seed, cfg.mask.seed])
    model = AdapterModel.initialize(arch, rng, input_scale=scale)
    history: List[float] = []
    if cfg.epochs == 0:
        model.freeze()
        return model, history

    params = model.parameters()
    opt = Adam(lr=cfg.learning_rate)
    n_pick = min(cfg.max_pixels_per_epoch, X.shape[0])
    started = time.perf_counter()
    above = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(X.shape[0])[:n_pick]
        total, count = 0.0, 0
        for start in range(0, n_pick, cfg.batch_size):
            clean = X[order[start:start + cfg.batch_size]]
            noisy, _ = corrupt_batch(clean, cfg.mask, mask_rng)
            recon = model.decoder.forward(model.encoder.forward(noisy))
            diff = recon - clean
            loss = float(np.mean(diff ** 2))
            dz = model.decoder.backward(2.0 * diff / diff.size)
            model.encoder.backward(dz)
            opt.step(params, model.grads())
            total += loss * clean.shape[0]
            count += clean.shape[0]
            logger.debug("epoch %d batch %d loss %.6g", epoch, start // cfg.batch_size, loss)
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise DivergenceError(f"training loss is {epoch_loss} at epoch {epoch}", epoch)
        history.append(epoch_loss)
        above = above + 1 if epoch_loss > DIVERGENCE_FACTOR * history[0] else 0
        if above >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"loss above {DIVERGENCE_FACTOR}x initial for {above} epochs at epoch {epoch}", epoch)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            logger.info("epoch %d/%d loss %.6g (%.1fs)", epoch + 1, cfg.epochs, epoch_loss,
                        time.perf_counter() - started)
    model.freeze()
    return model, history


def latent_stack(model: AdapterModel, std_seq: StandardizedSequence) -> LatentStack:
    _, n_y, n_x = std_seq.shape
    X = network_inputs(std_seq, model.arch) / model.input_scale
    chunks = [model.encode_batch(X[i:i + LATENT_CHUNK]) for i in range(0, X.shape[0], LATENT_CHUNK)]
    Z = np.concatenate(chunks, axis=0)
    return LatentStack(Z.T.reshape(model.latent_dim, n_y, n_x).copy())


# --- Pooling ---

def pool(stack: LatentStack, op: str) -> AlignedImage:
    images = stack.images
    if op == "avg":
        pixels = images.mean(axis=0)
    elif op == "max":
        pixels = images.max(axis=0)
    elif op == "pca":
        l, n_y, n_x = images.shape
        X = images.reshape(l, n_y * n_x).T
        proj = PCA(n_components=1, svd_solver="full").fit_transform(X)[:, 0]
        if np.nan_to_num(skew(proj)) < 0:
            proj = -proj
        pixels = proj.reshape(n_y, n_x)
    else:
        raise ValueError(f"unknown pooling {op!r}; expected one of {POOLINGS}")
    return AlignedImage(np.ascontiguousarray(pixels, dtype=np.float64), op, {"latent_dim": stack.latent_dim})


# --- End to end ---

@dataclass
class AdapterFit:
    model: AdapterModel
    stack: LatentStack
    history: List[float]
    provenance: Dict[str, Any]

    def pooled(self, op: str) -> AlignedImage:
        image = pool(self.stack, op)
        image.provenance = dict(self.provenance, pooling=op)
        return image


def fit_adapter(seq: InspectionSequence, cfg: TrainConfig, arch: Optional[ArchSpec] = None) -> AdapterFit:
    """Train once on a sequence and keep the latent stack for any pooling."""
    started = time.perf_counter()
    std_seq = standardize(seq)
    model, history = train(std_seq, cfg, arch)
    stack = latent_stack(model, std_seq)
    provenance = {
        "method": "adapter",
        "arch": model.arch.to_dict(),
        "mask": asdict(cfg.mask),
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "max_pixels_per_epoch": cfg.max_pixels_per_epoch,
        "seed": cfg.seed,
        "resample": f"linear {seq.n_t} -> {model.arch.input_len}",
        "input_scale": model.input_scale,
        "loss_first": history[0] if history else None,
        "loss_last": history[-1] if history else None,
        "train_seconds": round(time.perf_counter() - started, 3),
    }
    logger.info("adapter fitted on %s: %d epochs, loss %s -> %s", seq.meta.get("source", "sequence"),
                cfg.epochs, provenance["loss_first"], provenance["loss_last"])
    return AdapterFit(model, stack, history, provenance)


def run_adapter(seq: InspectionSequence, cfg: TrainConfig, pooling: str = "avg",
                arch: Optional[ArchSpec] = None) -> AlignedImage:
    if pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    return fit_adapter(seq, cfg, arch).pooled(pooling)


# --- Checkpoint ---

def save_model(model: AdapterModel, path) -> None:
    """AVLM: magic, u16 version, u32 json length, json header, u32 count, float32 params."""
    header = json.dumps({"arch": model.arch.to_dict(), "input_scale": model.input_scale},
                        sort_keys=True).encode("utf-8")
    vector = model.flat().astype("<f4")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(_CKPT_COUNT.pack(vector.size))
        f.write(vector.tobytes())


def load_model(path) -> AdapterModel:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    magic, version, n_json = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = _CKPT_HEADER.size
    if len(data) < pos + n_json + _CKPT_COUNT.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    try:
        doc = json.loads(data[pos:pos + n_json].decode("utf-8"))
        arch = ArchSpec.from_dict(doc["arch"])
        scale = float(doc["input_scale"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad checkpoint header: {e}", offset=pos) from e
    pos += n_json
    (count,) = _CKPT_COUNT.unpack_from(data, pos)
    pos += _CKPT_COUNT.size
    model = AdapterModel.initialize(arch, np.random.default_rng(0), input_scale=scale)
    if count != model.n_params():
        raise FormatError(f"checkpoint has {count} parameters, architecture needs {model.n_params()}",
                          offset=pos - _CKPT_COUNT.size)
    if len(data) != pos + 4 * count:
        raise FormatError(f"expected {pos + 4 * count} bytes, file has {len(data)}", offset=len(data))
    model.load_flat(np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float64))
    return model
