"""
Configuration for the thermography toolkit.

Two layers:
- `Config` classes: process settings from the environment (and a project
  `.env` file), selected with AIRT_ENV;
- JSON documents: the run config (training, architecture, backends,
  reducers, bench) and the synth scenario, validated strictly. Every schema
  problem raises ConfigError with the JSON pointer of the offending value.
"""
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from app.adapter import ArchSpec, MaskSpec, TrainConfig
from app.detect import BackendConfig, Prompt
from app.errors import ConfigError
from app.heatsim import SlabSpec, slab_spec_from_dict

# Base directory - project root
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

SCHEMA_VERSION = 1
BENCH_METHODS = ("raw", "tsr", "pct", "adapter-avg", "adapter-max", "adapter-pca", "adapter-nms")


class Config:
    """Base configuration"""
    ENDPOINT = os.environ.get('AIRT_ENDPOINT', '')
    LOG_LEVEL = os.environ.get('AIRT_LOG_LEVEL', 'INFO').upper()
    N_JOBS = int(os.environ.get('AIRT_N_JOBS', 1))
    HTTP_TIMEOUT = float(os.environ.get('AIRT_HTTP_TIMEOUT', 30.0))

    # Stub detection server
    STUB_HOST = os.environ.get('AIRT_STUB_HOST', '127.0.0.1')
    STUB_PORT = int(os.environ.get('AIRT_STUB_PORT', 8000))

    TESTING = False


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('AIRT_LOG_LEVEL', 'DEBUG').upper()


class TestingConfig(Config):
    """Testing configuration"""
    TESTING = True
    N_JOBS = 1


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'default': Config,
}


def get_config(env=None):
    """Get configuration based on environment"""
    if env is None:
        env = os.environ.get('AIRT_ENV', 'default')
    return config.get(env, config['default'])


# --- JSON documents ---

def load_json(path) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e


def _check(value: Any, kind: type, where: str) -> Any:
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__}", where)
    return float(value) if kind is float else value


def _section(doc: Any, pointer: str, schema: Dict[str, type]) -> Dict[str, Any]:
    """Type-check a flat object against `schema`; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", pointer)
    out = {}
    for key, value in doc.items():
        where = f"{pointer}/{key}"
        if key not in schema:
            raise ConfigError("unknown key", where)
        out[key] = _check(value, schema[key], where)
    return out


def _build(cls, kwargs: Dict[str, Any], pointer: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), pointer) from e


def _require_version(doc: Any) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", "/")
    if "schema_version" not in doc:
        raise ConfigError("missing required key", "/schema_version")
    version = _check(doc["schema_version"], int, "/schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}", "/schema_version")


@dataclass(frozen=True)
class ReducerSettings:
    tsr_degree: int = 5
    pct_components: int = 10


@dataclass(frozen=True)
class BenchSettings:
    methods: Tuple[str, ...] = BENCH_METHODS
    iou_thresh: float = 0.5
    n_jobs: int = 1
    failure_budget: float = 0.1

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in BENCH_METHODS]
        if unknown or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {BENCH_METHODS}, got {unknown}")
        if not 0.0 <= self.iou_thresh <= 1.0 or not 0.0 <= self.failure_budget <= 1.0:
            raise ValueError("iou_thresh and failure_budget must be in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    backends: Tuple[BackendConfig, ...] = (BackendConfig(),)
    reducers: ReducerSettings = field(default_factory=ReducerSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    @property
    def backend(self) -> BackendConfig:
        return self.backends[0]

    def with_seed(self, seed: int) -> "RunConfig":
        if seed < 0:
            raise ConfigError("seed must be non-negative", "/seed")
        train = replace(self.train, seed=seed, mask=replace(self.train.mask, seed=seed))
        return replace(self, seed=seed, train=train)

    def with_backend(self, backend: BackendConfig) -> "RunConfig":
        return replace(self, backends=(backend,))

    def to_dict(self) -> Dict[str, Any]:
        """Config echo for reports."""
        def backend_dict(b: BackendConfig) -> Dict[str, Any]:
            return {"kind": b.kind, "endpoint_url": b.endpoint_url, "timeout_s": b.timeout_s,
                    "retries": b.retries, "backoff_s": b.backoff_s, "prompt": b.prompt.text, "name": b.name}

        t = self.train
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "train": {
                "learning_rate": t.learning_rate, "batch_size": t.batch_size, "epochs": t.epochs,
                "latent_dim": t.latent_dim, "max_pixels_per_epoch": t.max_pixels_per_epoch,
                "log_every": t.log_every,
                "mask": {"patch_len": t.mask.patch_len, "mask_ratio": t.mask.mask_ratio,
                         "noise_std": t.mask.noise_std},
            },
            "arch": {k: v for k, v in self.arch.to_dict().items() if k != "latent_dim"},
            "backend": [backend_dict(b) for b in self.backends],
            "reducers": {"tsr_degree": self.reducers.tsr_degree, "pct_components": self.reducers.pct_components},
            "bench": {"methods": list(self.bench.methods), "iou_thresh": self.bench.iou_thresh,
                      "n_jobs": self.bench.n_jobs, "failure_budget": self.bench.failure_budget},
        }


_TRAIN_SCHEMA = {"learning_rate": float, "batch_size": int, "epochs": int, "latent_dim": int,
                 "max_pixels_per_epoch": int, "log_every": int, "mask": dict}
_MASK_SCHEMA = {"patch_len": int, "mask_ratio": float, "noise_std": float}
_ARCH_SCHEMA = {"input_len": int, "channels": list, "kernel_size": int, "stride": int, "se_reduction": int,
                "attention": bool, "decoder_seed_len": int, "leaky_slope": float}
_BACKEND_SCHEMA = {"kind": str, "endpoint_url": str, "timeout_s": float, "retries": int, "backoff_s": float,
                   "prompt": str, "name": str}
_REDUCER_SCHEMA = {"tsr_degree": int, "pct_components": int}
_BENCH_SCHEMA = {"methods": list, "iou_thresh": float, "n_jobs": int, "failure_budget": float}
_RUN_SCHEMA = {"schema_version": int, "seed": int, "train": dict, "arch": dict, "backend": object,
               "reducers": dict, "bench": dict}


def _parse_backend(doc: Any, pointer: str, timeout_default: float) -> BackendConfig:
    kwargs = _section(doc, pointer, _BACKEND_SCHEMA)
    if "prompt" in kwargs:
        kwargs["prompt"] = _build(Prompt, {"text": kwargs["prompt"]}, f"{pointer}/prompt")
    kwargs.setdefault("timeout_s", timeout_default)
    return _build(BackendConfig, kwargs, pointer)


def run_config_from_dict(doc: Any, env_config=None) -> RunConfig:
    env_config = env_config or get_config()
    _require_version(doc)
    top = _section(doc, "", _RUN_SCHEMA)
    seed = top.get("seed", 0)
    if seed < 0:
        raise ConfigError("seed must be non-negative", "/seed")

    train_doc = _section(top.get("train", {}), "/train", _TRAIN_SCHEMA)
    mask_kwargs = _section(train_doc.pop("mask", {}), "/train/mask", _MASK_SCHEMA)
    mask = _build(MaskSpec, dict(mask_kwargs, seed=seed), "/train/mask")
    train = _build(TrainConfig, dict(train_doc, mask=mask, seed=seed), "/train")

    arch_kwargs = _section(top.get("arch", {}), "/arch", _ARCH_SCHEMA)
    if "channels" in arch_kwargs:
        for i, c in enumerate(arch_kwargs["channels"]):
            _check(c, int, f"/arch/channels/{i}")
    arch = _build(ArchSpec, dict(arch_kwargs, latent_dim=train.latent_dim), "/arch")

    backend_doc = top.get("backend", {})
    if isinstance(backend_doc, list):
        if not backend_doc:
            raise ConfigError("expected at least one backend", "/backend")
        backends = tuple(_parse_backend(b, f"/backend/{i}", env_config.HTTP_TIMEOUT)
                         for i, b in enumerate(backend_doc))
    else:
        backends = (_parse_backend(backend_doc, "/backend", env_config.HTTP_TIMEOUT),)

    reducers = _build(ReducerSettings, _section(top.get("reducers", {}), "/reducers", _REDUCER_SCHEMA), "/reducers")
    bench_kwargs = _section(top.get("bench", {}), "/bench", _BENCH_SCHEMA)
    if "methods" in bench_kwargs:
        for i, m in enumerate(bench_kwargs["methods"]):
            _check(m, str, f"/bench/methods/{i}")
        bench_kwargs["methods"] = tuple(bench_kwargs["methods"])
    bench_kwargs.setdefault("n_jobs", env_config.N_JOBS)
    bench = _build(BenchSettings, bench_kwargs, "/bench")

    return RunConfig(SCHEMA_VERSION, seed, train, arch, backends, reducers, bench)


def load_run_config(path: Optional[str] = None, env_config=None) -> RunConfig:
    """Read a run config file; no path means all defaults."""
    if path is None:
        return run_config_from_dict({"schema_version": SCHEMA_VERSION}, env_config)
    return run_config_from_dict(load_json(path), env_config)


@dataclass(frozen=True)
class Scenario:
    n_sequences: int = 25
    seed: int = 0
    slab: SlabSpec = field(default_factory=SlabSpec)


def scenario_from_dict(doc: Any) -> Scenario:
    _require_version(doc)
    top = _section(doc, "", {"schema_version": int, "n_sequences": int, "seed": int, "slab": dict})
    n = top.get("n_sequences", 25)
    if n < 1:
        raise ConfigError("must be >= 1", "/n_sequences")
    seed = top.get("seed", 0)
    if seed < 0:
        raise ConfigError("must be non-negative", "/seed")
    slab = slab_spec_from_dict(top.get("slab", {}), pointer="/slab")
    return Scenario(n, seed, slab)


def load_scenario(path: Optional[str] = None) -> Scenario:
    if path is None:
        return Scenario()
    return scenario_from_dict(load_json(path))
