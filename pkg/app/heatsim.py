"""
heatsim.py

Synthetic active-thermography sequences from an explicit (FTCS) finite
difference solution of transient heat conduction in a slab.

Model assumptions:
- unit volumetric heat capacity, so temperature times cell volume is energy;
- isotropic diffusivity per cell, defects scale it down (delaminations);
- adiabatic (zero-flux) faces everywhere, no convection or radiation;
- the camera always looks at the front face (z = 0); "front" modes heat
  that face (reflection), "back" modes heat z = nz - 1 (transmission).

Frame 0 is the pre-excitation state. The flux form of the update (harmonic
mean diffusivity on every interior face) makes the scheme conservative: with
no source active the total energy only moves by rounding.
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.errors import ConfigError, NumericError, StabilityError
from app.seqcore import BBox, InspectionSequence, RoiLabels, write_labels, write_sequence

logger = logging.getLogger(__name__)

MODES = ("flash_front", "long_pulse_front", "flash_back", "long_pulse_back")
ENERGY_BUDGET = 1e-3
SAFETY = 0.9

# --- Scenario types ---


@dataclass(frozen=True)
class DefectSpec:
    box3d: Tuple[int, int, int, int, int, int]
    alpha_scale: float = 0.1

    def __post_init__(self):
        if len(self.box3d) != 6:
            raise ValueError("box3d must be (x1, y1, z1, x2, y2, z2)")
        if not 0 < self.alpha_scale <= 1:
            raise ValueError(f"alpha_scale must be in (0, 1], got {self.alpha_scale}")
        x1, y1, z1, x2, y2, z2 = self.box3d
        if x1 >= x2 or y1 >= y2 or z1 >= z2:
            raise ValueError(f"empty defect box {self.box3d}")


@dataclass(frozen=True)
class ExcitationSpec:
    mode: str = "flash_front"
    pulse_duration_s: float = 2.0
    fluence: float = 8e-3
    nonuniformity: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown excitation mode {self.mode!r}; expected one of {MODES}")
        if self.nonuniformity < 0 or self.noise_std < 0:
            raise ValueError("nonuniformity and noise_std must be >= 0")
        if self.pulse_duration_s <= 0:
            raise ValueError("pulse_duration_s must be > 0")

    @property
    def is_flash(self) -> bool:
        return self.mode.startswith("flash")

    @property
    def heats_front(self) -> bool:
        return self.mode.endswith("front")


@dataclass(frozen=True)
class SlabSpec:
    nx: int = 64
    ny: int = 64
    nz: int = 10
    dx: float = 1.2e-3
    dy: float = 1.2e-3
    dz: float = 4e-4
    alpha_base: float = 4e-7
    defects: Tuple[DefectSpec, ...] = ()
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    duration_s: float = 20.0
    frame_rate_hz: float = 25.0
    seed: int = 0
    ambient_k: float = 293.15
    dt_s: Optional[float] = None

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("all grid dimensions must be >= 1")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("cell sizes must be > 0")
        if self.alpha_base <= 0:
            raise ValueError("alpha_base must be > 0")
        if self.duration_s <= 0 or self.frame_rate_hz <= 0:
            raise ValueError("duration_s and frame_rate_hz must be > 0")
        for d in self.defects:
            x1, y1, z1, x2, y2, z2 = d.box3d
            if x1 < 0 or y1 < 0 or z1 < 0 or x2 > self.nx or y2 > self.ny or z2 > self.nz:
                raise ValueError(f"defect {d.box3d} lies outside the {self.nx}x{self.ny}x{self.nz} slab")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.frame_rate_hz)) + 1

    def max_stable_dt(self) -> float:
        """Explicit 3-D FTCS bound min(d)^2 / (6 alpha_max)."""
        alpha_max = self.alpha_base * max([1.0] + [d.alpha_scale for d in self.defects])
        return min(self.dx, self.dy, self.dz) ** 2 / (6.0 * alpha_max)

    def time_step(self) -> Tuple[float, int]:
        """(dt, substeps per frame); frame interval is split into equal substeps."""
        limit = self.max_stable_dt()
        if self.dt_s is not None:
            if self.dt_s > limit:
                raise StabilityError(self.dt_s, limit)
            target = self.dt_s
        else:
            target = SAFETY * limit
        interval = 1.0 / self.frame_rate_hz
        substeps = max(1, math.ceil(interval / target - 1e-12))
        return interval / substeps, substeps


# --- Solver ---

def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


class HeatSolver:
    """Explicit conservative FTCS stepping of T[z, y, x]."""

    def __init__(self, spec: SlabSpec, dt: float):
        self.spec = spec
        self.dt = dt
        alpha = np.full((spec.nz, spec.ny, spec.nx), spec.alpha_base, dtype=np.float64)
        for d in spec.defects:
            x1, y1, z1, x2, y2, z2 = d.box3d
            alpha[z1:z2, y1:y2, x1:x2] *= d.alpha_scale
        self.alpha = alpha
        # face diffusivities divided by the squared spacing
        self.kx = _harmonic(alpha[:, :, 1:], alpha[:, :, :-1]) / spec.dx ** 2
        self.ky = _harmonic(alpha[:, 1:, :], alpha[:, :-1, :]) / spec.dy ** 2
        self.kz = _harmonic(alpha[1:, :, :], alpha[:-1, :, :]) / spec.dz ** 2
        self.T = np.full(alpha.shape, spec.ambient_k, dtype=np.float64)

    def step(self, source: Optional[np.ndarray] = None) -> None:
        """Advance one dt; `source` is a temperature increment added to the field."""
        T = self.T
        dT = np.zeros_like(T)
        if T.shape[2] > 1:
            fx = self.kx * (T[:, :, 1:] - T[:, :, :-1])
            dT[:, :, :-1] += fx
            dT[:, :, 1:] -= fx
        if T.shape[1] > 1:
            fy = self.ky * (T[:, 1:, :] - T[:, :-1, :])
            dT[:, :-1, :] += fy
            dT[:, 1:, :] -= fy
        if T.shape[0] > 1:
            fz = self.kz * (T[1:, :, :] - T[:-1, :, :])
            dT[:-1, :, :] += fz
            dT[1:, :, :] -= fz
        T += self.dt * dT
        if source is not None:
            T += source

    def total_energy(self) -> float:
        s = self.spec
        return float(self.T.sum()) * s.dx * s.dy * s.dz

    def surface(self) -> np.ndarray:
        return self.T[0].copy()


def heating_envelope(spec: SlabSpec, rng: np.random.Generator) -> np.ndarray:
    """Low-order cosine envelope in [1 - nu, 1 + nu] with a seeded phase."""
    nu = spec.excitation.nonuniformity
    phase_x, phase_y = rng.uniform(0.0, 2.0 * np.pi, size=2)
    xs = (np.arange(spec.nx) + 0.5) / spec.nx
    ys = (np.arange(spec.ny) + 0.5) / spec.ny
    env = 0.5 * np.cos(np.pi * xs[None, :] + phase_x) + 0.5 * np.cos(np.pi * ys[:, None] + phase_y)
    return 1.0 + nu * env


# --- Simulation ---

def _defect_footprint(d: DefectSpec) -> BBox:
    x1, y1, _z1, x2, y2, _z2 = d.box3d
    return BBox(float(x1), float(y1), float(x2), float(y2))


def choose_sound_box(defect: BBox, nx: int, ny: int, margin: int = 2) -> BBox:
    """Pick a defect-free square in the image corner farthest from the defect.

    The square starts at the defect's size (at least 6, at most a third of the
    image) and shrinks down to 5x5 until some corner clears the defect.
    """
    largest = max(int(min(max(6, min(defect.width, defect.height)), nx // 3, ny // 3)), 5)
    cx, cy = defect.center
    guard = BBox(max(defect.x1 - margin, 0), max(defect.y1 - margin, 0), defect.x2 + margin, defect.y2 + margin)
    for side in range(largest, 4, -1):
        pad = margin if side <= min(nx, ny) - 2 * margin else 0
        corners = [
            (pad, pad),
            (nx - pad - side, pad),
            (pad, ny - pad - side),
            (nx - pad - side, ny - pad - side),
        ]
        ranked = sorted(corners, key=lambda c: -((c[0] + side / 2 - cx) ** 2 + (c[1] + side / 2 - cy) ** 2))
        for x, y in ranked:
            if x < 0 or y < 0:
                continue
            box = BBox(float(x), float(y), float(x + side), float(y + side))
            if not box.overlaps(guard):
                return box
    raise ValueError(f"no defect-free sound region available around defect {defect.to_list()}")


def simulate(spec: SlabSpec) -> Tuple[InspectionSequence, RoiLabels]:
    """Run the slab simulation and return surface frames plus ground-truth labels."""
    dt, substeps = spec.time_step()
    rng = np.random.default_rng(spec.seed)
    solver = HeatSolver(spec, dt)
    exc = spec.excitation
    env = heating_envelope(spec, rng)
    heated = 0 if exc.heats_front else spec.nz - 1

    # energy per unit area deposited into one cell layer, as a temperature increment
    if exc.is_flash:
        pulse_steps = 1
        per_step = exc.fluence / spec.dz
    else:
        pulse_steps = max(1, int(round(exc.pulse_duration_s / dt)))
        if exc.pulse_duration_s < dt:
            raise ValueError(f"pulse_duration_s {exc.pulse_duration_s} shorter than one time step ({dt:.4g} s)")
        per_step = exc.fluence / spec.dz / pulse_steps
    source = np.zeros_like(solver.T)
    source[heated] = per_step * env

    n_frames = spec.n_frames
    frames = np.empty((n_frames, spec.ny, spec.nx), dtype=np.float64)
    frames[0] = solver.surface()
    steps_done = 0
    energy_after_pulse = None
    for k in range(1, n_frames):
        for _ in range(substeps):
            solver.step(source if steps_done < pulse_steps else None)
            steps_done += 1
            if steps_done == pulse_steps:
                energy_after_pulse = solver.total_energy()
        frames[k] = solver.surface()

    if not np.all(np.isfinite(solver.T)):
        raise NumericError("temperature field became non-finite")
    if energy_after_pulse is not None and steps_done > pulse_steps:
        excess_ref = energy_after_pulse - spec.ambient_k * solver.T.size * spec.dx * spec.dy * spec.dz
        drift = abs(solver.total_energy() - energy_after_pulse)
        scale = max(abs(excess_ref), 1e-300)
        if drift / scale > ENERGY_BUDGET:
            raise NumericError(f"energy drift {drift / scale:.3e} exceeds the {ENERGY_BUDGET:.1%} budget")
        logger.debug("energy drift after pulse: %.3e", drift / scale)

    if exc.noise_std > 0:
        frames += rng.normal(0.0, exc.noise_std, size=frames.shape)

    meta = {"mode": exc.mode, "seed": str(spec.seed), "dt_s": f"{dt:.6g}"}
    seq = InspectionSequence(frames=frames.astype(np.float32), frame_rate_hz=spec.frame_rate_hz, meta=meta)

    if spec.defects:
        shallowest = min(spec.defects, key=lambda d: d.box3d[2])
        defect_box = _defect_footprint(shallowest)
    else:
        # defect-free runs still need labels; use a central placeholder footprint
        w, h = max(spec.nx // 4, 1), max(spec.ny // 4, 1)
        x0, y0 = (spec.nx - w) // 2, (spec.ny - h) // 2
        defect_box = BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))
    labels = RoiLabels(defect_box, choose_sound_box(defect_box, spec.nx, spec.ny), source="heatsim")
    logger.info("simulated %s: %d frames, dt=%.4g s x %d substeps", exc.mode, n_frames, dt, substeps)
    return seq, labels


# --- Benchmark suite ---

DEFECT_CLASSES = {
    # shallow, strongly insulating (15 J impact analogue)
    "strong": {"depth": (1, 3), "thickness": 2, "alpha_scale": 0.05, "side": (14, 20)},
    # deeper, weaker (5 J impact analogue)
    "weak": {"depth": (3, 5), "thickness": 2, "alpha_scale": 0.2, "side": (12, 16)},
}
CONDITIONS = {
    "ambient": {"ambient_k": 293.15, "alpha_factor": 1.0, "noise_std": 0.02},
    # low-temperature analogue: colder start, slower diffusion, noisier camera
    "cold": {"ambient_k": 203.15, "alpha_factor": 0.85, "noise_std": 0.03},
}


def suite_member(index: int, seed: int, base: Optional[SlabSpec] = None) -> Tuple[SlabSpec, Dict[str, str]]:
    """Deterministic spec for suite member `index`: modes cycle first, then class and condition."""
    base = base or SlabSpec()
    rng = np.random.default_rng([seed, index])
    mode = MODES[index % len(MODES)]
    defect_class = ("strong", "weak")[(index // len(MODES)) % 2]
    condition = ("ambient", "cold")[(index // (2 * len(MODES))) % 2]
    cls = DEFECT_CLASSES[defect_class]
    cond = CONDITIONS[condition]

    side = int(rng.integers(cls["side"][0], cls["side"][1] + 1))
    side = min(side, base.nx // 2, base.ny // 2)
    lo_x, hi_x = base.nx // 4, max(base.nx // 4 + 1, base.nx - base.nx // 4 - side)
    lo_y, hi_y = base.ny // 4, max(base.ny // 4 + 1, base.ny - base.ny // 4 - side)
    x1 = int(rng.integers(lo_x, hi_x))
    y1 = int(rng.integers(lo_y, hi_y))
    z1 = int(rng.integers(cls["depth"][0], cls["depth"][1] + 1))
    z1 = min(z1, base.nz - 1)
    z2 = min(z1 + cls["thickness"], base.nz)
    defect = DefectSpec((x1, y1, z1, x1 + side, y1 + side, z2), alpha_scale=cls["alpha_scale"])

    excitation = replace(
        base.excitation,
        mode=mode,
        noise_std=cond["noise_std"],
        nonuniformity=float(rng.uniform(0.05, 0.2)),
    )
    spec = replace(
        base,
        defects=(defect,),
        excitation=excitation,
        ambient_k=cond["ambient_k"],
        alpha_base=base.alpha_base * cond["alpha_factor"],
        seed=int(rng.integers(0, 2 ** 63 - 1)),
    )
    info = {"mode": mode, "defect_class": defect_class, "condition": condition}
    return spec, info


def make_benchmark_suite(n_sequences: int, seed: int, out_dir, base: Optional[SlabSpec] = None) -> List[Dict[str, str]]:
    """Simulate and write `n_sequences` labelled sequences; returns manifest entries."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_sequences):
        spec, info = suite_member(i, seed, base)
        seq, labels = simulate(spec)
        seq_id = f"seq_{i:03d}"
        seq_name, labels_name = f"{seq_id}.airt", f"{seq_id}.labels.json"
        write_sequence(seq, os.path.join(out_dir, seq_name))
        write_labels(labels, os.path.join(out_dir, labels_name))
        entries.append({"id": seq_id, "sequence": seq_name, "labels": labels_name, **info})
        logger.info("suite %s: %s / %s / %s", seq_id, info["mode"], info["defect_class"], info["condition"])
    return entries


def slab_spec_from_dict(doc: Dict, base: Optional[SlabSpec] = None, pointer: str = "/slab") -> SlabSpec:
    """Apply a JSON override object onto a SlabSpec (unknown keys rejected)."""
    base = base or SlabSpec()
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", pointer)
    scalar = {"nx": int, "ny": int, "nz": int, "dx": float, "dy": float, "dz": float, "alpha_base": float,
              "duration_s": float, "frame_rate_hz": float, "seed": int, "ambient_k": float, "dt_s": float}
    kwargs = {}
    for key, value in doc.items():
        where = f"{pointer}/{key}"
        if key in scalar:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or \
                    (scalar[key] is int and not isinstance(value, int)):
                raise ConfigError(f"expected {scalar[key].__name__}", where)
            kwargs[key] = scalar[key](value)
        elif key == "excitation":
            if not isinstance(value, dict):
                raise ConfigError("expected an object", where)
            allowed = {"mode", "pulse_duration_s", "fluence", "nonuniformity", "noise_std"}
            bad = set(value) - allowed
            if bad:
                raise ConfigError("unknown key", f"{where}/{sorted(bad)[0]}")
            try:
                kwargs[key] = replace(base.excitation, **value)
            except (TypeError, ValueError) as e:
                raise ConfigError(str(e), where) from e
        elif key == "defects":
            if not isinstance(value, list):
                raise ConfigError("expected a list", where)
            defects = []
            for i, d in enumerate(value):
                if not isinstance(d, dict) or set(d) - {"box3d", "alpha_scale"} or "box3d" not in d:
                    raise ConfigError("expected {box3d, alpha_scale}", f"{where}/{i}")
                try:
                    defects.append(DefectSpec(tuple(int(v) for v in d["box3d"]), float(d.get("alpha_scale", 0.1))))
                except (TypeError, ValueError) as e:
                    raise ConfigError(str(e), f"{where}/{i}") from e
            kwargs[key] = tuple(defects)
        else:
            raise ConfigError("unknown key", where)
    try:
        return replace(base, **kwargs)
    except ValueError as e:
        raise ConfigError(str(e), pointer) from e
