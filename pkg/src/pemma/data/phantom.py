"""Synthetic head-and-neck style CT/PET phantoms with multi-center shifts.

Lesions are faint in CT and bright in PET, so PET carries most of the
segmentation signal.  Survival risk grows with total lesion volume and with
two clinical fields (HPV negative, tobacco use).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from pemma.data.types import LYMPH, TUMOR, Case, SurvivalRecord, Volume
from pemma.exceptions import ConfigError, DataError
from pemma.rng import Rng

CENTERS = ("A", "B", "C", "D", "E", "F", "G")
MAX_PLACEMENT_TRIES = 200


@dataclass
class CenterShift:
    intensity_offset: float = 0.0
    noise_scale: float = 1.0
    size_bias: float = 0.0


# center G gets the largest gap, like the hardest unseen center
CENTER_SHIFTS = {
    "A": CenterShift(0.0, 1.0, 0.0),
    "B": CenterShift(10.0, 0.9, 0.5),
    "C": CenterShift(-10.0, 1.1, -0.5),
    "D": CenterShift(5.0, 1.0, 0.0),
    "E": CenterShift(0.0, 1.0, 0.0),
    "F": CenterShift(-5.0, 1.2, 0.3),
    "G": CenterShift(20.0, 1.6, -0.3),
}


@dataclass
class PhantomSpec:
    side: int = 32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_tumor: tuple[int, int] = (1, 1)
    n_lymph: tuple[int, int] = (1, 2)
    tumor_radius: tuple[float, float] = (4.0, 7.0)
    lymph_radius: tuple[float, float] = (2.0, 4.0)
    ct_tissue: float = 40.0
    ct_contrast: float = 40.0
    ct_noise: float = 20.0
    ct_texture: float = 30.0
    pet_background: float = 0.3
    pet_tumor: float = 10.0
    pet_lymph: float = 5.0
    pet_noise: float = 0.3
    shift: CenterShift = field(default_factory=CenterShift)
    with_pet: bool = True
    censor_fraction: float = 0.7
    base_rate: float = 1.0 / 30.0
    burden_weight: float = 2.0
    ehr_weight: float = 2.0
    ehr_missing: float = 0.1

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = CenterShift(**self.shift)
        self.spacing = tuple(float(s) for s in self.spacing)
        for name in ("n_tumor", "n_lymph", "tumor_radius", "lymph_radius"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a nondecreasing nonnegative range")
            setattr(self, name, (lo, hi))
        r_max = max(self.tumor_radius[1], self.lymph_radius[1]) + abs(self.shift.size_bias)
        if 2 * r_max + 2 > self.side * 0.6:
            raise ConfigError(f"lesion radius {r_max} does not fit a side-{self.side} volume")
        if self.pet_tumor <= 0 or self.pet_lymph <= 0:
            raise ConfigError("PET gains must be positive")
        if not 0.0 <= self.censor_fraction < 1.0:
            raise ConfigError("censor_fraction must lie in [0, 1)")
        if self.ct_noise < 0 or self.pet_noise < 0 or self.shift.noise_scale <= 0:
            raise ConfigError("noise levels must be nonnegative")

    def for_center(self, center: str) -> "PhantomSpec":
        if center not in CENTER_SHIFTS:
            raise ConfigError(f"unknown center {center!r}")
        return replace(self, shift=CENTER_SHIFTS[center])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Lesion:
    label: int
    center: tuple[float, float, float]
    radius: float
    gain: float


def ball_mask(shape, center, radius: float) -> np.ndarray:
    idx = np.indices(shape, dtype=np.float64)
    d2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return d2 <= radius * radius


def _smooth_field(rng: Rng, coords: np.ndarray, side: int, amplitude: float, bumps: int = 6) -> np.ndarray:
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    if amplitude == 0:
        return out
    for _ in range(bumps):
        c = rng.uniform(0.2 * side, 0.8 * side, size=3)
        sigma = rng.uniform(0.12, 0.3) * side
        amp = rng.uniform(-amplitude, amplitude)
        d2 = sum((coords[a] - c[a]) ** 2 for a in range(3))
        out += amp * np.exp(-d2 / (2 * sigma * sigma))
    return out


def _place_lesions(rng: Rng, spec: PhantomSpec) -> list[Lesion]:
    side = spec.side
    lesions: list[Lesion] = []
    plan = [(TUMOR, spec.tumor_radius, spec.pet_tumor)] * int(rng.integers(spec.n_tumor[0], spec.n_tumor[1] + 1))
    plan += [(LYMPH, spec.lymph_radius, spec.pet_lymph)] * int(rng.integers(spec.n_lymph[0], spec.n_lymph[1] + 1))
    for label, (r_lo, r_hi), gain in plan:
        radius = max(1.0, rng.uniform(r_lo, r_hi) + spec.shift.size_bias)
        for _ in range(MAX_PLACEMENT_TRIES):
            lo = max(radius + 1.0, 0.22 * side)
            hi = min(side - radius - 2.0, 0.78 * side)
            c = tuple(float(v) for v in rng.uniform(lo, hi, size=3))
            clash = any(
                o.label != label and math.dist(c, o.center) <= o.radius + radius + 1.0 for o in lesions
            )
            if not clash:
                lesions.append(Lesion(label, c, radius, gain * rng.uniform(0.8, 1.2)))
                break
        else:
            raise DataError(f"could not place a class-{label} lesion without overlapping another class")
    return lesions


def _sample_ehr(rng: Rng, missing: float) -> tuple[dict, dict]:
    """(observed record with missing fields dropped, complete hidden record)."""
    full = {
        "gender": "female" if rng.random() < 0.2 else "male",
        "age": float(np.round(rng.normal(size=(), mean=60.0, std=9.0))),
        "weight": float(np.round(rng.normal(size=(), mean=80.0, std=14.0))),
        "tobacco": bool(rng.random() < 0.5),
        "alcohol": bool(rng.random() < 0.5),
        "hpv": bool(rng.random() < 0.5),
        "surgery": bool(rng.random() < 0.3),
        "chemotherapy": bool(rng.random() < 0.8),
        "performance_status": int(rng.choice([0, 1, 2], p=[0.5, 0.35, 0.15])),
    }
    observed = {k: v for k, v in full.items() if rng.random() >= missing}
    return observed, full


def ehr_risk(full: dict) -> float:
    return 1.2 * (0.5 - float(full["hpv"])) + 0.6 * (float(full["tobacco"]) - 0.5)


def burden_score(mask: np.ndarray) -> float:
    """Standardised log lesion volume."""
    return (math.log1p(int(np.count_nonzero(mask))) - 6.0) / 0.8


def generate_phantom(seed: int, spec: PhantomSpec | None = None, center: str = "A",
                     case_id: str | None = None) -> Case:
    spec = spec or PhantomSpec().for_center(center)
    rng = Rng(seed, "phantom", center)
    side = spec.side
    shape = (side, side, side)
    coords = np.indices(shape, dtype=np.float64)
    mid = (side - 1) / 2.0
    semi = np.array([0.46, 0.42, 0.46]) * side
    body = sum(((coords[a] - mid) / semi[a]) ** 2 for a in range(3)) <= 1.0

    lesions = _place_lesions(rng.child("lesions"), spec)
    mask = np.zeros(shape, dtype=np.uint8)
    pet_signal = np.zeros(shape, dtype=np.float64)
    for les in lesions:
        ball = ball_mask(shape, les.center, les.radius)
        mask[ball] = les.label
        pet_signal[ball] = np.maximum(pet_signal[ball], les.gain)

    shift = spec.shift
    ct_rng = rng.child("ct")
    ct = np.full(shape, -1000.0)
    tissue = spec.ct_tissue + _smooth_field(ct_rng, coords, side, spec.ct_texture)
    ct[body] = tissue[body]
    bone_c = ct_rng.uniform(0.3 * side, 0.7 * side, size=2)
    bone = ((coords[0] - bone_c[0]) ** 2 + (coords[1] - bone_c[1]) ** 2 <= (0.07 * side) ** 2) & body & (mask == 0)
    ct[bone] = 700.0
    ct[mask > 0] += spec.ct_contrast
    ct += shift.intensity_offset
    ct += ct_rng.normal(shape, std=spec.ct_noise * shift.noise_scale)

    pet = None
    if spec.with_pet:
        pet_rng = rng.child("pet")
        pet_grid = np.zeros(shape)
        noise = pet_rng.normal(shape, std=spec.pet_noise * shift.noise_scale)
        pet_grid[body] = spec.pet_background + noise[body]
        pet_grid += pet_signal
        pet_grid = np.clip(pet_grid, 0.0, None)
        pet = Volume(pet_grid.astype(np.float32), spec.spacing, "pet")

    observed, full = _sample_ehr(rng.child("ehr"), spec.ehr_missing)
    s_rng = rng.child("survival")
    risk = spec.burden_weight * burden_score(mask) + spec.ehr_weight * ehr_risk(full)
    t_event = float(s_rng.exponential(1.0) / (spec.base_rate * math.exp(risk)))
    event = bool(s_rng.random() >= spec.censor_fraction)
    time = t_event if event else float(s_rng.uniform(0.0, 1.0) * t_event)

    return Case(
        ct=Volume(ct.astype(np.float32), spec.spacing, "ct"),
        mask=mask,
        pet=pet,
        survival=SurvivalRecord(time, event),
        ehr=observed,
        center=center,
        case_id=case_id or f"{center}-{seed}",
        meta={"seed": int(seed), "lesions": [asdict(les) for les in lesions], "risk": risk,
              "ehr_full": full},
    )
