"""Intensity normalisation and light augmentation."""

from __future__ import annotations

import logging

import numpy as np

from pemma.data.types import Case, Volume
from pemma.rng import Rng

log = logging.getLogger(__name__)

CT_MIN, CT_MAX = -200.0, 250.0


def normalize_ct(grid: np.ndarray) -> np.ndarray:
    """Clip to [CT_MIN, CT_MAX] and map linearly onto [0, 1]."""
    g = np.clip(np.asarray(grid, dtype=np.float64), CT_MIN, CT_MAX)
    return ((g - CT_MIN) / (CT_MAX - CT_MIN)).astype(np.float32)


def normalize_pet(grid: np.ndarray) -> tuple[np.ndarray, bool]:
    """Standardise using only nonzero voxels; zeros stay zero.  Returns (grid, applied)."""
    g = np.asarray(grid, dtype=np.float64)
    nz = g != 0
    if not nz.any():
        log.warning("PET volume is all zero; normalisation skipped")
        return g.astype(np.float32), False
    vals = g[nz]
    std = vals.std()
    out = g.copy()
    out[nz] = (vals - vals.mean()) / (std if std > 0 else 1.0)
    return out.astype(np.float32), True


def preprocess_intensities(case: Case) -> Case:
    """CT window + PET standardisation.  PET is standardised once only (``processed`` flag)."""
    if case.processed:
        return case
    ct = Volume(normalize_ct(case.ct.grid), case.ct.spacing, "ct")
    pet = case.pet
    meta = dict(case.meta)
    if pet is not None:
        grid, applied = normalize_pet(pet.grid)
        pet = Volume(grid, pet.spacing, "pet")
        if not applied:
            meta["pet_normalization_skipped"] = True
    return case.replace(ct=ct, pet=pet, processed=True, meta=meta)


def random_flip_rotate(case: Case, rng: Rng) -> Case:
    """Random axis flips and a 90 degree rotation in the first two axes, applied to all grids."""
    flips = [a for a in range(3) if rng.random() < 0.5]
    k = int(rng.integers(0, 4))

    def f(g):
        if g is None:
            return None
        for a in flips:
            g = np.flip(g, axis=a)
        return np.ascontiguousarray(np.rot90(g, k, axes=(0, 1)))

    pet = None if case.pet is None else Volume(f(case.pet.grid), case.pet.spacing, "pet")
    return case.replace(ct=Volume(f(case.ct.grid), case.ct.spacing, "ct"), pet=pet, mask=f(case.mask))
