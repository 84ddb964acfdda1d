"""Foreground-balanced patch sampling and modality-dropout draws."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from pemma.data.types import Case
from pemma.exceptions import ConfigError, DataError
from pemma.rng import Rng

DEFAULT_MODE_PROBS = {"ct": 0.2, "pet": 0.2, "ctpet": 0.6}


@dataclass
class Patch:
    ct: np.ndarray
    pet: np.ndarray | None
    mask: np.ndarray
    origin: tuple[int, int, int]
    positive: bool


def _window_sums(fg: np.ndarray, size: int) -> np.ndarray:
    """Foreground count of every size^3 window, indexed by window origin."""
    c = np.zeros(tuple(s + 1 for s in fg.shape), dtype=np.int64)
    c[1:, 1:, 1:] = fg.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    s = size
    return (c[s:, s:, s:] - c[:-s, s:, s:] - c[s:, :-s, s:] - c[s:, s:, :-s]
            + c[:-s, :-s, s:] + c[:-s, s:, :-s] + c[s:, :-s, :-s] - c[:-s, :-s, :-s])


def _crop(case: Case, origin, size: int, positive: bool) -> Patch:
    sl = tuple(slice(o, o + size) for o in origin)
    pet = None if case.pet is None else case.pet.grid[sl]
    return Patch(case.ct.grid[sl], pet, case.mask[sl], tuple(int(o) for o in origin), positive)


def sample_patches(case: Case, size: int, pos_neg_ratio=(2, 1), n: int = 3, rng: Rng | None = None) -> list[Patch]:
    """``n`` cubic patches; round(n * pos / (pos + neg)) of them contain foreground, the rest none."""
    rng = rng or Rng(0, "patches")
    pos, neg = pos_neg_ratio
    if pos < 0 or neg < 0 or pos + neg == 0:
        raise ConfigError(f"invalid pos:neg ratio {pos_neg_ratio}")
    shape = case.mask.shape
    if any(size > s for s in shape) or size < 1:
        raise ConfigError(f"patch size {size} does not fit volume {shape}")
    n_pos = int(round(n * pos / (pos + neg)))
    fg = case.mask > 0
    fg_idx = np.argwhere(fg)
    if n_pos and fg_idx.size == 0:
        raise DataError(f"case {case.case_id!r} has no foreground but the ratio requires positive patches")
    bg_origins = None
    if n_pos < n:
        bg_origins = np.argwhere(_window_sums(fg, size) == 0)
        if bg_origins.size == 0:
            raise DataError(f"case {case.case_id!r} has no background-only {size}^3 patch")

    kinds = np.array([True] * n_pos + [False] * (n - n_pos))[rng.permutation(n)]
    out = []
    for positive in kinds:
        if positive:
            v = fg_idx[int(rng.integers(0, len(fg_idx)))]
            origin = [int(rng.integers(max(0, v[a] - size + 1), min(v[a], shape[a] - size) + 1)) for a in range(3)]
        else:
            origin = bg_origins[int(rng.integers(0, len(bg_origins)))]
        out.append(_crop(case, origin, size, bool(positive)))
    return out


def sample_modality_mode(rng: Rng, probs: Mapping[str, float] | None = None) -> str:
    probs = dict(DEFAULT_MODE_PROBS if probs is None else probs)
    unknown = set(probs) - set(DEFAULT_MODE_PROBS)
    if unknown:
        raise ConfigError(f"unknown modes {sorted(unknown)}")
    names = sorted(probs)
    p = np.array([probs[k] for k in names], dtype=np.float64)
    if np.any(p < 0):
        raise ConfigError("modality probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"modality probabilities sum to {p.sum()}, not 1")
    return names[int(rng.choice(len(names), p=p))]
