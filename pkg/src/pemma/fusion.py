"""Early- and late-fusion baselines."""

from __future__ import annotations

import numpy as np

from pemma.adaptation import PET_INIT_STRATEGIES, ParamLedger
from pemma.backbone import SegmentationModel
from pemma.exceptions import ConfigError, ModalityError, ShapeError
from pemma.rng import Rng

DEFAULT_CT_WEIGHT = 0.5


def late_fusion_combine(m_c, m_p, w_c: float = DEFAULT_CT_WEIGHT) -> np.ndarray:
    """Convex combination ``w_c * m_c + (1 - w_c) * m_p`` of two probability fields."""
    m_c = np.asarray(m_c)
    m_p = np.asarray(m_p)
    if m_c.shape != m_p.shape:
        raise ShapeError(f"probability fields differ in shape: {m_c.shape} vs {m_p.shape}")
    w_c = float(w_c)
    if not 0.0 <= w_c <= 1.0 or np.isnan(w_c):
        raise ValueError(f"w_c must lie in [0, 1], got {w_c}")
    if w_c == 1.0:
        return m_c.copy()
    if w_c == 0.0:
        return m_p.copy()
    return w_c * m_c + (1.0 - w_c) * m_p


class LateFusion:
    """Two independent uni-modal segmenters whose probabilities are averaged."""

    def __init__(self, ct_model: SegmentationModel, pet_model: SegmentationModel, w_c: float = DEFAULT_CT_WEIGHT):
        if ct_model.primary != "ct" or pet_model.primary != "pet":
            raise ConfigError("late fusion needs a CT-primary and a PET-primary model")
        if not 0.0 <= w_c <= 1.0:
            raise ValueError(f"w_c must lie in [0, 1], got {w_c}")
        self.ct_model = ct_model
        self.pet_model = pet_model
        self.w_c = float(w_c)

    def available_modes(self) -> tuple[str, ...]:
        return ("ct", "pet", "ctpet")

    def predict_proba(self, ct=None, pet=None, mode: str = "ctpet") -> np.ndarray:
        if mode == "ct":
            return self.ct_model.forward(ct, None, "ct").data
        if mode == "pet":
            return self.pet_model.forward(None, pet, "pet").data
        if mode != "ctpet":
            raise ModalityError(f"unknown mode {mode!r}")
        if ct is None or pet is None:
            raise ModalityError("late fusion in mode 'ctpet' needs both volumes")
        m_c = self.ct_model.forward(ct, None, "ct").data
        m_p = self.pet_model.forward(None, pet, "pet").data
        return late_fusion_combine(m_c, m_p, self.w_c)


def late_fusion_ledger(ct_model: SegmentationModel, pet_model: SegmentationModel) -> ParamLedger:
    ledger = ParamLedger.from_model(ct_model, pet_model, prefixes=("ct.", "pet."), scheme="late")
    ledger.base_total = ct_model.num_parameters()
    return ledger


# early fusion -----------------------------------------------------------------


def build_early_fusion(ct_model: SegmentationModel, strategy: str = "cross_modal", seed: int = 0,
                       lazy: bool = False) -> SegmentationModel:
    """Two-channel model initialised from a CT model.

    Every shared weight is copied; the embedding and skip projections gain a
    PET input slice initialised by ``strategy``.  All parameters are trainable.
    """
    if ct_model.primary != "ct":
        raise ConfigError("early fusion starts from a CT-primary model")
    if strategy not in PET_INIT_STRATEGIES:
        raise ConfigError(f"unknown PET init strategy {strategy!r}")
    model = SegmentationModel(ct_model.config, seed=seed, primary="ctpet", lazy=lazy)
    if lazy:
        return model
    model.astype(ct_model.dtype)
    src = dict(ct_model.named_parameters())
    rng = Rng(seed, "early_fusion")
    for name, p in model.named_parameters():
        if name not in src:
            raise ConfigError(f"CT model has no parameter {name!r}")
        w = src[name].data
        if name == "embedding.weight":
            # patchify puts the channel axis fastest: rows alternate CT, PET
            fused = np.empty(p.shape, dtype=w.dtype)
            fused[0::2] = w
            fused[1::2] = _pet_slice(w, strategy, rng)
            p.data = fused
        elif name == "skip.proj.weight":
            p.data = np.concatenate([w, _pet_slice(w, strategy, rng)], axis=1)
        else:
            if p.shape != w.shape:
                raise ShapeError(f"{name}: {p.shape} vs {w.shape}")
            p.data = w.copy()
        p.frozen = False
    return model


def _pet_slice(w: np.ndarray, strategy: str, rng: Rng) -> np.ndarray:
    if strategy == "cross_modal":
        return w.copy()
    if strategy == "zero":
        return np.zeros_like(w)
    return rng.normal(w.shape, std=0.02, dtype=w.dtype)


def early_fusion_forward(case, model: SegmentationModel, zero_fill: bool = False) -> np.ndarray:
    """(D, D, D, classes) probabilities; a missing modality is an error unless ``zero_fill``."""
    if model.primary != "ctpet":
        raise ConfigError("early_fusion_forward needs a two-channel model")
    has_ct = case.ct is not None
    has_pet = case.pet is not None
    if has_ct and has_pet:
        mode = "ctpet"
    elif not zero_fill:
        raise ModalityError("early fusion needs both CT and PET (pass zero_fill=True to zero the missing channel)")
    else:
        mode = "ct" if has_ct else "pet"
    ct = case.ct.grid if has_ct else None
    pet = case.pet.grid if has_pet else None
    return model.forward(ct, pet, mode, zero_fill=zero_fill).data[0]


def early_fusion_ledger(model: SegmentationModel, base_total: int | None = None) -> ParamLedger:
    ledger = ParamLedger.from_model(model, scheme="early")
    ledger.base_total = base_total
    return ledger


def early_fusion_delta(config) -> int:
    """Parameters added by the PET input slice: p^3 * d (embedding) + skip channels."""
    return config.patch**3 * config.dim + config.skip_channels


def fused_argmax(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=-1)


__all__ = [
    "late_fusion_combine",
    "LateFusion",
    "late_fusion_ledger",
    "build_early_fusion",
    "early_fusion_forward",
    "early_fusion_ledger",
    "early_fusion_delta",
    "fused_argmax",
]
