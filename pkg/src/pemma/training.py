"""Training loops, evaluation and the staged protocol's building blocks."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from pemma import autodiff as ad
from pemma.adaptation import DoraParams, peft_modules
from pemma.autodiff import Tape, Tensor
from pemma.backbone import SegmentationModel, model_forward, pooled_features
from pemma.data.sampling import sample_modality_mode, sample_patches
from pemma.data.types import LYMPH, TUMOR, Case
from pemma.exceptions import ConfigError, DataError, ModalityError, NumericError
from pemma.fusion import LateFusion, early_fusion_forward
from pemma.nn import ADAPTER, BASE, PEFT, PET_EMBEDDING, PET_SKIP, Module
from pemma.objectives import AdamW, dice_ce_loss, dice_score
from pemma.rng import Rng

log = logging.getLogger(__name__)

CONTINUAL_SCOPES = {
    "peft_only": (PEFT,),
    "wide": (PEFT, PET_EMBEDDING, PET_SKIP, ADAPTER),
    "peft_plus_modality_paths": (PEFT, PET_EMBEDDING, PET_SKIP, ADAPTER),
}
ADAPT_GROUPS = (PEFT, PET_EMBEDDING, PET_SKIP, ADAPTER)


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 2
    cosine: bool = True
    val_every: int = 10
    patience: int = 20
    mode: str | None = "ct"
    mode_probs: Mapping[str, float] | None = None
    pos_neg_ratio: tuple[int, int] = (2, 1)
    augment: bool = False
    seed: int = 0


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    modes: list[str] = field(default_factory=list)
    best_step: int = -1
    stopped_early: bool = False
    seconds: float = 0.0


def set_trainable(model: Module, groups: Sequence[str]) -> None:
    """Freeze every parameter whose group is not listed."""
    for p in model.parameters():
        p.frozen = p.group not in groups


def _patch_view(case: Case, side: int, ratio, rng: Rng) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    if case.side == side:
        return case.ct.grid, None if case.pet is None else case.pet.grid, case.mask
    patch = sample_patches(case, side, ratio, n=1 if ratio[1] == 0 else sum(ratio), rng=rng)
    pick = patch[int(rng.integers(0, len(patch)))]
    return pick.ct, pick.pet, pick.mask


def make_batch(cases: Sequence[Case], side: int, ratio=(2, 1), rng: Rng | None = None, augment: bool = False):
    rng = rng or Rng(0, "batch")
    cts, pets, masks = [], [], []
    for case in cases:
        if augment:
            from pemma.data.preprocessing import random_flip_rotate

            case = random_flip_rotate(case, rng)
        ct, pet, mask = _patch_view(case, side, ratio, rng)
        cts.append(ct)
        pets.append(pet)
        masks.append(mask)
    pet = None if any(p is None for p in pets) else np.stack(pets)
    return np.stack(cts), pet, np.stack(masks).astype(np.int64)


def _batch_logits(model, ct, pet, mode: str) -> Tensor:
    if model.primary == "ctpet":
        return model.logits(ct if mode != "pet" else None, pet if mode != "ct" else None,
                            mode, zero_fill=mode != "ctpet")
    if model.primary == "pet":
        return model.logits(None, pet, "pet")
    return model.logits(ct if mode != "pet" else None, pet if mode != "ct" else None, mode)


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"loss became non-finite at step {step}")


def validation_loss(model, cases: Sequence[Case], modes: Sequence[str]) -> float:
    side = model.config.side
    vals = []
    for mode in modes:
        for case in cases:
            ct, pet, mask = make_batch([case], side)
            if mode != "ct" and pet is None:
                continue
            vals.append(dice_ce_loss(_batch_logits(model, ct, pet, mode), mask).item())
    return float(np.mean(vals)) if vals else float("nan")


def train_segmentation(model: SegmentationModel, cases: Sequence[Case], cfg: TrainConfig,
                       val_cases: Sequence[Case] | None = None, val_modes: Sequence[str] | None = None,
                       callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Optimise the model's trainable parameters with Dice+CE.

    Every batch draws one inference mode: ``cfg.mode`` when set, otherwise a
    modality-dropout draw from ``cfg.mode_probs``.  With validation cases the
    best checkpoint (by validation loss) is restored at the end and training
    stops after ``cfg.patience`` checks without improvement.
    """
    if not cases:
        raise DataError("no training cases")
    rng = Rng(cfg.seed, "train")
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                total_steps=cfg.steps if cfg.cosine else None)
    if not opt.params:
        raise ConfigError("model has no trainable parameters")
    result = TrainResult()
    side = model.config.side
    has_pet = all(c.pet is not None for c in cases)
    best, best_state, stale = np.inf, None, 0
    val_modes = list(val_modes or ([cfg.mode] if cfg.mode else ["ctpet"]))
    t0 = time.perf_counter()
    order = rng.child("order")
    perm, cursor = order.permutation(len(cases)), 0
    for step in range(cfg.steps):
        idx = []
        for _ in range(min(cfg.batch_size, len(cases))):
            if cursor == len(perm):
                perm, cursor = order.permutation(len(cases)), 0
            idx.append(int(perm[cursor]))
            cursor += 1
        mode = cfg.mode or sample_modality_mode(rng.child("mode", step), cfg.mode_probs)
        if mode != "ct" and not has_pet:
            mode = "ct"
        ct, pet, mask = make_batch([cases[i] for i in idx], side, cfg.pos_neg_ratio, rng.child("patch", step),
                                   cfg.augment)
        with Tape() as tape:
            loss = dice_ce_loss(_batch_logits(model, ct, pet, mode), mask)
            value = loss.item()
            _check_finite(value, step)
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
        result.losses.append(value)
        result.modes.append(mode)
        if callback:
            callback(step, value)
        if val_cases and (step + 1) % cfg.val_every == 0:
            v = validation_loss(model, val_cases, val_modes)
            result.val_losses.append((step + 1, v))
            if v < best:
                best, stale, result.best_step = v, 0, step + 1
                best_state = {id(p): p.data.copy() for p in opt.params}
            else:
                stale += 1
                if stale >= cfg.patience:
                    result.stopped_early = True
                    break
    if best_state is not None:
        for p in opt.params:
            p.data = best_state[id(p)]
    for p in model.parameters():
        p.grad = None
    result.seconds = time.perf_counter() - t0
    return result


# evaluation ---------------------------------------------------------------------


def predict_proba(predictor, case: Case, mode: str) -> np.ndarray:
    """(D, D, D, classes) probabilities from any segmenter kind."""
    if isinstance(predictor, LateFusion):
        ct = case.ct.grid if case.ct is not None else None
        pet = case.pet.grid if case.pet is not None else None
        return predictor.predict_proba(ct, pet, mode)[0]
    if predictor.primary == "ctpet":
        c = case if mode == "ctpet" else case.replace(pet=None) if mode == "ct" else _pet_only(case)
        return early_fusion_forward(c, predictor, zero_fill=mode != "ctpet")
    if predictor.primary == "pet":
        if mode != "pet":
            raise ModalityError("a PET-only model only supports mode 'pet'")
        return predictor.forward(None, case.pet.grid, "pet").data[0]
    return model_forward(predictor, case, mode)


def _pet_only(case: Case):
    class _View:
        ct = None
        pet = case.pet
        case_id = case.case_id

    return _View()


def available_modes(predictor) -> tuple[str, ...]:
    if isinstance(predictor, LateFusion):
        return predictor.available_modes()
    if predictor.primary == "ctpet":
        return ("ct", "pet", "ctpet")
    return predictor.available_modes()


def dice_per_class(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    tumor = dice_score(pred, gt, TUMOR)
    lymph = dice_score(pred, gt, LYMPH)
    return {"tumor": tumor, "lymph": lymph, "average": (tumor + lymph) / 2.0}


def evaluate_segmentation(predictor, cases: Sequence[Case], modes: Sequence[str]) -> dict[str, dict[str, float]]:
    """Mean per-case Dice for each mode: {mode: {tumor, lymph, average}}."""
    avail = available_modes(predictor)
    out = {}
    for mode in modes:
        if mode not in avail:
            raise ModalityError(f"mode {mode!r} is not available (has {avail})")
        rows = []
        for case in cases:
            if mode != "ct" and case.pet is None:
                raise DataError(f"case {case.case_id} has no PET for mode {mode!r}")
            pred = np.argmax(predict_proba(predictor, case, mode), axis=-1)
            rows.append(dice_per_class(pred, case.mask))
        tumor = float(np.mean([r["tumor"] for r in rows]))
        lymph = float(np.mean([r["lymph"] for r in rows]))
        out[mode] = {"tumor": tumor, "lymph": lymph, "average": (tumor + lymph) / 2.0}
    return out


# prognosis ------------------------------------------------------------------------


def encoder_features(model: SegmentationModel, cases: Sequence[Case], mode: str, batch: int = 4) -> np.ndarray:
    """Pooled final-block features (n, d), computed once without a tape."""
    feats = []
    for i in range(0, len(cases), batch):
        chunk = cases[i:i + batch]
        ct = np.stack([c.ct.grid for c in chunk]) if mode != "pet" else None
        pet = np.stack([c.pet.grid for c in chunk]) if mode != "ct" else None
        feats.append(pooled_features(model, ct, pet, mode).data)
    return np.concatenate(feats).astype(np.float64)


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureScaler":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def train_prognosis_head(head, features: np.ndarray, times, events, bins, ehr: np.ndarray | None = None,
                         steps: int = 300, lr: float = 1e-3, weight_decay: float = 1e-5,
                         eta: float = 0.1, sigma: float = 0.1) -> list[float]:
    """Full-batch DeepHit training of a prognosis head on precomputed features."""
    from pemma.survival import deephit_loss

    dt = head.fc1.weight.dtype
    x = Tensor(np.asarray(features, dtype=dt))
    e = None if ehr is None else Tensor(np.asarray(ehr, dtype=dt))
    opt = AdamW(head.parameters(), lr=lr, weight_decay=weight_decay, total_steps=steps)
    losses = []
    for step in range(steps):
        with Tape() as tape:
            pmf = ad.softmax(head(x, e), axis=-1)
            loss = deephit_loss(pmf, times, events, bins, eta, sigma)
            _check_finite(loss.item(), step)
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


def predict_pmf(head, features: np.ndarray, ehr: np.ndarray | None = None) -> np.ndarray:
    dt = head.fc1.weight.dtype
    x = Tensor(np.asarray(features, dtype=dt))
    e = None if ehr is None else Tensor(np.asarray(ehr, dtype=dt))
    return ad.softmax(head(x, e), axis=-1).data.astype(np.float64)


def peft_snapshot(model: SegmentationModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters() if p.group != BASE}


def restore_snapshot(model: SegmentationModel, snap: Mapping[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    for n, arr in snap.items():
        own[n].data = arr.copy()


def dora_modules(model: SegmentationModel) -> list[DoraParams]:
    return [m for m in peft_modules(model) if isinstance(m, DoraParams)]
