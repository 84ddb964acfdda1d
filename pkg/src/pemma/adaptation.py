"""Parameter-efficient multi-modal adaptation of a pre-trained CT segmenter.

The pre-trained parameters stay frozen.  New trainable groups are

* ``pet_embedding`` - a PET patch embedding whose tokens join the CT tokens
  in every attention block,
* ``peft`` - low-rank (LoRA) or weight-decomposed (DoRA) updates of the
  attention projections, Q and V by default,
* ``pet_skip`` - a PET input skip path added to the frozen CT path with a
  learnable weight ``beta`` that starts at 0,
* ``adapter`` - a 1 -> 2 channel expansion used when only PET is supplied.

With B = 0 and beta = 0 the adapted model reproduces the base model's CT path
bit for bit.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from pemma import autodiff as ad
from pemma.autodiff import Tensor
from pemma.backbone import PatchEmbedding, SegmentationModel, SkipPath, skip_combine
from pemma.exceptions import ConfigError, NumericError, ShapeError
from pemma.nn import (ADAPTER, BASE, GROUPS, PEFT, PET_EMBEDDING, PET_SKIP, Linear, Module, Parameter,
                      make_param)
from pemma.rng import Rng

__all__ = [
    "AdaptationConfig",
    "LowRankPair",
    "DoraParams",
    "AdapterLayer",
    "ParamLedger",
    "lora_linear",
    "dora_linear",
    "dora_weight",
    "inject_adapters",
    "extend_multimodal",
    "init_pet_embedding",
    "skip_combine",
    "adapter_forward",
    "param_report",
    "adapt",
    "set_peft_delta_zero",
]

TARGETS = ("q", "k", "v", "o")
PET_INIT_STRATEGIES = ("random", "zero", "cross_modal")


@dataclass
class AdaptationConfig:
    method: str = "lora"
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "v")
    dora_form: str = "canonical"
    pet_init: str = "cross_modal"

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.method not in ("lora", "dora"):
            raise ConfigError(f"unknown adaptation method {self.method!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not self.targets or any(t not in TARGETS for t in self.targets):
            raise ConfigError(f"targets must be a non-empty subset of {TARGETS}")
        if self.dora_form not in ("canonical", "paper_literal"):
            raise ConfigError(f"unknown DoRA form {self.dora_form!r}")
        if self.pet_init not in PET_INIT_STRATEGIES:
            raise ConfigError(f"unknown PET init strategy {self.pet_init!r}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LowRankPair(Module):
    """A (r x d) and B (d x r); B starts at zero so the update starts at zero."""

    def __init__(self, dim: int, rank: int, target: str = "q", block: int = 0, scale: float = 1.0,
                 rng: Rng | None = None, lazy: bool = False):
        if not 1 <= rank < dim:
            raise ShapeError(f"rank must satisfy 1 <= r < d, got r={rank}, d={dim}")
        self.target = target
        self.block = block
        self.rank = rank
        self.scale = scale
        self.A = make_param((rank, dim), rng, 0.02, PEFT, lazy)
        self.B = make_param((dim, rank), group=PEFT, lazy=lazy)

    def __call__(self, h: Tensor, linear: Linear) -> Tensor:
        y = lora_linear(h, linear.weight, self, self.scale)
        return y if linear.bias is None else y + linear.bias


class DoraParams(Module):
    """Low-rank direction update plus a per-output-unit magnitude vector."""

    def __init__(self, weight: Parameter, rank: int, target: str = "q", block: int = 0, scale: float = 1.0,
                 form: str = "canonical", rng: Rng | None = None, lazy: bool = False):
        d_out, d_in = weight.shape
        self.pair = LowRankPair(d_in, rank, target, block, scale, rng, lazy)
        self.form = form
        if lazy:
            self.magnitude = make_param((d_out,), group=PEFT, lazy=True)
        else:
            self.magnitude = Parameter(_row_norms(weight.data), group=PEFT, dtype=weight.dtype)

    @property
    def scale(self) -> float:
        return self.pair.scale

    def __call__(self, h: Tensor, linear: Linear) -> Tensor:
        y = dora_linear(h, linear.weight, self, self.scale)
        return y if linear.bias is None else y + linear.bias


def _row_norms(w: np.ndarray) -> np.ndarray:
    # same reduction as the taped path in dora_linear, so init reproduces W exactly
    return np.sqrt((w * w).sum(axis=(1,)))


def _check_pair(W: Tensor, pair: LowRankPair) -> None:
    d_out, d_in = W.shape
    r = pair.A.shape[0]
    if pair.A.shape != (r, d_in) or pair.B.shape != (d_out, r):
        raise ShapeError(f"low-rank pair A{pair.A.shape}, B{pair.B.shape} does not fit weight {W.shape}")


def lora_linear(h: Tensor, W: Tensor, pair: LowRankPair, s: float) -> Tensor:
    """h W^T + s (h A^T) B^T, never forming W + sBA."""
    _check_pair(W, pair)
    base = ad.matmul(h, ad.transpose(W))
    delta = ad.matmul(ad.matmul(h, ad.transpose(pair.A)), ad.transpose(pair.B))
    return base + delta * s


def _dora_direction(W: Tensor, dp: DoraParams, s: float) -> Tensor:
    return W + ad.matmul(dp.pair.B, dp.pair.A) * s


def dora_linear(h: Tensor, W: Tensor, dp: DoraParams, s: float) -> Tensor:
    """DoRA projection.

    canonical:     W' = m * V / ||V||, V = W + sBA, norms per output unit
    paper_literal: W' = W / ||W|| + sBA
    """
    _check_pair(W, dp.pair)
    if dp.form == "paper_literal":
        norms = _row_norms(W.data)
        if np.any(norms == 0):
            raise NumericError("DoRA needs nonzero weight norms")
        direction = Tensor(W.data / norms[:, None]) + ad.matmul(dp.pair.B, dp.pair.A) * s
        return ad.matmul(h, ad.transpose(direction))
    V = _dora_direction(W, dp, s)
    norm = ad.sqrt(ad.sum(V * V, axis=1))
    if np.any(norm.data == 0):
        raise NumericError("DoRA needs nonzero weight norms")
    return ad.matmul(h, ad.transpose(V)) * (dp.magnitude / norm)


def dora_weight(W: np.ndarray, dp: DoraParams, s: float) -> np.ndarray:
    """Dense adapted weight, for inspection and tests."""
    if dp.form == "paper_literal":
        return W / _row_norms(W)[:, None] + s * dp.pair.B.data @ dp.pair.A.data
    V = W + s * dp.pair.B.data @ dp.pair.A.data
    return V * (dp.magnitude.data / _row_norms(V))[:, None]


class AdapterLayer(Module):
    """Expands a single-modality input (..., 1) to the two-channel (CT slot, PET slot) layout.

    Initialised to route the input into the PET slot and leave the CT slot empty.
    """

    def __init__(self, weight=(0.0, 1.0), bias=(0.0, 0.0), lazy: bool = False):
        if lazy:
            self.weight = make_param((1, 2), group=ADAPTER, lazy=True)
            self.bias = make_param((2,), group=ADAPTER, lazy=True)
        else:
            self.weight = Parameter(np.asarray(weight, dtype=np.float32).reshape(1, 2), group=ADAPTER)
            self.bias = Parameter(np.asarray(bias, dtype=np.float32), group=ADAPTER)

    def expand(self, x: Tensor) -> Tensor:
        if x.shape[-1] != 1:
            raise ShapeError(f"adapter expects a single channel, got {x.shape[-1]}")
        return ad.matmul(x, self.weight) + self.bias

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        two = self.expand(x)
        return two[..., 0:1], two[..., 1:2]


def adapter_forward(layer: AdapterLayer, ct: Tensor | None = None, pet: Tensor | None = None) -> Tensor:
    """Two-channel representation; with both modalities it is plain concatenation."""
    if ct is not None and pet is not None:
        return ad.concat([ct, pet], axis=-1)
    x = ct if ct is not None else pet
    if x is None:
        raise ShapeError("adapter_forward needs at least one modality")
    return layer.expand(x)


# injection ----------------------------------------------------------------------


def inject_adapters(model: SegmentationModel, cfg: AdaptationConfig, seed: int = 0, lazy: bool = False) -> "ParamLedger":
    """Attach one low-rank update per target per block and freeze the base weights."""
    if any(block.attn.adapters for block in model.blocks):
        raise ConfigError("adapters are already injected")
    for p in model.parameters():
        if p.group == BASE:
            p.frozen = True
    rng = Rng(seed, "peft")
    for i, block in enumerate(model.blocks):
        for t in cfg.targets:
            r = rng.child(i, t)
            if cfg.method == "lora":
                mod = LowRankPair(model.config.dim, cfg.rank, t, i, cfg.scale, r, lazy)
            else:
                weight = getattr(block.attn, t).weight
                mod = DoraParams(weight, cfg.rank, t, i, cfg.scale, cfg.dora_form, r, lazy)
            if not lazy:
                mod.astype(model.dtype)
            block.attn.adapters[t] = mod
    return ParamLedger.from_model(model)


def init_pet_embedding(model: SegmentationModel, strategy: str = "cross_modal", rng: Rng | None = None) -> SegmentationModel:
    """(Re)initialise the PET patch embedding: random, zero, or copied from CT."""
    emb = model.pet_embedding
    if emb is None:
        raise ConfigError("model has no PET embedding")
    if strategy not in PET_INIT_STRATEGIES:
        raise ConfigError(f"unknown PET init strategy {strategy!r}")
    dt = emb.weight.dtype
    if strategy == "zero":
        for p in (emb.weight, emb.bias, emb.pos):
            p.data = np.zeros(p.shape, dtype=dt)
    elif strategy == "random":
        rng = rng or Rng(0, "pet_embedding")
        emb.weight.data = rng.normal(emb.weight.shape, std=0.02, dtype=dt)
        emb.bias.data = np.zeros(emb.bias.shape, dtype=dt)
        emb.pos.data = rng.normal(emb.pos.shape, std=0.02, dtype=dt)
    else:
        ct = model.embedding
        if ct is None or ct.modality != "CT" or ct.weight.shape != emb.weight.shape:
            raise ConfigError("cross-modal initialisation needs a CT embedding of matching shape")
        emb.weight.data = ct.weight.data.astype(dt, copy=True)
        emb.bias.data = ct.bias.data.astype(dt, copy=True)
        emb.pos.data = ct.pos.data.astype(dt, copy=True)
    return model


def extend_multimodal(model: SegmentationModel, strategy: str = "cross_modal", seed: int = 0,
                      lazy: bool = False) -> SegmentationModel:
    """Add the PET embedding, PET skip path, beta and the missing-modality adapter."""
    if model.primary != "ct":
        raise ConfigError("only a CT-primary model can be extended with PET")
    if model.is_multimodal:
        raise ConfigError("model is already multi-modal")
    cfg = model.config
    model.pet_embedding = PatchEmbedding("PET", cfg.patch, cfg.dim, cfg.grid, 1, None, PET_EMBEDDING, zero=True, lazy=lazy)
    model.pet_skip = SkipPath("pet", 1, cfg.skip_channels, None, PET_SKIP, zero=True, lazy=lazy)
    model.beta = make_param((), group=PET_SKIP, lazy=lazy)
    model.adapter = AdapterLayer(lazy=lazy)
    if not lazy:
        init_pet_embedding(model, strategy, Rng(seed, "pet_embedding"))
        # the PET skip path starts as a copy of the CT one; beta = 0 keeps it silent
        model.pet_skip.proj.weight.data = model.skip.proj.weight.data.copy()
        model.pet_skip.proj.bias.data = model.skip.proj.bias.data.copy()
        for m in (model.pet_embedding, model.pet_skip, model.adapter):
            m.astype(model.dtype)
        model.beta.data = model.beta.data.astype(model.dtype)
    return model


def adapt(model: SegmentationModel, cfg: AdaptationConfig | None = None, seed: int = 0,
          lazy: bool = False) -> "ParamLedger":
    """Full multi-modal adaptation: low-rank updates plus the PET paths."""
    cfg = cfg or AdaptationConfig()
    inject_adapters(model, cfg, seed, lazy)
    extend_multimodal(model, cfg.pet_init, seed, lazy)
    return ParamLedger.from_model(model)


def peft_modules(model: SegmentationModel):
    for block in model.blocks:
        yield from block.attn.adapters.values()


def set_peft_delta_zero(model: SegmentationModel) -> None:
    """Zero every B matrix (and reset DoRA magnitudes to the base norms) and beta."""
    for mod in peft_modules(model):
        pair = mod.pair if isinstance(mod, DoraParams) else mod
        pair.B.data = np.zeros_like(pair.B.data)
    for block in model.blocks:
        for t, mod in block.attn.adapters.items():
            if isinstance(mod, DoraParams):
                mod.magnitude.data = _row_norms(getattr(block.attn, t).weight.data).astype(mod.magnitude.dtype)
    if model.beta is not None:
        model.beta.data = np.zeros_like(model.beta.data)


# parameter ledger -------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    name: str
    shape: tuple[int, ...]
    group: str
    frozen: bool

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass
class ParamLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    scheme: str = "pemma"
    base_total: int | None = None

    @classmethod
    def from_model(cls, *modules: Module, prefixes: tuple[str, ...] | None = None, scheme: str = "pemma") -> "ParamLedger":
        entries = []
        for i, m in enumerate(modules):
            pre = prefixes[i] if prefixes else ("" if len(modules) == 1 else f"m{i}.")
            for name, p in m.named_parameters():
                entries.append(LedgerEntry(pre + name, tuple(p.shape), p.group, p.frozen))
        return cls(entries, scheme)

    def counts(self) -> dict[str, int]:
        c = Counter()
        for e in self.entries:
            c[e.group] += e.count
        return {g: c.get(g, 0) for g in GROUPS if g in c}

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def trainable(self) -> int:
        return sum(e.count for e in self.entries if not e.frozen)

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def names(self, group: str | None = None) -> list[str]:
        return [e.name for e in self.entries if group is None or e.group == group]


def param_report(ledger: ParamLedger) -> dict:
    """Exact counts per group plus trainable/total and total relative to the base model."""
    counts = ledger.counts()
    base = ledger.base_total if ledger.base_total is not None else counts.get(BASE, ledger.total)
    return {
        "scheme": ledger.scheme,
        "groups": counts,
        "total": ledger.total,
        "trainable": ledger.trainable,
        "ratio": ledger.ratio,
        "base_total": base,
        "total_vs_base": ledger.total / base if base else float("nan"),
        "trainable_vs_base": ledger.trainable / base if base else float("nan"),
    }
