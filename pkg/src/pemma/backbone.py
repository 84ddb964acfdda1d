"""Volumetric transformer segmentation model.

Patch embeddings turn a (B, D, D, D) volume into N = (D/p)^3 tokens, a stack of
pre-norm global-attention blocks processes them (2N tokens when a PET sequence
is appended), and a de-patching decoder taps four block depths and upsamples
back to the voxel grid, where it is fused with a voxelwise input skip path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from pemma import autodiff as ad
from pemma.autodiff import Tensor
from pemma.exceptions import ModalityError, ShapeError
from pemma.nn import BASE, HEAD, LayerNorm, Linear, Module, make_param
from pemma.rng import Rng

MODES = ("ct", "pet", "ctpet")
ROUTING_POLICIES = ("ct_only", "alternate", "pet_only")


@dataclass
class ModelConfig:
    side: int = 32
    patch: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 4
    classes: int = 3
    mlp_ratio: int = 4
    skip_channels: int = 8
    decoder_channels: tuple[int, int, int, int] = (32, 16, 16, 8)
    decoder_final: int = 16
    routing: str = "ct_only"

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.side % self.patch:
            raise ShapeError(f"side {self.side} is not divisible by patch {self.patch}")
        if self.patch % 4:
            raise ShapeError("patch size must be a multiple of 4 (three decoder stages)")
        if self.dim % self.heads:
            raise ShapeError("dim must be divisible by heads")
        if self.depth < 1:
            raise ShapeError("depth must be >= 1")
        if self.routing not in ROUTING_POLICIES:
            raise ValueError(f"unknown routing policy {self.routing!r}")

    @property
    def grid(self) -> int:
        return self.side // self.patch

    @property
    def tokens(self) -> int:
        return self.grid**3

    @property
    def taps(self) -> tuple[int, int, int, int]:
        """1-based block indices tapped by the decoder, shallow to deep."""
        L = self.depth
        return tuple(max(1, (L * k) // 4) for k in (1, 2, 3, 4))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def full_geometry(cls) -> "ModelConfig":
        """ViT-B sized geometry used for parameter arithmetic only."""
        return cls(side=96, patch=16, dim=768, heads=12, depth=12, skip_channels=16,
                   decoder_channels=(64, 32, 16, 4), decoder_final=16)


@dataclass
class TokenSequence:
    tokens: Tensor
    segments: tuple[tuple[str, int], ...] = field(default=())

    def __post_init__(self):
        if not self.segments:
            self.segments = (("ct", self.tokens.shape[1]),)

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    def span(self, name: str) -> slice:
        start = 0
        for seg, n in self.segments:
            if seg == name:
                return slice(start, start + n)
            start += n
        raise ModalityError(f"token sequence has no {name!r} segment (has {[s for s, _ in self.segments]})")

    def has(self, name: str) -> bool:
        return any(seg == name for seg, _ in self.segments)


# building blocks --------------------------------------------------------------


def patchify(x: Tensor, p: int) -> Tensor:
    """(B, D, D, D, C) -> (B, N, p^3 C) in raster order, z fastest."""
    b, dx, dy, dz, c = x.shape
    gx, gy, gz = dx // p, dy // p, dz // p
    x = ad.reshape(x, (b, gx, p, gy, p, gz, p, c))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return ad.reshape(x, (b, gx * gy * gz, p * p * p * c))


def depatch(tokens: Tensor, grid: int, s: int) -> Tensor:
    """(B, g^3, s^3 C) -> (B, g s, g s, g s, C); inverse layout of :func:`patchify`."""
    b, n, k = tokens.shape
    c = k // (s**3)
    x = ad.reshape(tokens, (b, grid, grid, grid, s, s, s, c))
    x = ad.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return ad.reshape(x, (b, grid * s, grid * s, grid * s, c))


class PatchEmbedding(Module):
    """Linear patch projection (weight p^3 c_in x d) plus learned positions (N x d)."""

    def __init__(self, modality: str, patch: int, dim: int, grid: int, in_channels: int = 1,
                 rng: Rng | None = None, group: str = BASE, zero: bool = False, lazy: bool = False):
        self.modality = modality
        self.patch = patch
        self.dim = dim
        self.grid = grid
        self.in_channels = in_channels
        fan_in = patch**3 * in_channels
        std = 0.0 if zero else (2.0 / (fan_in + dim)) ** 0.5
        self.weight = make_param((fan_in, dim), rng, std, group, lazy)
        self.bias = make_param((dim,), group=group, lazy=lazy)
        self.pos = make_param((grid**3, dim), rng, 0.0 if zero else 0.02, group, lazy)

    def positions(self, grid: int) -> Tensor:
        if grid == self.grid:
            return self.pos
        # nearest lookup into the learned position grid for other volume sides
        axis = (np.arange(grid) * self.grid) // grid
        ix, iy, iz = np.meshgrid(axis, axis, axis, indexing="ij")
        flat = ((ix * self.grid + iy) * self.grid + iz).reshape(-1)
        return ad.getitem(self.pos, flat)

    def __call__(self, volume: Tensor) -> TokenSequence:
        if volume.ndim != 5:
            raise ShapeError(f"expected (B, D, D, D, C) input, got {volume.shape}")
        b, dx, dy, dz, c = volume.shape
        if c != self.in_channels:
            raise ShapeError(f"{self.modality} embedding expects {self.in_channels} channel(s), got {c}")
        if not (dx == dy == dz):
            raise ShapeError("volumes must be cubic")
        if dx % self.patch:
            raise ShapeError(f"volume side {dx} is not divisible by patch {self.patch}")
        grid = dx // self.patch
        tokens = ad.matmul(patchify(volume, self.patch), self.weight) + self.bias
        tokens = tokens + self.positions(grid)
        return TokenSequence(tokens, ((self.modality.lower() if self.modality != "CTPET" else "ct", grid**3),))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng | None = None, lazy: bool = False):
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False, lazy=lazy)
        self.k = Linear(dim, dim, rng, bias=False, lazy=lazy)
        self.v = Linear(dim, dim, rng, bias=False, lazy=lazy)
        self.o = Linear(dim, dim, rng, lazy=lazy)
        # target name -> low-rank adapter; filled by pemma.adaptation.inject_adapters
        self.adapters: dict = {}

    def project(self, target: str, h: Tensor) -> Tensor:
        linear = getattr(self, target)
        adapter = self.adapters.get(target)
        return linear(h) if adapter is None else adapter(h, linear)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(y):
            return ad.transpose(ad.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q = split(self.project("q", x))
        k = split(self.project("k", x))
        v = split(self.project("v", x))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.project("o", ctx)


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rng: Rng | None = None, lazy: bool = False):
        self.norm1 = LayerNorm(dim, lazy=lazy)
        self.attn = Attention(dim, heads, rng, lazy)
        self.norm2 = LayerNorm(dim, lazy=lazy)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, lazy=lazy)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, lazy=lazy)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))

    def zero_residual(self) -> None:
        """Zero the residual branches so the block is an exact identity."""
        for p in (self.attn.o.weight, self.attn.o.bias, self.fc2.weight, self.fc2.bias):
            p.data = np.zeros_like(p.data)


class SkipPath(Module):
    """Voxelwise linear projection of the raw input to the decoder's skip channels."""

    def __init__(self, modality: str, in_channels: int, channels: int, rng: Rng | None = None,
                 group: str = BASE, zero: bool = False, lazy: bool = False):
        self.modality = modality
        self.proj = Linear(in_channels, channels, rng, group=group, zero=zero, lazy=lazy)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng | None = None, lazy: bool = False):
        d, p = cfg.dim, cfg.patch
        c0, c1, c2, c3 = cfg.decoder_channels
        self.sides = (1, p // 4, p // 2, p)
        s1, s2, s3 = self.sides[1:]
        self.proj0 = Linear(d, c0, rng, lazy=lazy)
        self.proj1 = Linear(d, s1**3 * c1, rng, lazy=lazy)
        self.mix1 = Linear(c0 + c1, c1, rng, lazy=lazy)
        self.proj2 = Linear(d, s2**3 * c2, rng, lazy=lazy)
        self.mix2 = Linear(c1 + c2, c2, rng, lazy=lazy)
        self.proj3 = Linear(d, s3**3 * c3, rng, lazy=lazy)
        self.mix3 = Linear(c2 + c3 + cfg.skip_channels, cfg.decoder_final, rng, lazy=lazy)
        self.classifier = Linear(cfg.decoder_final, cfg.classes, rng, lazy=lazy)

    def __call__(self, taps: Sequence[Tensor], skip: Tensor, grid: int) -> Tensor:
        """``taps`` are (B, N, d) token grids ordered shallow -> deep."""
        t1, t2, t3, t4 = taps
        side = grid * self.sides[3]
        if skip.shape[1:4] != (side, side, side):
            raise ShapeError(f"skip activation grid {skip.shape[1:4]} does not match decoder output side {side}")
        for t in taps:
            if t.shape[1] != grid**3:
                raise ShapeError(f"decoder expects {grid ** 3} tokens per tap, got {t.shape[1]}")
        x = depatch(self.proj0(t4), grid, 1)
        x = ad.upsample_nearest(x, self.sides[1])
        x = ad.relu(self.mix1(ad.concat([x, depatch(self.proj1(t3), grid, self.sides[1])], axis=-1)))
        x = ad.upsample_nearest(x, 2)
        x = ad.relu(self.mix2(ad.concat([x, depatch(self.proj2(t2), grid, self.sides[2])], axis=-1)))
        x = ad.upsample_nearest(x, 2)
        x = ad.concat([x, depatch(self.proj3(t1), grid, self.sides[3]), skip], axis=-1)
        return self.classifier(ad.relu(self.mix3(x)))


# the model --------------------------------------------------------------------


class SegmentationModel(Module):
    """Uni-modal (``primary`` = "ct" or "pet") or early-fusion ("ctpet") segmenter.

    The multi-modal extension attributes (``pet_embedding``, ``pet_skip``,
    ``beta``, ``adapter``) stay ``None`` until :func:`pemma.adaptation.extend_multimodal`
    adds them.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, primary: str = "ct", lazy: bool = False):
        cfg = config or ModelConfig()
        if primary not in MODES:
            raise ValueError(f"primary modality must be one of {MODES}")
        self.config = cfg
        self.primary = primary
        rng = Rng(seed, "model")
        in_ch = 2 if primary == "ctpet" else 1
        self.embedding = PatchEmbedding(primary.upper(), cfg.patch, cfg.dim, cfg.grid, in_ch, rng.child("embed"), lazy=lazy)
        brng = rng.child("blocks")
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, brng.child(i), lazy) for i in range(cfg.depth)]
        self.skip = SkipPath(primary, in_ch, cfg.skip_channels, rng.child("skip"), lazy=lazy)
        self.decoder = Decoder(cfg, rng.child("decoder"), lazy)
        self.pet_embedding: PatchEmbedding | None = None
        self.pet_skip: SkipPath | None = None
        self.beta = None
        self.adapter = None

    @property
    def dtype(self):
        return self.embedding.weight.dtype

    @property
    def is_multimodal(self) -> bool:
        return self.pet_embedding is not None

    def available_modes(self, zero_fill: bool = False) -> tuple[str, ...]:
        if self.primary == "ctpet":
            return MODES if zero_fill else ("ctpet",)
        if self.primary == "pet":
            return ("pet",)
        return MODES if self.is_multimodal else ("ct",)

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.ndim == 5 else ad.reshape(x, x.shape + (1,))
        arr = np.asarray(x, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim == 4:
            arr = arr[..., None]
        return Tensor(arr)

    def encode(self, ct: TokenSequence, pet: TokenSequence | None = None) -> list[TokenSequence]:
        return encoder_forward(self, ct, pet)

    def logits(self, ct=None, pet=None, mode: str = "ct", routing: str | None = None,
               zero_fill: bool = False, return_hiddens: bool = False):
        """Voxel logits (B, D, D, D, classes) for a batch of (B, D, D, D) volumes."""
        segments, skip = self._inputs(ct, pet, mode, zero_fill)
        grid = segments[0].tokens.shape[1] ** (1 / 3)
        grid = int(round(grid))
        hiddens = encoder_forward(self, *segments)
        taps = route_to_decoder(hiddens, routing or self.config.routing, self.config.taps)
        out = decode(self, taps, skip, grid)
        return (out, hiddens) if return_hiddens else out

    def _inputs(self, ct, pet, mode: str, zero_fill: bool):
        if mode not in MODES:
            raise ModalityError(f"unknown mode {mode!r}")
        if mode not in self.available_modes(zero_fill):
            raise ModalityError(f"mode {mode!r} is not available for this model (has {self.available_modes(zero_fill)})")
        need_ct = mode in ("ct", "ctpet")
        need_pet = mode in ("pet", "ctpet")
        if need_ct and ct is None:
            raise ModalityError(f"mode {mode!r} needs a CT volume")
        if need_pet and pet is None:
            raise ModalityError(f"mode {mode!r} needs a PET volume")
        x_c = self._as_input(ct) if need_ct else None
        x_p = self._as_input(pet) if need_pet else None

        if self.primary == "ctpet":
            ref = x_c if x_c is not None else x_p
            zeros = Tensor(np.zeros(ref.shape, dtype=self.dtype))
            x = ad.concat([x_c if x_c is not None else zeros, x_p if x_p is not None else zeros], axis=-1)
            return [self.embedding(x)], self.skip(x)
        if self.primary == "pet":
            return [self.embedding(x_p)], self.skip(x_p)
        if mode == "ct":
            return [self.embedding(x_c)], self.skip(x_c)
        if mode == "pet":
            x_c, x_p = self.adapter(x_p)
        ct_tokens = self.embedding(x_c)
        pet_tokens = self.pet_embedding(x_p)
        skip = skip_combine(self.skip(x_c), self.pet_skip(x_p), self.beta)
        return [ct_tokens, pet_tokens], skip

    def forward(self, ct=None, pet=None, mode: str = "ct", **kw) -> Tensor:
        """Class probabilities (B, D, D, D, classes)."""
        return ad.softmax(self.logits(ct, pet, mode, **kw), axis=-1)


def skip_combine(z_c: Tensor, z_p: Tensor, beta) -> Tensor:
    """z_cp = z_c + beta * z_p."""
    if z_c.shape != z_p.shape:
        raise ShapeError(f"skip activations differ in shape: {z_c.shape} vs {z_p.shape}")
    return z_c + ad.mul(beta, z_p)


def embed_patches(volume, embedding: PatchEmbedding) -> TokenSequence:
    if not isinstance(volume, Tensor):
        arr = np.asarray(volume, dtype=embedding.weight.dtype)
        if arr.ndim == 3:
            arr = arr[None, ..., None]
        elif arr.ndim == 4:
            arr = arr[None]
        volume = Tensor(arr)
    return embedding(volume)


def encoder_forward(model: SegmentationModel, ct: TokenSequence, pet: TokenSequence | None = None) -> list[TokenSequence]:
    """Hidden token sequences after each block; CT and PET tokens attend jointly."""
    d = model.config.dim
    if ct.tokens.shape[-1] != d or (pet is not None and pet.tokens.shape[-1] != d):
        raise ShapeError(f"token dim must be {d}")
    if pet is None:
        x, segments = ct.tokens, ct.segments
    else:
        x = ad.concat([ct.tokens, pet.tokens], axis=1)
        segments = ct.segments + pet.segments
    hiddens = []
    for block in model.blocks:
        x = block(x)
        hiddens.append(TokenSequence(x, segments))
    return hiddens


def alternate_indices(n: int) -> np.ndarray:
    """First n positions of the interleaving c0, p0, c1, p1, ... of two n-token segments."""
    inter = np.empty(2 * n, dtype=np.int64)
    inter[0::2] = np.arange(n)
    inter[1::2] = np.arange(n, 2 * n)
    return inter[:n]


def route_to_decoder(hiddens: Sequence[TokenSequence], policy: str = "ct_only",
                     taps: Sequence[int] | None = None) -> list[Tensor]:
    """Select N tokens per tapped block for the decoder."""
    if policy not in ROUTING_POLICIES:
        raise ValueError(f"unknown routing policy {policy!r}")
    if taps is None:
        L = len(hiddens)
        taps = tuple(max(1, (L * k) // 4) for k in (1, 2, 3, 4))
    out = []
    for t in taps:
        seq = hiddens[t - 1]
        if len(seq.segments) == 1:
            # a single-modality sequence already has N tokens
            out.append(seq.tokens)
            continue
        if policy == "ct_only":
            sl = seq.span("ct")
            out.append(seq.tokens[:, sl])
        elif policy == "pet_only":
            sl = seq.span("pet")
            out.append(seq.tokens[:, sl])
        else:
            n = seq.span("ct").stop - seq.span("ct").start
            if seq.span("pet") != slice(n, 2 * n):
                raise ShapeError("alternate routing needs equal CT-first, PET-second segments")
            out.append(ad.getitem(seq.tokens, (slice(None), alternate_indices(n))))
    return out


def decode(model: SegmentationModel, decoder_inputs: Sequence[Tensor], skip_activation: Tensor, grid: int) -> Tensor:
    return model.decoder(decoder_inputs, skip_activation, grid)


def model_forward(model: SegmentationModel, case, mode: str = "ct", **kw) -> np.ndarray:
    """Per-voxel class probabilities (D, D, D, classes) for one case."""
    ct = case.ct.grid if case.ct is not None else None
    pet = case.pet.grid if case.pet is not None else None
    if mode in ("pet", "ctpet") and pet is None:
        raise ModalityError(f"case {case.case_id!r} has no PET volume for mode {mode!r}")
    return model.forward(ct, pet, mode, **kw).data[0]


# prognosis --------------------------------------------------------------------


class PrognosisHead(Module):
    """Two-layer MLP from pooled encoder tokens (and optional EHR features) to time-bin logits."""

    def __init__(self, dim: int, ehr_dim: int = 0, hidden: int = 32, bins: int = 20, seed: int = 0,
                 zero: bool = False):
        rng = Rng(seed, "prognosis")
        self.ehr_dim = ehr_dim
        self.fc1 = Linear(dim + ehr_dim, hidden, rng, group=HEAD, zero=zero)
        self.fc2 = Linear(hidden, bins, rng, group=HEAD, zero=zero)

    def __call__(self, pooled: Tensor, ehr: Tensor | None = None) -> Tensor:
        if self.ehr_dim:
            if ehr is None:
                raise ModalityError("prognosis head expects EHR features")
            pooled = ad.concat([pooled, ehr], axis=-1)
        return self.fc2(ad.relu(self.fc1(pooled)))


def pooled_features(model: SegmentationModel, ct=None, pet=None, mode: str = "ct") -> Tensor:
    """Mean over all final-block tokens, (B, d)."""
    segments, _ = model._inputs(ct, pet, mode, zero_fill=False)
    hiddens = encoder_forward(model, *segments)
    return ad.mean(hiddens[-1].tokens, axis=1)


def prognosis_forward(model: SegmentationModel, head: PrognosisHead, ct=None, pet=None, ehr=None,
                      mode: str = "ct") -> Tensor:
    """Per-subject probability mass over the time bins, (B, bins)."""
    pooled = pooled_features(model, ct, pet, mode)
    if ehr is not None and not isinstance(ehr, Tensor):
        ehr = Tensor(np.asarray(ehr, dtype=pooled.dtype))
    return ad.softmax(head(pooled, ehr), axis=-1)
