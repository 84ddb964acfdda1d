"""Parameter containers: a minimal module tree over :mod:`pemma.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from pemma import autodiff as ad
from pemma.autodiff import Tensor
from pemma.exceptions import ShapeError
from pemma.rng import Rng

# Parameter groups of the multi-modal model.  BASE is the frozen pre-trained set.
BASE = "base"
PET_EMBEDDING = "pet_embedding"
PEFT = "peft"
PET_SKIP = "pet_skip"
ADAPTER = "adapter"
HEAD = "head"
GROUPS = (BASE, PET_EMBEDDING, PEFT, PET_SKIP, ADAPTER, HEAD)


class Parameter(Tensor):
    """A leaf tensor owned by a module, tagged with its parameter group."""

    __slots__ = ("group",)

    def __init__(self, data, group: str = BASE, frozen: bool = False, dtype=np.float32):
        if isinstance(data, np.ndarray) and not data.flags.writeable:
            # shape-only placeholder (see ``lazy`` below); keep the view as is
            super().__init__(np.zeros((), dtype=dtype))
            self.data = data
        else:
            super().__init__(np.array(data, dtype=dtype))
        self.requires_grad = not frozen
        self.group = group

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.requires_grad = not value

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, group={self.group!r}, frozen={self.frozen})"


def make_param(shape, rng: Rng | None = None, std: float = 0.0, group: str = BASE, lazy: bool = False,
               fill: float = 0.0) -> Parameter:
    """Create a parameter; ``lazy`` gives a zero-memory placeholder used for counting only."""
    shape = tuple(int(s) for s in shape)
    if lazy:
        return Parameter(np.broadcast_to(np.float32(0), shape), group=group)
    if std > 0:
        if rng is None:
            raise ValueError("random init needs an rng")
        return Parameter(rng.normal(shape, std=std), group=group)
    return Parameter(np.full(shape, fill, dtype=np.float32), group=group)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item
            elif isinstance(value, dict):
                for key in value:
                    item = value[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{key}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_group(self, group: str) -> None:
        for p in self.parameters():
            p.group = group

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False


class Linear(Module):
    """y = x @ W.T + b with W stored (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: Rng | None = None, bias: bool = True,
                 group: str = BASE, zero: bool = False, lazy: bool = False):
        std = 0.0 if zero else (2.0 / (in_features + out_features)) ** 0.5
        self.weight = make_param((out_features, in_features), rng, std, group, lazy)
        self.bias = make_param((out_features,), group=group, lazy=lazy) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, group: str = BASE, lazy: bool = False):
        self.gamma = make_param((dim,), group=group, lazy=lazy, fill=1.0)
        self.beta = make_param((dim,), group=group, lazy=lazy)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)
