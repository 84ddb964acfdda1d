"""Dense tensors with tape-recorded reverse-mode differentiation.

Operations record a node on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a tape nothing is recorded, which is
how inference runs.  Storage is a row-major numpy array; every op returns a new
array, so tensors are never mutated by the graph.

    >>> x = Tensor([2.0, -1.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad.tolist()
    [4.0, -2.0]
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pemma.exceptions import NumericError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "relu",
    "gelu",
    "tanh",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "softmax",
    "log_softmax",
    "layer_norm",
    "upsample_nearest",
    "clip",
    "cumsum",
    "finite_difference_check",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5

_TAPES: list["Tape"] = []


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        if popped is not self:
            raise TapeError("tapes must be exited in LIFO order")

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor", retain: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
        if loss._node is None or loss._tape is not self:
            raise TapeError("loss tensor was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t._node is None:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, leaf in leaves.items():
            g = np.asarray(grads[key], dtype=leaf.data.dtype)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if not retain:
            self.nodes = []


def backward(tape: Tape, loss: "Tensor") -> None:
    tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: Tape | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable, op: str) -> Tensor:
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, tuple(inputs), out, bwd)
        out._node = node
        out._tape = tape
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)

    def bwd(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make(x.data**p, (x,), bwd, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out.astype(v.dtype, copy=False), (x,), bwd, "gelu")


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    return _make(out, (x,), lambda g: (g * mask,), "clip")


# linear algebra / reductions ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(np.asarray(out), (x,), bwd, "mean")


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), bwd, "cumsum")


# shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    fancy = _fancy(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return _make(np.array(x.data[idx]), (x,), bwd, "getitem")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of a channel-last grid (B, X, Y, Z, C)."""
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest expects (B, X, Y, Z, C), got {x.shape}")
    f = int(factor)
    if f == 1:
        return x
    b, nx, ny, nz, c = x.shape
    view = x.data[:, :, None, :, None, :, None, :]
    out = np.broadcast_to(view, (b, nx, f, ny, f, nz, f, c)).reshape(b, nx * f, ny * f, nz * f, c)

    def bwd(g):
        return (g.reshape(b, nx, f, ny, f, nz, f, c).sum(axis=(2, 4, 6)),)

    return _make(out, (x,), bwd, "upsample")


# normalisation ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bwd, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    n = x.shape[-1]
    if n == 0:
        raise ShapeError("layer_norm over a zero-length row")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd, "layer_norm")


# gradient oracle -------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_components: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the taped gradient and central differences.

    ``x`` is perturbed in place, so ``f`` may ignore its argument and read a
    model parameter directly as long as ``x`` is that parameter.  With
    ``max_components`` only a seeded random subset of entries is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("finite_difference_check input contains non-finite values")

    was = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise NumericError("NaN encountered during evaluation")
        if y._node is None:
            analytic = np.zeros_like(x.data, dtype=np.float64)
        else:
            tape.backward(y)
            analytic = np.zeros(x.shape) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    finally:
        x.requires_grad = was
        x.grad = saved_grad

    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = np.array(x.data)
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_components is not None and flat.size > max_components:
        idx = np.random.default_rng(seed).choice(flat.size, size=max_components, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        fm = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("NaN encountered during evaluation")
        cd = (fp - fm) / (2 * eps)
        a = float(a_flat[i])
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
        worst = max(worst, err)
    return worst
