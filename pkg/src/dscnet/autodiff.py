"""Dense tensors with tape-based reverse-mode differentiation.

Every forward op produces a new :class:`Tensor` and, when any input requires
a gradient, a :class:`TapeRecord` holding the backward closure. ``backward``
collects the records reachable from a scalar loss, replays them newest-first
and releases them afterwards.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeRecord",
    "ComputationTape",
    "NonFiniteError",
    "ShapeError",
    "precision",
    "no_grad",
    "get_dtype",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "sum",
    "mean",
    "conv2d",
    "max_pool2x2",
    "upsample_nearest2x",
    "concat_channels",
    "channel_bias",
    "cross_entropy",
    "backward",
    "SGD",
    "sgd_step",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = {"dtype": np.float32, "grad_enabled": True}
_seq = itertools.count()


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Run tensor creation and ops in ``dtype`` (float64 for gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@dataclass(eq=False)
class TapeRecord:
    op: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_record", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=get_dtype(), order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._record: Optional[TapeRecord] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, out: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap ``out`` and record it on the tape if any input tracks gradients."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    res = Tensor.__new__(Tensor)
    res.data = out.astype(get_dtype(), copy=False)
    res.grad = None
    res.name = ""
    res._record = None
    res.requires_grad = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
    if res.requires_grad:
        res._record = TapeRecord(op, inputs, res, backward_fn)
    return res


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    return _result("scale", a.data * k, (a,), lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor method
    total = np.sum(x.data, dtype=np.float64)
    shape = x.shape
    return _result(
        "sum", np.asarray(total), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),)
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    total = np.sum(x.data, dtype=np.float64) / n
    shape = x.shape
    return _result(
        "mean", np.asarray(total), (x,), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),)
    )


# -- convolution and resampling ---------------------------------------------


def batched_outer(g: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``sum_b g[b] @ cols[b].T`` for g [B,O,N] and cols [B,K,N]."""
    acc = g[0] @ cols[0].T
    for i in range(1, g.shape[0]):
        acc += g[i] @ cols[i].T
    return acc


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``w`` [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weights, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, weights expect {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d: padding must be >= 0 and stride >= 1")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols[b, c, i, j, :, :] = the (i, j) tap of every output position
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
    cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(B, cout, Ho, Wo)

    def backward_fn(g):
        g2 = g.reshape(B, cout, Ho * Wo)
        gw = batched_outer(g2, cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[
                        :, :, i, j
                    ]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _result("conv2d", out, inputs, backward_fn)


def max_pool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x2: spatial extents must be even, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        B, C, H // 2, W // 2, 4
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _result("max_pool2x2", out, (x,), backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result("upsample_nearest2x", out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape}, {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` [C] to ``x`` [B,C,H,W]."""
    if b.shape != (x.shape[1],):
        raise ShapeError(f"channel_bias: bias {b.shape} does not match {x.shape[1]} channels")
    out = x.data + b.data[None, :, None, None]
    return _result("channel_bias", out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))


# -- loss -------------------------------------------------------------------


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean binary cross-entropy computed from logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so saturated logits never
    take the log of zero.
    """
    y = label.data if isinstance(label, Tensor) else np.asarray(label)
    if y.shape != logits.shape:
        raise ShapeError(f"cross_entropy: label shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("cross_entropy: label values must be 0 or 1")
    z = logits.data.astype(np.float64)
    per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    loss = per_pixel.sum() / n
    p = _sigmoid_np(z)

    def backward_fn(g):
        return ((g * (p - y) / n).astype(logits.data.dtype),)

    return _result("cross_entropy", np.asarray(loss), (logits,), backward_fn)


# -- reverse pass -----------------------------------------------------------


class ComputationTape:
    """The records reachable from one output, ordered oldest to newest."""

    def __init__(self, output: Tensor):
        seen = set()
        records = []
        stack = [output._record] if output._record is not None else []
        while stack:
            rec = stack.pop()
            if id(rec) in seen:
                continue
            seen.add(id(rec))
            records.append(rec)
            for t in rec.inputs:
                if t._record is not None:
                    stack.append(t._record)
        records.sort(key=lambda r: r.seq)
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, seed_grad: np.ndarray) -> None:
        grads = {id(self.records[-1].output): seed_grad}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                if t._record is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi

    def free(self) -> None:
        # freed outputs become constants, so a second backward through them fails
        for rec in self.records:
            rec.output._record = None
            rec.output.requires_grad = False
            rec.inputs = ()
        self.records = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise RuntimeError("backward: loss is not on the tape (already freed or no inputs require grad)")
    tape = ComputationTape(loss)
    tape.replay(np.ones_like(loss.data))
    tape.free()


# -- optimisation -----------------------------------------------------------


class SGD:
    """Stochastic gradient descent with heavy-ball momentum.

    ``v <- momentum * v + grad; p <- p - lr * v``. Gradients are left in place.

    A parameter without a gradient is an error unless ``skip_missing`` is set,
    in which case it (and its velocity) is left untouched for that step. Fusion
    branches dropped for a batch take this path.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0, skip_missing: bool = False):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.skip_missing = skip_missing
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if not self.skip_missing:
            for p in self.params:
                if p.grad is None:
                    raise RuntimeError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= (self.lr * v).astype(p.data.dtype)
            else:
                p.data -= (self.lr * p.grad).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(math.fsum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64))) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0, state: Optional[dict] = None) -> None:
    """Functional form of :class:`SGD`; pass the same ``state`` dict between calls for momentum."""
    params = list(params)
    if state is None:
        state = {}
    opt = state.get("opt")
    if opt is None or opt.params != params:
        opt = state["opt"] = SGD(params, lr, momentum)
    opt.lr, opt.momentum = lr, momentum
    opt.step()
