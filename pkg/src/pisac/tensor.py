"""Reverse-mode automatic differentiation over dense float64 arrays.

A global tape records every differentiable operation whose inputs require
gradients. ``backward(loss)`` replays the tape in reverse, accumulating
``d loss / d tensor`` into each reachable tensor's ``grad`` buffer.
Accumulation is additive; callers reset gradients explicitly between
optimizer steps.

Everything is float64. There is no GPU path, no graph optimization and no
higher-order differentiation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class ContractError(ValueError):
    """Raised when an operation's calling contract is violated."""


class Tensor:
    """A dense float64 array with an optional gradient accumulator."""

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Leaf parameters carry an eager zero accumulator; op outputs are
        # allocated lazily during backward.
        self.grad: np.ndarray | None = (
            np.zeros_like(self.values) if requires_grad else None
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        """Reset the gradient accumulator to all zeros."""
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars and ndarrays are lifted to constant tensors.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        # Division is deliberately not a tape op; only constant divisors
        # are supported, as a multiplication by the reciprocal.
        if isinstance(other, Tensor):
            raise ContractError("divide: tensor/tensor division is not a registered op")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Lift scalars and arrays to constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    """One tape record: the op, its inputs, its output and a backward rule."""

    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op: str, inputs: tuple, out: Tensor, bwd: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of operations; inputs always precede their outputs."""

    def __init__(self):
        self.records: list[_Node] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_TAPE = Tape()
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    """Scope inside which no operations are recorded."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _recording(inputs: Iterable[Tensor]) -> bool:
    return _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)


def _make_output(values: np.ndarray, op: str, inputs: tuple, bwd) -> Tensor:
    out = Tensor(values)
    if _recording(inputs):
        out.requires_grad = True
        out.grad = None  # allocated lazily during backward
        _TAPE.records.append(_Node(op, inputs, out, bwd))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d tensor into every reachable tensor's grad.

    The active tape is consumed: records are replayed newest-first and the
    tape is cleared afterwards, so exactly one backward pass can be run per
    recorded computation.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    records = _TAPE.records
    # Mark the nodes actually upstream of the loss so unrelated tape entries
    # cost nothing.
    needed = {id(loss)}
    flags = []
    for node in reversed(records):
        hit = id(node.out) in needed
        flags.append(hit)
        if hit:
            for t in node.inputs:
                if t.requires_grad:
                    needed.add(id(t))
    flags.reverse()

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.values)
    loss.grad += 1.0
    for node, hit in zip(reversed(records), reversed(flags)):
        if hit and node.out.grad is not None:
            node.bwd(node.out.grad)
    _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make_output(a.values + b.values, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make_output(a.values - b.values, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _make_output(a.values * b.values, "mul", (a, b), bwd)


def square(x) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        _accumulate(x, 2.0 * x.values * g)

    return _make_output(np.square(x.values), "square", (x,), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out_vals = np.tanh(x.values)

    def bwd(g):
        _accumulate(x, g * (1.0 - out_vals * out_vals))

    return _make_output(out_vals, "tanh", (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_vals = np.exp(x.values)

    def bwd(g):
        _accumulate(x, g * out_vals)

    return _make_output(out_vals, "exp", (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        _accumulate(x, g / x.values)

    return _make_output(np.log(x.values), "log", (x,), bwd)


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    x = as_tensor(x)
    v = x.values
    out_vals = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def bwd(g):
        # sigmoid(x), stable
        sig = np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))
        _accumulate(x, g * sig)

    return _make_output(out_vals, "softplus", (x,), bwd)


def min_elementwise(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("min_elementwise", a, b)
    take_a = a.values <= b.values

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make_output(np.minimum(a.values, b.values), "min_elementwise", (a, b), bwd)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    """Reinsert reduced axes as size-1 dims so g broadcasts back to shape."""
    full = list(g.shape)
    for ax in sorted(axes):
        full.insert(ax, 1)
    return g.reshape(full)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - op name fixed
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)

    def bwd(g):
        if not keepdims:
            g = _expand_reduced(g, x.shape, axes)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make_output(np.sum(x.values, axis=axes, keepdims=keepdims), "sum", (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]

    def bwd(g):
        if not keepdims:
            g = _expand_reduced(g, x.shape, axes)
        _accumulate(x, np.broadcast_to(g / count, x.shape).copy())

    return _make_output(np.mean(x.values, axis=axes, keepdims=keepdims), "mean", (x,), bwd)


def logsumexp(x, axis: int) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    m = np.max(x.values, axis=ax, keepdims=True)
    shifted = np.exp(x.values - m)
    total = np.sum(shifted, axis=ax, keepdims=True)
    out_vals = np.squeeze(m + np.log(total), axis=ax)

    def bwd(g):
        soft = shifted / total
        _accumulate(x, np.expand_dims(g, ax) * soft)

    return _make_output(out_vals, "logsumexp", (x,), bwd)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    """Shape plumbing only; values are untouched."""
    x = as_tensor(x)
    shape = tuple(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _make_output(x.values.reshape(shape), "reshape", (x,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: need at least one input")
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    values = np.concatenate([t.values for t in ts], axis=ax)
    return _make_output(values, "concat", tuple(ts), bwd)


def stop_gradient(x) -> Tensor:
    """Block gradient flow; the result shares values but never records."""
    x = as_tensor(x)
    return Tensor(x.values)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.values.T)
        if b.requires_grad:
            _accumulate(b, a.values.T @ g)

    return _make_output(a.values @ b.values, "matmul", (a, b), bwd)


def _conv_geometry(h: int, w: int, stride: int) -> tuple[int, int, tuple, tuple]:
    oh = -(-h // stride)
    ow = -(-w // stride)
    pad_h = max((oh - 1) * stride + 3 - h, 0)
    pad_w = max((ow - 1) * stride + 3 - w, 0)
    return oh, ow, (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """3x3 'same'-padded convolution, NHWC layout, stride 1 or 2.

    Implemented as nine shifted GEMMs; only the kernel geometry the encoder
    architectures need is supported.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != 3 or w.shape[1] != 3:
        raise DimensionError(f"conv2d: need NHWC input and 3x3 kernel, got {x.shape}, {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input channels {x.shape[3]} != kernel channels {w.shape[2]}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d: stride must be 1 or 2, got {stride}")
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    oh, ow, (pt, pb), (pl, pr) = _conv_geometry(h, wd, stride)
    xp = np.pad(x.values, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    out_vals = np.zeros((n, oh, ow, cout))
    flat = xp.shape  # padded

    def _slices(ki, kj):
        return (
            slice(None),
            slice(ki, ki + (oh - 1) * stride + 1, stride),
            slice(kj, kj + (ow - 1) * stride + 1, stride),
            slice(None),
        )

    for ki in range(3):
        for kj in range(3):
            xs = xp[_slices(ki, kj)].reshape(-1, cin)
            out_vals += (xs @ w.values[ki, kj]).reshape(n, oh, ow, cout)

    def bwd(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            gw = np.empty_like(w.values)
            for ki in range(3):
                for kj in range(3):
                    xs = xp[_slices(ki, kj)].reshape(-1, cin)
                    gw[ki, kj] = xs.T @ g2
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros(flat)
            for ki in range(3):
                for kj in range(3):
                    gxp[_slices(ki, kj)] += (g2 @ w.values[ki, kj].T).reshape(n, oh, ow, cin)
            _accumulate(x, gxp[:, pt:pt + h, pl:pl + wd, :])

    return _make_output(out_vals, "conv2d", (x, w), bwd)


# ---------------------------------------------------------------------------
# Normalization ops
# ---------------------------------------------------------------------------

FRN_EPS = 1e-6
LN_EPS = 1e-5
BN_EPS = 1e-5


def frn_tlu(x, gamma, beta, tau) -> Tensor:
    """Filter response normalization followed by a thresholded linear unit.

    Per channel: y = gamma * x / sqrt(mean_{H,W}(x^2) + eps) + beta, then
    max(y, tau) with a learned threshold.
    """
    x, gamma, beta, tau = as_tensor(x), as_tensor(gamma), as_tensor(beta), as_tensor(tau)
    if x.ndim != 4:
        raise DimensionError(f"frn_tlu: need NHWC input, got {x.shape}")
    c = x.shape[3]
    for name, p in (("gamma", gamma), ("beta", beta), ("tau", tau)):
        if p.shape != (c,):
            raise DimensionError(f"frn_tlu: {name} shape {p.shape} != ({c},)")
    hw = x.shape[1] * x.shape[2]
    nu2 = np.mean(np.square(x.values), axis=(1, 2), keepdims=True)
    r = 1.0 / np.sqrt(nu2 + FRN_EPS)
    xn = x.values * r
    y = xn * gamma.values + beta.values
    above = y > tau.values
    out_vals = np.where(above, y, tau.values)

    def bwd(g):
        gy = np.where(above, g, 0.0)
        if tau.requires_grad:
            _accumulate(tau, np.sum(np.where(above, 0.0, g), axis=(0, 1, 2)))
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(gy * xn, axis=(0, 1, 2)))
        if beta.requires_grad:
            _accumulate(beta, np.sum(gy, axis=(0, 1, 2)))
        if x.requires_grad:
            gxn = gy * gamma.values
            # nu2 depends on x: d nu2 / dx = 2x / HW, d r / d nu2 = -r^3 / 2
            gnu2 = np.sum(gxn * x.values, axis=(1, 2), keepdims=True) * (-0.5 * r ** 3)
            _accumulate(x, gxn * r + x.values * (2.0 / hw) * gnu2)

    return _make_output(out_vals, "frn_tlu", (x, gamma, beta, tau), bwd)


def layer_norm(x, gain, bias) -> Tensor:
    """Normalize over the last axis with learned gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: params {gain.shape}/{bias.shape} != ({d},)")
    mu = np.mean(x.values, axis=-1, keepdims=True)
    xc = x.values - mu
    var = np.mean(np.square(xc), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + LN_EPS)
    xn = xc * r
    out_vals = xn * gain.values + bias.values

    def bwd(g):
        batch_axes = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, np.sum(g * xn, axis=batch_axes))
        if bias.requires_grad:
            _accumulate(bias, np.sum(g, axis=batch_axes))
        if x.requires_grad:
            gxn = g * gain.values
            gx = r * (gxn - np.mean(gxn, axis=-1, keepdims=True)
                      - xn * np.mean(gxn * xn, axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _make_output(out_vals, "layer_norm", (x, gain, bias), bwd)


class BatchNormState:
    """Running first/second moments for batch normalization at evaluation."""

    def __init__(self, dim: int, momentum: float = 0.99):
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * batch_mean
        self.running_var = m * self.running_var + (1.0 - m) * batch_var


def batch_norm_mean(x, scale, offset, state: BatchNormState,
                    training: bool, update_stats: bool | None = None) -> Tensor:
    """Batch normalization over axis 0 for encoder mean outputs.

    Training mode normalizes with per-batch statistics (and, by default,
    folds them into the running averages); evaluation mode uses the stored
    running averages.
    """
    x, scale, offset = as_tensor(x), as_tensor(scale), as_tensor(offset)
    if x.ndim != 2:
        raise DimensionError(f"batch_norm_mean: need (batch, dim) input, got {x.shape}")
    d = x.shape[1]
    if scale.shape != (d,) or offset.shape != (d,):
        raise DimensionError(f"batch_norm_mean: params {scale.shape}/{offset.shape} != ({d},)")
    if update_stats is None:
        update_stats = training

    if training:
        n = x.shape[0]
        mu = np.mean(x.values, axis=0)
        var = np.var(x.values, axis=0)
        if update_stats:
            state.update(mu, var)
        r = 1.0 / np.sqrt(var + BN_EPS)
        xn = (x.values - mu) * r
        out_vals = xn * scale.values + offset.values

        def bwd(g):
            if scale.requires_grad:
                _accumulate(scale, np.sum(g * xn, axis=0))
            if offset.requires_grad:
                _accumulate(offset, np.sum(g, axis=0))
            if x.requires_grad:
                gxn = g * scale.values
                gx = r * (gxn - np.mean(gxn, axis=0)
                          - xn * np.mean(gxn * xn, axis=0))
                _accumulate(x, gx)

        return _make_output(out_vals, "batch_norm_mean", (x, scale, offset), bwd)

    r = 1.0 / np.sqrt(state.running_var + BN_EPS)
    xn = (x.values - state.running_mean) * r
    out_vals = xn * scale.values + offset.values

    def bwd_eval(g):
        if scale.requires_grad:
            _accumulate(scale, np.sum(g * xn, axis=0))
        if offset.requires_grad:
            _accumulate(offset, np.sum(g, axis=0))
        if x.requires_grad:
            _accumulate(x, g * scale.values * r)

    return _make_output(out_vals, "batch_norm_mean", (x, scale, offset), bwd_eval)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

OP_REGISTRY: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": sum,
    "mean": mean,
    "logsumexp": logsumexp,
    "softplus": softplus,
    "min_elementwise": min_elementwise,
    "concat": concat,
    "stop_gradient": stop_gradient,
    "frn_tlu": frn_tlu,
    "layer_norm": layer_norm,
    "batch_norm_mean": batch_norm_mean,
    "reshape": reshape,
}


def forward_op(name: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by registry name."""
    if name not in OP_REGISTRY:
        raise ContractError(f"forward_op: unknown op {name!r}")
    return OP_REGISTRY[name](*inputs, **kwargs)
