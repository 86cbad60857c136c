"""Dense tensors with a recording tape for reverse-mode differentiation.

Video activations use the layout ``(B, C, T, H, W)``.  Operations run eagerly
on numpy arrays; when a :class:`Tape` is active and any input requires a
gradient, the operation is appended to the tape together with its backward
rule.  :func:`backward` replays the tape in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

WIDE = np.float64
NARROW = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Hashing is by identity, so tensors can key gradient dictionaries.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(WIDE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations evaluated inside the block are
    recorded in execution order, which is a topological order by
    construction.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Temporarily suspend recording (evaluation passes inside a training loop)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as the result of an op over ``inputs``.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Returns the gradient of every leaf tensor that requires one and is
    reachable from the loss; the same arrays are stored on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._used:
        raise RuntimeError("tape has already been consumed by backward")
    tape._used = True
    produced = {id(r.out) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = grads[key]
    return result


# --------------------------------------------------------------------------
# convolution


def _check_kernel(x: Tensor, w: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ValueError(f"{what}: input must be (B,C,T,H,W), got shape {x.shape}")
    if w.ndim != 5:
        raise ValueError(f"{what}: kernel must be (Cout,Cin,n,d,d), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"{what}: input channels {x.shape[1]} do not match kernel input channels "
            f"{w.shape[1]} (input {x.shape}, kernel {w.shape})"
        )


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, stride=(1, 1, 1), pad=(0, 0, 0)) -> Tensor:
    """Zero-padded, bias-free 3D convolution (cross-correlation).

    Accumulates one channel contraction per kernel offset, offsets visited in
    (t, y, x) order, so the summation order is fixed for a given shape.
    """
    _check_kernel(x, w, "conv3d")
    st, sh, sw = stride
    pt, ph, pw = pad
    B, Cin, T, H, W = x.shape
    Cout, _, n, kh, kw = w.shape
    To = conv_output_extent(T, n, st, pt)
    Ho = conv_output_extent(H, kh, sh, ph)
    Wo = conv_output_extent(W, kw, sw, pw)
    if To < 1 or Ho < 1 or Wo < 1:
        raise ValueError(f"conv3d: kernel {w.shape} with pad {pad} does not fit input {x.shape}")

    # channels-last padded copy: (B, Tp, Hp, Wp, Cin)
    xl = np.zeros((B, T + 2 * pt, H + 2 * ph, W + 2 * pw, Cin), dtype=x.dtype)
    xl[:, pt:pt + T, ph:ph + H, pw:pw + W, :] = np.moveaxis(x.data, 1, -1)
    wd = w.data
    out = np.zeros((B, To, Ho, Wo, Cout), dtype=np.result_type(x.dtype, w.dtype))
    spans = (st * (To - 1) + 1, sh * (Ho - 1) + 1, sw * (Wo - 1) + 1)

    def window(a, i, j):
        return (slice(None), slice(a, a + spans[0], st), slice(i, i + spans[1], sh),
                slice(j, j + spans[2], sw), slice(None))

    for a in range(n):
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(xl[window(a, i, j)], wd[:, :, a, i, j], axes=([4], [1]))
    out_data = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def bwd(g):
        gl = np.moveaxis(g, 1, -1)
        gw = np.zeros_like(wd) if w.requires_grad else None
        gx = np.zeros_like(xl) if x.requires_grad else None
        for a in range(n):
            for i in range(kh):
                for j in range(kw):
                    win = window(a, i, j)
                    if gw is not None:
                        gw[:, :, a, i, j] = np.tensordot(gl, xl[win], axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                    if gx is not None:
                        gx[win] += np.tensordot(gl, wd[:, :, a, i, j], axes=([4], [0]))
        if gx is not None:
            gx = np.ascontiguousarray(np.moveaxis(gx[:, pt:pt + T, ph:ph + H, pw:pw + W, :], -1, 1))
        return gx, gw

    return custom_op(out_data, (x, w), bwd)


def conv_spatial2d(x: Tensor, w: Tensor, stride_s: int = 1, pad_s: int | None = None) -> Tensor:
    """Per-frame ``1 x d x d`` convolution; ``pad_s`` defaults to ``d // 2``."""
    _check_kernel(x, w, "conv_spatial2d")
    if w.shape[2] != 1 or w.shape[3] != w.shape[4] or w.shape[3] % 2 == 0:
        raise ValueError(f"conv_spatial2d: kernel must be (Cout,Cin,1,d,d) with odd d, got {w.shape}")
    if stride_s < 1:
        raise ValueError("conv_spatial2d: stride must be >= 1")
    d = w.shape[3]
    pad_s = d // 2 if pad_s is None else pad_s
    if pad_s < 0:
        raise ValueError("conv_spatial2d: padding must be >= 0")
    return conv3d(x, w, (1, stride_s, stride_s), (0, pad_s, pad_s))


def _pointwise(w2: np.ndarray, x: np.ndarray) -> np.ndarray:
    # w2: (Cout, Cin); x: (B, Cin, ...) -> (B, Cout, ...)
    return np.moveaxis(np.tensordot(w2, x, axes=([1], [1])), 0, 1)


def conv_pointwise_channels(x: Tensor, w: Tensor) -> Tensor:
    """``1x1x1`` convolution: a channel-mixing matrix applied at every position."""
    _check_kernel(x, w, "conv_pointwise_channels")
    if w.shape[2:] != (1, 1, 1):
        raise ValueError(f"conv_pointwise_channels: kernel must be (Cout,Cin,1,1,1), got {w.shape}")
    w2 = w.data[:, :, 0, 0, 0]
    out = np.ascontiguousarray(_pointwise(w2, x.data))

    def bwd(g):
        gx = _pointwise(w2.T, g) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.tensordot(g, x.data, axes=([0, 2, 3, 4], [0, 2, 3, 4]))[:, :, None, None, None]
        return gx, gw

    return custom_op(out, (x, w), bwd)


def conv_temporal1d(x: Tensor, w: Tensor, stride_t: int = 1, pad_t: int = 0) -> Tensor:
    """``n x 1 x 1`` convolution along time."""
    _check_kernel(x, w, "conv_temporal1d")
    if w.shape[3:] != (1, 1):
        raise ValueError(f"conv_temporal1d: kernel must be (Cout,Cin,n,1,1), got {w.shape}")
    n = w.shape[2]
    if x.shape[2] + 2 * pad_t < n:
        raise ValueError(
            f"conv_temporal1d: {x.shape[2]} frames with padding {pad_t} shorter than kernel extent {n}"
        )
    return conv3d(x, w, (stride_t, 1, 1), (pad_t, 0, 0))


def linear_recurrence(s: Tensor, w: Tensor, h0: np.ndarray | Tensor | None = None) -> Tensor:
    """``h_t = w . h_{t-1} + s_t`` over the time axis, channel-mixing ``w``.

    ``s`` is ``(B, N, T, H, W)``; ``w`` is ``(N, N, 1, 1, 1)``; ``h0`` is
    ``(B, N, 1, H, W)`` or ``None`` for zeros.  The backward rule is
    backpropagation through time.
    """
    _check_kernel(s, w, "linear_recurrence")
    if w.shape[0] != w.shape[1] or w.shape[2:] != (1, 1, 1):
        raise ValueError(f"linear_recurrence: hidden kernel must be (N,N,1,1,1), got {w.shape}")
    B, N, T, H, W = s.shape
    h0_t = None
    if h0 is None:
        h_prev = np.zeros((B, N, 1, H, W), dtype=s.dtype)
    else:
        h0_t = as_tensor(h0)
        if h0_t.shape != (B, N, 1, H, W):
            raise ValueError(f"linear_recurrence: initial state {h0_t.shape} does not match {(B, N, 1, H, W)}")
        h_prev = h0_t.data
    w2 = w.data[:, :, 0, 0, 0]
    out = np.empty((B, N, T, H, W), dtype=np.result_type(s.dtype, w.dtype))
    for t in range(T):
        h_prev = _pointwise(w2, h_prev) + s.data[:, :, t:t + 1]
        out[:, :, t:t + 1] = h_prev
    first = np.zeros((B, N, 1, H, W), dtype=out.dtype) if h0_t is None else h0_t.data

    def bwd(g):
        gs = np.empty_like(out)
        gw = np.zeros((N, N), dtype=out.dtype)
        carry = np.zeros((B, N, 1, H, W), dtype=out.dtype)
        for t in range(T - 1, -1, -1):
            gh = g[:, :, t:t + 1] + carry
            gs[:, :, t:t + 1] = gh
            prev = out[:, :, t - 1:t] if t > 0 else first
            gw += np.tensordot(gh, prev, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            carry = _pointwise(w2.T, gh)
        grads = [gs, gw[:, :, None, None, None]]
        if h0_t is not None:
            grads.append(carry)
        return grads

    inputs = (s, w) if h0_t is None else (s, w, h0_t)
    return custom_op(out, inputs, bwd)


# --------------------------------------------------------------------------
# normalization and elementwise ops


@dataclass
class BatchNorm:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=WIDE, name: str = "bn") -> "BatchNorm":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("BatchNorm eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("BatchNorm momentum must lie in (0, 1)")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


_BN_AXES = (0, 2, 3, 4)


def batchnorm(x: Tensor, p: BatchNorm, training: bool) -> Tensor:
    """Normalize each channel over (B, T, H, W).

    Training mode uses the batch mean and population variance and updates
    the running statistics; evaluation mode uses the running statistics.
    """
    if x.ndim != 5 or x.shape[1] != p.channels:
        raise ValueError(f"batchnorm: input {x.shape} does not match {p.channels} channels")
    bshape = (1, -1, 1, 1, 1)
    gamma = p.gamma.data.reshape(bshape)
    beta = p.beta.data.reshape(bshape)
    if training:
        mean = x.data.mean(axis=_BN_AXES)
        var = x.data.var(axis=_BN_AXES)
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * var
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = (1.0 / np.sqrt(var + p.eps)).reshape(bshape)
    xhat = (x.data - mean.reshape(bshape)) * inv_std
    out = gamma * xhat + beta
    m = x.data.size // p.channels

    def bwd(g):
        dgamma = (g * xhat).sum(axis=_BN_AXES) if p.gamma.requires_grad else None
        dbeta = g.sum(axis=_BN_AXES) if p.beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma
            if training:
                s1 = dxhat.sum(axis=_BN_AXES).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=_BN_AXES).reshape(bshape)
                dx = inv_std * (dxhat - s1 / m - xhat * s2 / m)
            else:
                dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return custom_op(out, (x, p.gamma, p.beta), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    return custom_op(x.data * c, (x,), lambda g: (g * c,))


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Average over H and W: ``(B,C,T,H,W) -> (B,C,T,1,1)``."""
    B, C, T, H, W = x.shape
    out = x.data.mean(axis=(3, 4), keepdims=True)
    return custom_op(out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),))


def temporal_mean(x: Tensor) -> Tensor:
    """Average over T: ``(B,C,T,H,W) -> (B,C,1,H,W)``."""
    T = x.shape[2]
    out = x.data.mean(axis=2, keepdims=True)
    return custom_op(out, (x,), lambda g: (np.broadcast_to(g / T, x.shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return custom_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def dot(x: Tensor, c: np.ndarray) -> Tensor:
    """``sum(x * c)`` for a constant array ``c``; handy for gradient probes."""
    c = np.asarray(c, dtype=x.dtype)
    return custom_op(np.asarray((x.data * c).sum()), (x,), lambda g: (g * c,))
