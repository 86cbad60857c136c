"""Spatiotemporal layers: recurrent convolutional unit, inflated 3D conv,
factorized (2+1)D conv, and the residual blocks built from them.

Every layer exposes ``forward(x, ctx)`` plus analytic ``out_shape`` and
``macs`` so cost reports never need a forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rcnet.tensor import (
    WIDE,
    BatchNorm,
    Tensor,
    add,
    batchnorm,
    conv3d,
    conv_output_extent,
    conv_pointwise_channels,
    conv_spatial2d,
    conv_temporal1d,
    linear_recurrence,
    relu,
)

Shape = tuple  # (C, T, H, W), batch omitted


@dataclass
class Context:
    """Per-call switches threaded through a forward pass.

    ``bank`` maps RCU layer names to their carried hidden state; when it is
    given, each RCU starts from the stored state and writes back its last one.
    """

    training: bool = False
    bank: dict[str, np.ndarray] | None = None
    taps: dict[str, Tensor] | None = None


def _kernel(shape, dtype, name) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# recurrent convolutional unit


@dataclass
class RcuParams:
    w_xh: Tensor  # (N, Cin, 1, d, d)
    w_hh: Tensor  # (N, N, 1, 1, 1)
    stride: int = 1

    def __post_init__(self):
        if self.w_xh.ndim != 5 or self.w_xh.shape[2] != 1:
            raise ValueError(f"w_xh must be (N,Cin,1,d,d), got {self.w_xh.shape}")
        N = self.w_xh.shape[0]
        if self.w_hh.shape != (N, N, 1, 1, 1):
            raise ValueError(f"w_hh must be ({N},{N},1,1,1), got {self.w_hh.shape}")

    @property
    def hidden(self) -> int:
        return self.w_xh.shape[0]

    @property
    def d(self) -> int:
        return self.w_xh.shape[3]


def rcu_step(x_t: Tensor, h_prev: Tensor | np.ndarray, p: RcuParams) -> Tensor:
    """One application of ``h_t = h_{t-1} * w_hh + x_t * w_xh`` on a single frame."""
    if x_t.shape[2] != 1:
        raise ValueError(f"rcu_step expects a single frame, got {x_t.shape[2]} frames")
    spatial = conv_spatial2d(x_t, p.w_xh, p.stride)
    h_prev = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    if h_prev.shape != spatial.shape:
        raise ValueError(f"hidden state {h_prev.shape} does not match spatial response {spatial.shape}")
    return add(conv_pointwise_channels(h_prev, p.w_hh), spatial)


def rcu_forward(x: Tensor, p: RcuParams, h0=None) -> Tensor:
    """Unroll the unit over every frame of ``x``; one hidden state per frame.

    The spatial term does not depend on the recurrence, so it is computed for
    all frames at once; the recurrence itself is a single taped op.
    """
    return linear_recurrence(conv_spatial2d(x, p.w_xh, p.stride), p.w_hh, h0)


class RcuLayer:
    kind = "rcu"

    def __init__(self, name, cin, cout, d, stride=1, dtype=WIDE):
        self.name = name
        self.params = RcuParams(
            _kernel((cout, cin, 1, d, d), dtype, f"{name}.w_xh"),
            _kernel((cout, cout, 1, 1, 1), dtype, f"{name}.w_hh"),
            stride,
        )
        self.cin, self.cout, self.d = cin, cout, d

    def parameters(self):
        return {f"{self.name}.w_xh": self.params.w_xh, f"{self.name}.w_hh": self.params.w_hh}

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        h0 = None if ctx.bank is None else ctx.bank.get(self.name)
        h = rcu_forward(x, self.params, h0)
        if ctx.bank is not None:
            ctx.bank[self.name] = h.data[:, :, -1:].copy()
        return h

    def out_shape(self, s: Shape) -> Shape:
        c, t, h, w = s
        s_ = self.params.stride
        p = self.d // 2
        return (self.cout, t, conv_output_extent(h, self.d, s_, p), conv_output_extent(w, self.d, s_, p))

    def macs(self, s: Shape) -> int:
        c, t, h, w = self.out_shape(s)
        return t * h * w * self.cout * (self.cin * self.d * self.d + self.cout)

    def temporal(self):
        return []  # recurrence, handled separately by receptive-field analysis


# --------------------------------------------------------------------------
# inflated 3D convolution


@dataclass
class TemporalConv3dParams:
    w: Tensor  # (Cout, Cin, n, d, d)
    stride_t: int = 1
    stride_s: int = 1

    def __post_init__(self):
        n, d = self.w.shape[2], self.w.shape[3]
        if n < 1 or d % 2 == 0 or self.w.shape[3] != self.w.shape[4]:
            raise ValueError(f"3D kernel must be (Cout,Cin,n,d,d) with odd d, got {self.w.shape}")

    @property
    def n(self) -> int:
        return self.w.shape[2]

    @property
    def d(self) -> int:
        return self.w.shape[3]

    @property
    def pad(self):
        return (self.n // 2, self.d // 2, self.d // 2)


def i3d_conv(x: Tensor, p: TemporalConv3dParams) -> Tensor:
    """Full ``n x d x d`` convolution with symmetric zero padding (anti-causal)."""
    return conv3d(x, p.w, (p.stride_t, p.stride_s, p.stride_s), p.pad)


class Conv3dLayer:
    kind = "conv3d"

    def __init__(self, name, cin, cout, n, d, stride_t=1, stride_s=1, dtype=WIDE):
        self.name = name
        self.params = TemporalConv3dParams(_kernel((cout, cin, n, d, d), dtype, f"{name}.w"), stride_t, stride_s)
        self.cin, self.cout = cin, cout

    def parameters(self):
        return {f"{self.name}.w": self.params.w}

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        p = self.params
        if p.n == 1 and p.d == 1:
            if p.stride_t == 1 and p.stride_s == 1:
                return conv_pointwise_channels(x, p.w)
        return i3d_conv(x, p)

    def out_shape(self, s: Shape) -> Shape:
        c, t, h, w = s
        p = self.params
        pt, ps, _ = p.pad
        return (
            self.cout,
            conv_output_extent(t, p.n, p.stride_t, pt),
            conv_output_extent(h, p.d, p.stride_s, ps),
            conv_output_extent(w, p.d, p.stride_s, ps),
        )

    def macs(self, s: Shape) -> int:
        c, t, h, w = self.out_shape(s)
        p = self.params
        return t * h * w * self.cout * self.cin * p.n * p.d * p.d

    def temporal(self):
        p = self.params
        return [(self.name, p.n, p.stride_t, p.n // 2)]


# --------------------------------------------------------------------------
# factorized (2+1)D convolution


def middle_planes(n: int, d: int, cin: int, cout: int) -> int:
    """Middle-plane count that matches the ``n x d x d`` parameter budget."""
    return max(1, (n * d * d * cin * cout) // (d * d * cin + n * cout))


@dataclass
class FactorizedConvParams:
    w_spatial: Tensor  # (M, Cin, 1, d, d)
    w_temporal: Tensor  # (Cout, M, n, 1, 1)
    bn_mid: BatchNorm | None = None
    stride_t: int = 1
    stride_s: int = 1

    def __post_init__(self):
        M = self.w_spatial.shape[0]
        if M < 1 or self.w_temporal.shape[1] != M:
            raise ValueError(
                f"factorized kernels disagree on middle planes: {self.w_spatial.shape} vs {self.w_temporal.shape}"
            )

    @property
    def middle(self) -> int:
        return self.w_spatial.shape[0]

    @property
    def n(self) -> int:
        return self.w_temporal.shape[2]

    @property
    def d(self) -> int:
        return self.w_spatial.shape[3]


def factorized_conv(x: Tensor, p: FactorizedConvParams, training: bool = False) -> Tensor:
    """Spatial ``1 x d x d`` conv, BN + ReLU, then temporal ``n x 1 x 1`` conv."""
    mid = conv_spatial2d(x, p.w_spatial, p.stride_s)
    if p.bn_mid is not None:
        mid = relu(batchnorm(mid, p.bn_mid, training))
    return conv_temporal1d(mid, p.w_temporal, p.stride_t, p.n // 2)


class FactorizedLayer:
    kind = "2plus1d"

    def __init__(self, name, cin, cout, n, d, stride_t=1, stride_s=1, dtype=WIDE):
        self.name = name
        M = middle_planes(n, d, cin, cout)
        self.params = FactorizedConvParams(
            _kernel((M, cin, 1, d, d), dtype, f"{name}.w_spatial"),
            _kernel((cout, M, n, 1, 1), dtype, f"{name}.w_temporal"),
            BatchNorm.create(M, dtype, f"{name}.bn_mid"),
            stride_t,
            stride_s,
        )
        self.cin, self.cout = cin, cout

    def parameters(self):
        p = self.params
        return {
            f"{self.name}.w_spatial": p.w_spatial,
            f"{self.name}.w_temporal": p.w_temporal,
            f"{self.name}.bn_mid.gamma": p.bn_mid.gamma,
            f"{self.name}.bn_mid.beta": p.bn_mid.beta,
        }

    def batchnorms(self):
        return {f"{self.name}.bn_mid": self.params.bn_mid}

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        return factorized_conv(x, self.params, ctx.training)

    def _mid_shape(self, s: Shape) -> Shape:
        c, t, h, w = s
        p = self.params
        return (p.middle, t, conv_output_extent(h, p.d, p.stride_s, p.d // 2),
                conv_output_extent(w, p.d, p.stride_s, p.d // 2))

    def out_shape(self, s: Shape) -> Shape:
        m, t, h, w = self._mid_shape(s)
        p = self.params
        return (self.cout, conv_output_extent(t, p.n, p.stride_t, p.n // 2), h, w)

    def macs(self, s: Shape) -> int:
        p = self.params
        m, t, h, w = self._mid_shape(s)
        spatial = t * h * w * p.middle * self.cin * p.d * p.d
        c, to, _, _ = self.out_shape(s)
        return spatial + to * h * w * self.cout * p.middle * p.n

    def temporal(self):
        p = self.params
        return [(self.name, p.n, p.stride_t, p.n // 2)]


# --------------------------------------------------------------------------
# residual blocks


def make_unit(variant: str, name, cin, cout, n, d, stride_t, stride_s, dtype):
    """The spatiotemporal convolution a variant uses in place of ``n x d x d``."""
    if variant == "rcn":
        return RcuLayer(name, cin, cout, d, stride_s, dtype)
    if variant == "i3d":
        return Conv3dLayer(name, cin, cout, n, d, stride_t, stride_s, dtype)
    if variant == "2plus1d":
        return FactorizedLayer(name, cin, cout, n, d, stride_t, stride_s, dtype)
    if variant == "2d":
        return Conv3dLayer(name, cin, cout, 1, d, 1, stride_s, dtype)
    raise ValueError(f"unknown variant {variant!r}")


class BnLayer:
    kind = "bn"

    def __init__(self, name, channels, dtype=WIDE):
        self.name = name
        self.bn = BatchNorm.create(channels, dtype, name)

    def parameters(self):
        return {f"{self.name}.gamma": self.bn.gamma, f"{self.name}.beta": self.bn.beta}

    def batchnorms(self):
        return {self.name: self.bn}

    def forward(self, x, ctx):
        return batchnorm(x, self.bn, ctx.training)

    def out_shape(self, s):
        return s

    def macs(self, s):
        return 0


class ResidualBlock:
    """Basic (two-conv) or bottleneck residual block.

    Main branch: conv, BN, ReLU, conv, BN (bottlenecks add a pointwise conv at
    each end); a projection conv + BN replaces the identity skip when the
    channel count or stride changes; the sum goes through a final ReLU.
    """

    def __init__(self, name, variant, cin, cout, n, d, stride_t, stride_s,
                 bottleneck=False, width=None, dtype=WIDE):
        self.name = name
        self.variant = variant
        self.bottleneck = bottleneck
        if bottleneck:
            width = width or cout // 4
            self.convs = [
                Conv3dLayer(f"{name}.conv_a", cin, width, 1, 1, 1, 1, dtype),
                make_unit(variant, f"{name}.conv_b", width, width, n, d, stride_t, stride_s, dtype),
                Conv3dLayer(f"{name}.conv_c", width, cout, 1, 1, 1, 1, dtype),
            ]
            chans = [width, width, cout]
        else:
            self.convs = [
                make_unit(variant, f"{name}.conv_a", cin, cout, n, d, stride_t, stride_s, dtype),
                make_unit(variant, f"{name}.conv_b", cout, cout, n, d, 1, 1, dtype),
            ]
            chans = [cout, cout]
        suffix = "abc"
        self.bns = [BnLayer(f"{name}.bn_{suffix[i]}", c, dtype) for i, c in enumerate(chans)]
        self.proj = None
        self.bn_proj = None
        if cin != cout or stride_t != 1 or stride_s != 1:
            self.proj = Conv3dLayer(f"{name}.proj", cin, cout, 1, 1, stride_t, stride_s, dtype)
            self.bn_proj = BnLayer(f"{name}.bn_proj", cout, dtype)

    def layers(self):
        out = []
        for c, b in zip(self.convs, self.bns):
            out += [c, b]
        if self.proj is not None:
            out += [self.proj, self.bn_proj]
        return out

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        y = x
        last = len(self.convs) - 1
        for i, (c, b) in enumerate(zip(self.convs, self.bns)):
            y = b.forward(c.forward(y, ctx), ctx)
            if i < last:
                y = relu(y)
        skip = x
        if self.proj is not None:
            skip = self.bn_proj.forward(self.proj.forward(x, ctx), ctx)
        return relu(add(y, skip))

    def out_shape(self, s: Shape) -> Shape:
        for c in self.convs:
            s = c.out_shape(s)
        return s

    def macs(self, s: Shape) -> int:
        total = 0
        cur = s
        for c in self.convs:
            total += c.macs(cur)
            cur = c.out_shape(cur)
        if self.proj is not None:
            total += self.proj.macs(s)
        return total

    def temporal(self):
        chain = []
        for c in self.convs:
            chain += c.temporal()
        return chain


def residual_block(x: Tensor, block: ResidualBlock, training: bool = False) -> Tensor:
    return block.forward(x, Context(training=training))
