"""Whole networks: ResNet-style I3D, (2+1)D and RCN built from one stage layout.

Clip mode runs a full ``(B, 3, T, H, W)`` clip; streaming mode feeds one frame
at a time through an RCN while carrying every RCU's hidden state.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from rcnet.layers import BnLayer, Context, RcuLayer, ResidualBlock, make_unit
from rcnet.tensor import (
    NARROW,
    WIDE,
    Tensor,
    as_tensor,
    conv_pointwise_channels,
    custom_op,
    relu,
    spatial_avg_pool,
)

VARIANTS = ("rcn", "i3d", "2plus1d")

BACKBONES = {
    "resnet18": dict(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), bottleneck=False),
    "resnet34": dict(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), bottleneck=False),
    "resnet50": dict(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), bottleneck=True),
    "tiny": dict(widths=(8, 16), blocks=(1, 1), bottleneck=False),
}

_DTYPES = {"float64": WIDE, "float32": NARROW}


@dataclass(frozen=True)
class ArchSpec:
    backbone: str = "tiny"
    variant: str = "rcn"
    num_classes: int = 4
    input_size: tuple = (8, 32, 32)
    widths: tuple | None = None
    blocks: tuple | None = None
    temporal_kernel: int = 3
    stem_kernel: int = 7
    stem_width: int | None = None
    in_channels: int = 3
    dtype: str = "float64"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unsupported backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.variant not in VARIANTS + ("2d",):
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        object.__setattr__(self, "input_size", tuple(self.input_size))
        for key in ("widths", "blocks"):
            val = getattr(self, key)
            if val is not None:
                object.__setattr__(self, key, tuple(val))
        if any(w <= 0 for w in self.stage_widths) or len(self.stage_widths) != len(self.stage_blocks):
            raise ValueError("widths must be positive and match the number of stages")

    @property
    def stage_widths(self) -> tuple:
        return self.widths or BACKBONES[self.backbone]["widths"]

    @property
    def stage_blocks(self) -> tuple:
        return self.blocks or BACKBONES[self.backbone]["blocks"]

    @property
    def bottleneck(self) -> bool:
        return BACKBONES[self.backbone]["bottleneck"]

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class Classifier:
    """Pointwise conv with bias producing one score map per class."""

    kind = "classifier"

    def __init__(self, name, cin, classes, dtype=WIDE):
        self.name = name
        self.cin, self.cout = cin, classes
        self.w = Tensor(np.zeros((classes, cin, 1, 1, 1), dtype=dtype), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def parameters(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def forward(self, x, ctx):
        y = conv_pointwise_channels(x, self.w)
        b = self.b
        out = y.data + b.data.reshape(1, -1, 1, 1, 1)
        return custom_op(out, (y, b), lambda g: (g, g.sum(axis=(0, 2, 3, 4))))

    def out_shape(self, s):
        return (self.cout,) + tuple(s[1:])

    def macs(self, s):
        c, t, h, w = s
        return t * h * w * self.cin * self.cout


@dataclass
class ScoreSequence:
    per_frame: np.ndarray  # (B, T, C)
    video: np.ndarray  # (B, C)

    @classmethod
    def from_frames(cls, per_frame: np.ndarray) -> "ScoreSequence":
        return cls(per_frame, per_frame.mean(axis=1))


class Model:
    """Instantiated network: stem, residual stages, spatial pool, conv classifier."""

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        dt = spec.np_dtype
        v = spec.variant
        n = spec.temporal_kernel
        stem_width = spec.stem_width or spec.stage_widths[0]
        self.stem = make_unit(v, "conv1", spec.in_channels, stem_width, n, spec.stem_kernel, 1, 2, dt)
        self.stem_bn = BnLayer("bn1", stem_width, dt)
        self.stages: list[tuple[str, list[ResidualBlock]]] = []
        cin = stem_width
        expand = 4 if spec.bottleneck else 1
        for i, (width, count) in enumerate(zip(spec.stage_widths, spec.stage_blocks)):
            stage = f"res{i + 2}"
            blocks = []
            for j in range(count):
                down = i > 0 and j == 0
                stride_s = 2 if down else 1
                stride_t = 2 if down and v in ("i3d", "2plus1d") else 1
                cout = width * expand
                blocks.append(ResidualBlock(f"{stage}.{j}", v, cin, cout, n, 3, stride_t, stride_s,
                                            bottleneck=spec.bottleneck, width=width, dtype=dt))
                cin = cout
            self.stages.append((stage, blocks))
        self.classifier = Classifier("convC", cin, spec.num_classes, dt)

    @property
    def variant(self) -> str:
        return self.spec.variant

    def layers(self) -> list:
        out = [self.stem, self.stem_bn]
        for _, blocks in self.stages:
            for b in blocks:
                out += b.layers()
        out.append(self.classifier)
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.layers():
            params.update(layer.parameters())
        return params

    def batchnorms(self) -> dict:
        bns = {}
        for layer in self.layers():
            if hasattr(layer, "batchnorms"):
                bns.update(layer.batchnorms())
        return bns

    def rcu_layers(self) -> list[RcuLayer]:
        return [l for l in self.layers() if isinstance(l, RcuLayer)]

    def min_frames(self) -> int:
        """Fewest input frames the clip path accepts (product of temporal strides)."""
        k = 1
        for *_, stride, _pad in self.temporal_chain():
            k *= stride
        return k

    def forward(self, x, ctx: Context | None = None) -> Tensor:
        """Per-frame class scores as a ``(B, C, T', 1, 1)`` tensor."""
        ctx = ctx or Context()
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected input (B,{self.spec.in_channels},T,H,W), got {x.shape}")
        taps = ctx.taps
        y = relu(self.stem_bn.forward(self.stem.forward(x, ctx), ctx))
        if taps is not None:
            taps["conv1"] = y
        for stage, blocks in self.stages:
            for b in blocks:
                y = b.forward(y, ctx)
            if taps is not None:
                taps[stage] = y
        y = spatial_avg_pool(y)
        if taps is not None:
            taps["pool"] = y
        y = self.classifier.forward(y, ctx)
        if taps is not None:
            taps["convC"] = y
        return y

    def walk_shapes(self, input_size):
        """Analytic ``(name, layer, in_shape, out_shape, macs)`` rows, forward order."""
        T, H, W = input_size
        s = (self.spec.in_channels, T, H, W)
        rows = []

        def visit(layer, shape):
            out = layer.out_shape(shape)
            rows.append((layer.name, layer, shape, out, layer.macs(shape)))
            return out

        s = visit(self.stem, s)
        s = visit(self.stem_bn, s)
        for _, blocks in self.stages:
            for b in blocks:
                cur = s
                for c, bn in zip(b.convs, b.bns):
                    cur = visit(c, cur)
                    cur = visit(bn, cur)
                if b.proj is not None:
                    visit(b.bn_proj, visit(b.proj, s))
                s = cur
        s = (s[0], s[1], 1, 1)
        visit(self.classifier, s)
        return rows

    def stage_shapes(self, input_size) -> dict[str, tuple]:
        """Output extents ``(T, H, W)`` or ``(T, C)`` per stage name."""
        T, H, W = input_size
        s = (self.spec.in_channels, T, H, W)
        s = self.stem.out_shape(s)
        out = {"conv1": s[1:]}
        for stage, blocks in self.stages:
            for b in blocks:
                s = b.out_shape(s)
            out[stage] = s[1:]
        out["pool"] = (s[1], 1, 1)
        out["convC"] = (s[1], self.spec.num_classes)
        out["mean"] = (self.spec.num_classes,)
        return out

    def temporal_chain(self) -> list[tuple[str, str, int, int, int]]:
        """Temporal ops along the deepest path: ``(stage, layer, n, stride, pad)``."""
        chain = [("conv1", *c) for c in self.stem.temporal()]
        for stage, blocks in self.stages:
            for b in blocks:
                chain += [(stage, *c) for c in b.temporal()]
        return chain


def build_model(spec: ArchSpec, seed: int = 0) -> Model:
    """Instantiate ``spec`` with fan-in normal kernels; RCN hidden kernels start at identity."""
    from rcnet.weights import init_identity_hidden, init_random

    model = Model(spec)
    init_random(model, seed)
    if spec.variant == "rcn":
        init_identity_hidden(model)
    return model


def _scores(logits: Tensor) -> np.ndarray:
    return np.ascontiguousarray(logits.data[:, :, :, 0, 0].transpose(0, 2, 1))


def forward_clip(m: Model, clip, bn_mode: str = "eval") -> ScoreSequence:
    clip = as_tensor(clip)
    if m.variant in ("i3d", "2plus1d") and clip.shape[2] < m.min_frames():
        raise ValueError(
            f"{m.variant} needs at least {m.min_frames()} frames, got {clip.shape[2]}"
        )
    if bn_mode not in ("train", "eval"):
        raise ValueError("bn_mode must be 'train' or 'eval'")
    logits = m.forward(clip, Context(training=bn_mode == "train"))
    return ScoreSequence.from_frames(_scores(logits))


@dataclass
class StreamState:
    """Hidden-state bank (one entry per RCU, layer order) plus score accumulator."""

    bank: list = field(default_factory=list)
    score_sum: np.ndarray | None = None
    count: int = 0

    @classmethod
    def initial(cls, m: Model) -> "StreamState":
        return cls(bank=[None] * len(m.rcu_layers()))

    @property
    def video_score(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no frames consumed yet")
        return self.score_sum / self.count


def stream_step(m: Model, s: StreamState, frame) -> tuple[np.ndarray, StreamState]:
    """Consume one ``(B, 3, 1, H, W)`` frame; return its scores and the new state."""
    if m.variant != "rcn":
        raise ValueError(f"streaming is defined only for rcn, not {m.variant}")
    frame = as_tensor(frame)
    if frame.ndim != 5 or frame.shape[2] != 1:
        raise ValueError(f"stream_step expects a (B,C,1,H,W) frame, got {frame.shape}")
    names = [l.name for l in m.rcu_layers()]
    if len(s.bank) != len(names):
        raise ValueError("stream state does not belong to this model")
    bank = {k: v for k, v in zip(names, s.bank) if v is not None}
    logits = m.forward(frame, Context(training=False, bank=bank))
    scores = _scores(logits)[:, 0]
    total = scores.copy() if s.score_sum is None else s.score_sum + scores
    return scores, StreamState([bank[k] for k in names], total, s.count + 1)


def stream_video(m: Model, video, state: StreamState | None = None):
    """Stream every frame of ``video``; returns ``(ScoreSequence, final state)``."""
    video = as_tensor(video)
    state = state or StreamState.initial(m)
    rows = []
    for t in range(video.shape[2]):
        scores, state = stream_step(m, state, video.data[:, :, t:t + 1])
        rows.append(scores)
    return ScoreSequence.from_frames(np.stack(rows, axis=1)), state


def unroll_eval(m: Model, video) -> ScoreSequence:
    """Evaluate a video of any length: stream it (rcn) or run one clip over it."""
    if m.variant == "rcn":
        return stream_video(m, video)[0]
    return forward_clip(m, video, "eval")
