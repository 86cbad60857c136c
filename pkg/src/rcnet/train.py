"""Desk-scale training: losses, momentum SGD, augmentation, synthetic video tasks."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rcnet import container
from rcnet.arch import Model, forward_clip
from rcnet.layers import Context
from rcnet.tensor import Tape, Tensor, backward, custom_op, reshape, temporal_mean, transpose

log = logging.getLogger(__name__)

DATA_MAGIC = b"RCNDATA\x00"

TASK_CLASSES = {"direction": 4, "order": 2, "dense": 4, "shapes": 4}
DIRECTIONS = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0))  # (dy, dx): right, left, down, up
_FLIP_DIRECTION = np.array([1, 0, 2, 3])


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.05
    lr_drop_steps: tuple | None = None
    drop_factor: float = 10.0
    batch: int = 16
    max_iters: int = 2000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    clip_frames: int = 8
    crop: int = 32
    eval_every: int = 100
    eval_clips: int = 10
    freeze_bn: bool = False
    freeze_hidden: bool = False
    target_acc: float | None = None
    stop_at_target: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.lr_drop_steps is not None:
            self.lr_drop_steps = tuple(int(s) for s in self.lr_drop_steps)
            if list(self.lr_drop_steps) != sorted(self.lr_drop_steps):
                raise ValueError("lr_drop_steps must be ascending")

    @property
    def drops(self) -> tuple:
        # default drops at 5/8 and 7/8 of the run
        if self.lr_drop_steps is not None:
            return self.lr_drop_steps
        return (round(self.max_iters * 0.625), round(self.max_iters * 0.875))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_steps"] = list(self.drops)
        return d


def linear_scaled_lr(base_lr: float, batch: int, base_batch: int = 64) -> float:
    """Scale a learning rate quoted for ``base_batch`` to ``batch`` proportionally."""
    return base_lr * batch / base_batch


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    passed = sum(1 for s in cfg.drops if iteration >= s)
    return cfg.lr0 / cfg.drop_factor ** passed


# --------------------------------------------------------------------------
# losses


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(scores)[label]``; ``scores`` is ``(B, C)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = scores.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return custom_op(np.asarray(loss), (scores,), bwd)


def bce_multilabel(per_frame: Tensor, mask) -> Tensor:
    """Mean elementwise binary cross-entropy of ``sigmoid(per_frame)`` against ``mask``."""
    y = np.asarray(mask, dtype=per_frame.dtype)
    if y.shape != per_frame.shape:
        raise ValueError(f"mask {y.shape} does not match scores {per_frame.shape}")
    x = per_frame.data
    # log(1 + exp(-|x|)) form avoids overflow
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def bwd(g):
        sig = 0.5 * (1 + np.tanh(0.5 * x))
        return (g * (sig - y) / n,)

    return custom_op(np.asarray(loss), (per_frame,), bwd)


# --------------------------------------------------------------------------
# optimizer


def sgd_step(m: Model, grads: dict, cfg: TrainConfig, iteration: int, velocity: dict | None = None) -> Model:
    """Momentum SGD with weight decay: ``v = mu v + g + wd p``; ``p -= lr v``."""
    if velocity is None:
        velocity = m.__dict__.setdefault("_velocity", {})
    lr = learning_rate(cfg, iteration)
    for name, p in m.named_parameters().items():
        g = grads.get(p)
        if g is None:
            continue
        step = g + cfg.weight_decay * p.data if cfg.weight_decay else g
        if cfg.momentum:
            v = velocity.get(name)
            v = step if v is None else cfg.momentum * v + step
            velocity[name] = v
            step = v
        p.data -= lr * step
    return m


# --------------------------------------------------------------------------
# datasets


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (3, T, H, W)
    label: np.ndarray | int  # class id, or (T, C) mask for dense
    task: str = "direction"


@dataclass
class ClipDataset:
    frames: np.ndarray  # (N, 3, T, H, W) float32
    labels: np.ndarray  # (N,) int64 or (N, T, C) uint8
    task: str
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return TASK_CLASSES[self.task]

    @property
    def dense(self) -> bool:
        return self.task == "dense"

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> SyntheticClip:
        return SyntheticClip(self.frames[i], self.labels[i], self.task)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def split(self, n: int) -> tuple["ClipDataset", "ClipDataset"]:
        return (ClipDataset(self.frames[:n], self.labels[:n], self.task, self.seed),
                ClipDataset(self.frames[n:], self.labels[n:], self.task, self.seed))

    def save(self, path) -> None:
        N, C, T, H, W = self.frames.shape
        header = {"kind": "dataset", "task": self.task, "seed": self.seed, "count": N,
                  "frames": T, "height": H, "width": W, "channels": C, "classes": self.num_classes}
        container.write(path, DATA_MAGIC, header, {"frames": self.frames, "labels": self.labels})

    @classmethod
    def load(cls, path) -> "ClipDataset":
        header, blobs = container.read(path, DATA_MAGIC)
        if header.get("kind") != "dataset":
            raise container.ContainerError(f"{path}: not a dataset container")
        return cls(blobs["frames"], blobs["labels"], header["task"], header["seed"])


def _periodic_sq_dist(size: int, centre: float) -> np.ndarray:
    d = np.abs(np.arange(size) - centre)
    d = np.minimum(d, size - d)
    return d * d


def render_blob(T, H, W, start, velocity, sigma=1.5, color=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Gaussian blob moving at constant velocity on a torus; ``(3, T, H, W)``."""
    out = np.empty((3, T, H, W))
    for t in range(T):
        y = (start[0] + t * velocity[0]) % H
        x = (start[1] + t * velocity[1]) % W
        img = np.exp(-(_periodic_sq_dist(H, y)[:, None] + _periodic_sq_dist(W, x)[None, :]) / (2 * sigma ** 2))
        out[:, t] = np.asarray(color)[:, None, None] * img
    return out


def _shape_mask(kind: int, H: int, W: int, cy: int, cx: int, r: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[:H, :W]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if kind == 0:  # filled square
        return ((dy <= r) & (dx <= r)).astype(float)
    if kind == 1:  # plus
        return (((dy <= r) & (dx <= 0)) | ((dx <= r) & (dy <= 0))).astype(float)
    if kind == 2:  # ring
        rad = np.sqrt(dy ** 2 + dx ** 2)
        return ((rad >= r - 0.7) & (rad <= r + 0.7)).astype(float)
    return np.exp(-(dy ** 2 + dx ** 2) / (2 * 1.5 ** 2))  # blob


def gen_motion_dataset(num_clips: int, T: int, H: int, W: int, task: str = "direction",
                       seed: int = 0, noise: float = 0.05, speed=(1.5, 2.5)) -> ClipDataset:
    """Synthetic clips whose label needs temporal reasoning.

    ``direction``: a blob translates right/left/down/up on a torus; start
    positions are uniform, so every single frame has the same distribution
    for all classes.  ``order``: a square and a plus appear one after the
    other; the class is which came first.  ``dense``: two blobs change
    direction over time; the per-frame mask marks active directions.
    ``shapes`` (T may be 1): one static shape per clip, a 2D image task.
    """
    if task not in TASK_CLASSES:
        raise ValueError(f"unknown task {task!r}")
    if task != "shapes" and T < 4:
        raise ValueError("motion tasks need at least 4 frames")
    rng = np.random.default_rng(seed)
    frames = np.empty((num_clips, 3, T, H, W), dtype=np.float32)
    if task == "dense":
        labels = np.zeros((num_clips, T, TASK_CLASSES[task]), dtype=np.uint8)
    else:
        labels = np.empty(num_clips, dtype=np.int64)
    for i in range(num_clips):
        color = rng.uniform(0.5, 1.0, size=3)
        if task == "direction":
            c = int(rng.integers(4))
            v = rng.uniform(*speed) * np.asarray(DIRECTIONS[c])
            clip = render_blob(T, H, W, rng.uniform(0, [H, W]), v, color=color)
            labels[i] = c
        elif task == "order":
            c = int(rng.integers(2))
            clip = _order_clip(rng, T, H, W, c, color)
            labels[i] = c
        elif task == "dense":
            clip, labels[i] = _dense_clip(rng, T, H, W, speed)
        else:
            c = int(rng.integers(4))
            cy, cx = rng.integers(4, H - 4), rng.integers(4, W - 4)
            img = _shape_mask(c, H, W, cy, cx)
            clip = np.broadcast_to(color[:, None, None, None] * img, (3, T, H, W))
            labels[i] = c
        frames[i] = clip + noise * rng.standard_normal(clip.shape)
    return ClipDataset(frames, labels, task, seed)


def _order_clip(rng, T, H, W, c, color):
    clip = np.zeros((3, T, H, W))
    first, second = (0, 1) if c == 0 else (1, 0)
    dur = max(1, T // 4)
    a1 = int(rng.integers(0, max(1, T // 4) + 1))
    a2 = int(rng.integers(a1 + dur, T - dur + 1))
    for kind, a in ((first, a1), (second, a2)):
        cy, cx = rng.integers(4, H - 4), rng.integers(4, W - 4)
        clip[:, a:a + dur] = color[:, None, None, None] * _shape_mask(kind, H, W, cy, cx)
    return clip


def _dense_clip(rng, T, H, W, speed):
    clip = np.zeros((3, T, H, W))
    mask = np.zeros((T, 4), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 3))):
        color = rng.uniform(0.5, 1.0, size=3)
        pos = rng.uniform(0, [H, W])
        t = 0
        while t < T:
            length = int(rng.integers(3, max(4, T // 2) + 1))
            c = int(rng.integers(5))  # 4 = static
            v = np.zeros(2) if c == 4 else rng.uniform(*speed) * np.asarray(DIRECTIONS[c])
            seg = render_blob(min(length, T - t), H, W, pos, v, color=color)
            clip[:, t:t + seg.shape[1]] = np.maximum(clip[:, t:t + seg.shape[1]], seg)
            if c < 4:
                mask[t:t + seg.shape[1], c] = 1
            pos = (pos + seg.shape[1] * v) % [H, W]
            t += seg.shape[1]
    return clip, mask


# --------------------------------------------------------------------------
# augmentation and evaluation crops


def flip_label(label, task: str):
    if task == "direction":
        return int(_FLIP_DIRECTION[label])
    if task == "dense":
        return np.asarray(label)[:, _FLIP_DIRECTION]
    return label


def augment(clip: SyntheticClip, seed, crop: int | None = None, clip_frames: int | None = None,
            flip: bool | None = None) -> SyntheticClip:
    """Random temporal offset, random spatial crop, horizontal mirror with p = 0.5."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    frames, label = clip.frames, clip.label
    _, T, H, W = frames.shape
    crop = crop or min(H, W)
    clip_frames = clip_frames or T
    if crop > H or crop > W or clip_frames > T:
        raise ValueError(f"clip of {T}x{H}x{W} is smaller than the {clip_frames}x{crop}x{crop} target")
    t0 = int(rng.integers(0, T - clip_frames + 1))
    y0 = int(rng.integers(0, H - crop + 1))
    x0 = int(rng.integers(0, W - crop + 1))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    out = frames[:, t0:t0 + clip_frames, y0:y0 + crop, x0:x0 + crop]
    if clip.task == "dense":
        label = np.asarray(label)[t0:t0 + clip_frames]
    if flip:
        out = out[..., ::-1]
        label = flip_label(label, clip.task)
    return SyntheticClip(np.ascontiguousarray(out), label, clip.task)


def eval_views(frames: np.ndarray, clip_frames: int, crop: int, n_clips: int = 10):
    """Centre-cropped clips at ``n_clips`` regularly spaced temporal offsets."""
    N, C, T, H, W = frames.shape
    y0, x0 = (H - crop) // 2, (W - crop) // 2
    starts = np.linspace(0, T - clip_frames, n_clips).round().astype(int)
    for t0 in starts:
        yield int(t0), frames[:, :, t0:t0 + clip_frames, y0:y0 + crop, x0:x0 + crop]


def evaluate(m: Model, data: ClipDataset, clip_frames: int, crop: int, n_clips: int = 10,
             chunk: int = 128) -> dict:
    """Clip and video accuracy: ten regularly sampled clips per video, scores averaged.

    Dense data reports frame-wise mAP over the centre-cropped full videos.
    """
    from rcnet.analysis import frame_map

    if data.dense:
        _, full = next(eval_views(data.frames, data.frames.shape[2], crop, 1))
        per_frame = _batched_scores(m, full, chunk).per_frame
        return {"map@1": frame_map(per_frame, data.labels, 1), "map@8": frame_map(per_frame, data.labels, 8)}
    labels = data.labels
    clip_hits, video_sum = [], 0.0
    for _, views in eval_views(data.frames, clip_frames, crop, n_clips):
        scores = _batched_scores(m, views, chunk).video
        clip_hits.append(scores.argmax(axis=1) == labels)
        video_sum = video_sum + scores
    return {
        "clip_acc": float(np.mean(clip_hits)),
        "video_acc": float((video_sum.argmax(axis=1) == labels).mean()),
    }


def _batched_scores(m: Model, frames: np.ndarray, chunk: int):
    from rcnet.arch import ScoreSequence

    dt = m.spec.np_dtype
    parts = [forward_clip(m, frames[i:i + chunk].astype(dt)).per_frame for i in range(0, len(frames), chunk)]
    return ScoreSequence.from_frames(np.concatenate(parts, axis=0))


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    reached_at: int | None = None
    final_metrics: dict = field(default_factory=dict)


def _frozen_names(m: Model, cfg: TrainConfig) -> set:
    if not cfg.freeze_hidden:
        return set()
    return {n for n in m.named_parameters() if n.endswith(".w_hh")}


def train_loop(m: Model, data: ClipDataset, cfg: TrainConfig, val: ClipDataset | None = None,
               log_path=None) -> TrainResult:
    """augment -> forward -> loss -> backward -> SGD, with periodic evaluation.

    The reported metric is video accuracy (mAP@1 for dense data) on ``val``.
    """
    rng = np.random.default_rng(cfg.seed)
    frozen = _frozen_names(m, cfg)
    params = m.named_parameters()
    for name in frozen:
        params[name].requires_grad = False
    velocity: dict = {}
    result = TrainResult(m)
    dt = m.spec.np_dtype
    metric_key = "map@1" if data.dense else "video_acc"
    try:
        for it in range(cfg.max_iters + 1):
            row = {"iter": it, "lr": learning_rate(cfg, it), "loss": "", "acc": ""}
            evaluate_now = val is not None and (it % cfg.eval_every == 0 or it == cfg.max_iters)
            if evaluate_now:
                metrics = evaluate(m, val, cfg.clip_frames, cfg.crop, cfg.eval_clips)
                row["acc"] = metrics[metric_key]
                result.final_metrics = metrics
                if cfg.target_acc is not None and result.reached_at is None and row["acc"] >= cfg.target_acc:
                    result.reached_at = it
            if it == cfg.max_iters or (cfg.stop_at_target and result.reached_at is not None):
                result.log.append(row)
                break
            idx = rng.integers(0, len(data), size=cfg.batch)
            clips = [augment(data[i], rng, cfg.crop, cfg.clip_frames) for i in idx]
            x = np.stack([c.frames for c in clips]).astype(dt)
            with Tape() as tape:
                logits = m.forward(x, Context(training=not cfg.freeze_bn))
                B, C, T = logits.shape[:3]
                if data.dense:
                    per_frame = transpose(reshape(logits, (B, C, T)), (0, 2, 1))
                    loss = bce_multilabel(per_frame, np.stack([c.label for c in clips]))
                else:
                    loss = cross_entropy(reshape(temporal_mean(logits), (B, C)), [c.label for c in clips])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"iteration {it}: loss is {value} (lr {row['lr']})")
            grads = backward(tape, loss)
            sgd_step(m, grads, cfg, it, velocity)
            row["loss"] = value
            result.log.append(row)
            if evaluate_now:
                log.info("iter %d loss %.4f %s %.4f", it, value, metric_key, row["acc"])
    finally:
        for name in frozen:
            params[name].requires_grad = True
    if log_path is not None:
        write_log(log_path, result.log)
    return result


def write_log(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iter", "lr", "loss", "acc"])
        writer.writeheader()
        writer.writerows(rows)


def train_donor(spec, data: ClipDataset, cfg: TrainConfig, seed: int = 0):
    """Train a 2D-topology network on a static image task and extract its kernels."""
    from rcnet.arch import build_model
    from rcnet.weights import Donor2dCheckpoint, donor_spec

    m2d = build_model(donor_spec(spec, data.num_classes), seed)
    train_loop(m2d, data, cfg)
    return Donor2dCheckpoint.from_model(m2d), m2d
