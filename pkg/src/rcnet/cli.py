"""``rcnet`` command line: gen, train, eval, stream, analyze, export-frames."""
from __future__ import annotations

import argparse
import logging
import os
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from rcnet import container
from rcnet.analysis import (
    compare_costs,
    count_macs,
    early_prediction_curve,
    segment_relative_accuracy,
    whh_statistics,
    write_csv,
)
from rcnet.arch import VARIANTS, ArchSpec, Model, StreamState, build_model, stream_step
from rcnet.train import ClipDataset, TrainConfig, eval_views, evaluate, gen_motion_dataset, train_loop
from rcnet.weights import load_checkpoint, save_checkpoint, set_hidden

log = logging.getLogger("rcnet")

FRAME_HEADER = struct.Struct("<IHHHB")
FRAME_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    task: str = "direction"
    train: str = "data/train.rcd"
    val: str = "data/val.rcd"
    train_clips: int = 600
    val_clips: int = 200
    frames: int = 12
    height: int = 36
    width: int = 36
    noise: float = 0.05


@dataclass
class RunConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    seed: int = 0
    hidden_init: str = "identity"

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            arch = ArchSpec.from_dict(raw.pop("arch", None) or {})
            train_raw = dict(raw.pop("train", None) or {})
            train_raw.setdefault("seed", raw.get("seed", 0))
            train = TrainConfig(**train_raw)
            data = DataConfig(**(raw.pop("data", None) or {}))
        except TypeError as exc:
            raise UsageError(f"malformed config: {exc}") from None
        return cls(arch=arch, train=train, data=data, **raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{path}: no such config file")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: malformed config ({str(exc).splitlines()[0]})") from None
        if raw is not None and not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = _plain(self.arch.to_dict())
        d["train"] = _plain(self.train.to_dict())
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    d = cfg.data
    for path, n, offset in ((d.train, d.train_clips, 0), (d.val, d.val_clips, 1)):
        ds = gen_motion_dataset(n, d.frames, d.height, d.width, d.task, seed=2 * cfg.seed + offset, noise=d.noise)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        ds.save(path)
        print(f"wrote {path}: {n} {d.task} clips of {d.frames}x{d.height}x{d.width}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, val_set = ClipDataset.load(cfg.data.train), ClipDataset.load(cfg.data.val)
    if train_set.num_classes != cfg.arch.num_classes:
        raise UsageError(f"dataset has {train_set.num_classes} classes, arch expects {cfg.arch.num_classes}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    m = build_model(cfg.arch, cfg.seed)
    if cfg.arch.variant == "rcn":
        set_hidden(m, _hidden_value(cfg.hidden_init), seed=cfg.seed)
    result = train_loop(m, train_set, cfg.train, val_set, log_path=out / "metrics.csv")
    save_checkpoint(m, out / "model.ckpt", seed=cfg.seed, meta={"final": result.final_metrics})
    print(_metrics_line(result.final_metrics))
    return 0


def _hidden_value(v):
    if isinstance(v, str) and v not in ("identity", "random"):
        try:
            return float(v)
        except ValueError:
            raise UsageError(f"hidden_init must be identity, random or a number, got {v!r}") from None
    return v


def _metrics_line(metrics: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.items())


def _checkpoint_for(args, cfg: RunConfig):
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "model.ckpt"
    return load_checkpoint(path, cfg.arch if args.config else None)


def cmd_eval(args) -> int:
    cfg = _config(args)
    m = _checkpoint_for(args, cfg)
    data = ClipDataset.load(args.data or cfg.data.val)
    metrics = evaluate(m, data, cfg.train.clip_frames, cfg.train.crop, cfg.train.eval_clips)
    print(_metrics_line(metrics))
    return 0


def read_frame(stream) -> np.ndarray | None:
    """One length-prefixed ``(C, H, W)`` frame, or ``None`` at a clean end of stream."""
    head = _read_exact(stream, FRAME_HEADER.size, allow_eof=True)
    if head is None:
        return None
    nbytes, c, h, w, code = FRAME_HEADER.unpack(head)
    if code not in FRAME_DTYPES:
        raise UsageError(f"frame has unknown dtype code {code}")
    dt = FRAME_DTYPES[code]
    if nbytes != c * h * w * dt.itemsize:
        raise UsageError(f"frame payload of {nbytes} bytes does not match {c}x{h}x{w} {dt}")
    payload = _read_exact(stream, nbytes)
    return np.frombuffer(payload, dtype=dt).reshape(c, h, w)


def write_frame(stream, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    code = 1 if frame.dtype == np.float64 else 0
    raw = np.ascontiguousarray(frame, dtype=FRAME_DTYPES[code]).tobytes()
    stream.write(FRAME_HEADER.pack(len(raw), *frame.shape, code) + raw)


def _read_exact(stream, n: int, allow_eof: bool = False):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise UsageError(f"stream truncated: expected {n} bytes, got {len(buf)}")
        buf += chunk
    return buf


def cmd_stream(args) -> int:
    m = load_checkpoint(args.checkpoint)
    if m.variant != "rcn":
        raise UsageError(f"streaming needs an rcn checkpoint, got {m.variant}")
    src = sys.stdin.buffer if args.input == "-" else open(args.input, "rb")
    out = sys.stdout
    state = StreamState.initial(m)
    try:
        k = 0
        while (frame := read_frame(src)) is not None:
            if frame.shape[0] != m.spec.in_channels:
                raise UsageError(f"frame {k} has {frame.shape[0]} channels, model expects {m.spec.in_channels}")
            x = frame.astype(m.spec.np_dtype)[None, :, None]
            scores, state = stream_step(m, state, x)
            pred = int(state.video_score[0].argmax())
            out.write(f"{k}\t{pred}\t" + " ".join(f"{s:.6g}" for s in scores[0]) + "\n")
            out.flush()
            k += 1
    finally:
        if src is not sys.stdin.buffer:
            src.close()
    return 0


def cmd_export_frames(args) -> int:
    data = ClipDataset.load(args.data)
    if not 0 <= args.index < len(data):
        raise UsageError(f"index {args.index} out of range for {len(data)} clips")
    frames = data.frames[args.index]
    if args.crop:
        _, view = next(eval_views(frames[None], frames.shape[1], args.crop, 1))
        frames = view[0]
    with open(args.out, "wb") as fh:
        for t in range(frames.shape[1]):
            write_frame(fh, frames[:, t])
    print(f"wrote {frames.shape[1]} frames to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    reports = []
    for v in variants:
        spec = ArchSpec(backbone=args.arch, variant=v, num_classes=args.classes, input_size=tuple(args.input_size))
        reports.append(count_macs(Model(spec)))
    for r in reports:
        print(f"{r.variant}: params {r.total_params / 1e6:.2f}M  MACs {r.total_macs / 1e9:.2f}G  "
              f"({r.macs_per_frame / 1e9:.3f}G per input frame)")
    if len(reports) > 1:
        for row in compare_costs(reports, reference=args.reference):
            print(f"{row['variant']}: params x{row['params_ratio']:.3f}  MACs x{row['macs_ratio']:.3f} vs {args.reference}")
    if out:
        for r in reports:
            write_csv(out / f"costs_{r.variant}.csv", r.rows())
        if len(reports) > 1:
            write_csv(out / "cost_comparison.csv", compare_costs(reports, reference=args.reference))
    if args.checkpoint:
        m = load_checkpoint(args.checkpoint)
        if m.variant == "rcn":
            stats = whh_statistics(m)
            if out:
                write_csv(out / "hidden_stats.csv", stats.rows())
            for row in stats.rows():
                print(f"{row['layer']}: mean {row['mean']:.4f} std {row['std']:.4f} "
                      f"eig mean {row['eig_mean']:.4f} eig std {row['eig_std']:.4f}")
        if args.data:
            data = ClipDataset.load(args.data)
            if data.dense:
                raise UsageError("curves need a recognition dataset, not dense")
            _, videos = next(eval_views(data.frames, data.frames.shape[2], m.spec.input_size[1], 1))
            videos = videos.astype(m.spec.np_dtype)
            curve = early_prediction_curve(m, videos, data.labels, [i / 10 for i in range(1, 11)])
            segments = segment_relative_accuracy(m, videos, data.labels, args.segments)
            for row in curve:
                print(f"observed {row['fraction']:.1f}: accuracy {row['accuracy']:.4f}")
            if out:
                write_csv(out / "early_prediction.csv", curve)
                write_csv(out / "segment_accuracy.csv", segments)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcnet", description="Recurrent convolutional video networks at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        return sp

    with_config(sub.add_parser("gen", help="write train/val dataset containers")).set_defaults(fn=cmd_gen)
    with_config(sub.add_parser("train", help="train a model, write checkpoint and metrics.csv")).set_defaults(fn=cmd_train)

    sp = with_config(sub.add_parser("eval", help="ten-clip evaluation of a checkpoint"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="dataset container (default: config's val split)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("stream", help="score length-prefixed frames one at a time")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", default="-", help="frame file, or - for stdin")
    sp.set_defaults(fn=cmd_stream)

    sp = sub.add_parser("export-frames", help="write one dataset video in the stream wire format")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--crop", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export_frames)

    sp = sub.add_parser("analyze", help="cost tables, hidden-weight statistics, early-prediction curves")
    sp.add_argument("--arch", default="resnet18")
    sp.add_argument("--variant", default="all", choices=VARIANTS + ("all",))
    sp.add_argument("--classes", type=int, default=400)
    sp.add_argument("--input-size", type=int, nargs=3, default=(16, 112, 112), metavar=("T", "H", "W"))
    sp.add_argument("--reference", default="rcn", choices=VARIANTS)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--segments", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, FileNotFoundError, container.ContainerError, ValueError) as exc:
        print(f"rcnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1


if __name__ == "__main__":
    sys.exit(main())
