"""Toy experiments on synthetic clips, shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field, replace


from rcnet.analysis import early_prediction_curve, video_accuracy
from rcnet.arch import ArchSpec, build_model
from rcnet.train import TrainConfig, eval_views, gen_motion_dataset, train_loop
from rcnet.weights import set_hidden


@dataclass
class DirectionSetup:
    train_clips: int = 600
    val_clips: int = 200
    frames: int = 12
    size: int = 36
    iters: int = 300
    seed: int = 0
    cfg: TrainConfig = field(default_factory=lambda: TrainConfig(eval_every=50))


def _direction_data(setup: DirectionSetup, seed_offset: int = 0):
    s = setup.seed + seed_offset
    train = gen_motion_dataset(setup.train_clips, setup.frames, setup.size, setup.size, "direction", seed=2 * s + 1)
    val = gen_motion_dataset(setup.val_clips, setup.frames, setup.size, setup.size, "direction", seed=2 * s + 2)
    return train, val


def direction_separation(setup: DirectionSetup | None = None) -> dict:
    """Full RCN versus the same network with hidden kernels pinned at zero."""
    setup = setup or DirectionSetup()
    train, val = _direction_data(setup)
    out = {}
    for name, hidden, frozen in (("rcn", "identity", False), ("zero_hidden", 0.0, True)):
        m = set_hidden(build_model(ArchSpec(), setup.seed), hidden)
        cfg = replace(setup.cfg, max_iters=setup.iters, freeze_hidden=frozen, seed=setup.seed)
        t = time.time()
        result = train_loop(m, train, cfg, val)
        out[name] = {"video_acc": result.final_metrics["video_acc"], "seconds": time.time() - t, "log": result.log}
    out["gap"] = out["rcn"]["video_acc"] - out["zero_hidden"]["video_acc"]
    return out


def iterations_to_target(hidden: str, seed: int, target: float = 0.9, max_iters: int = 600,
                         setup: DirectionSetup | None = None) -> int | None:
    setup = setup or DirectionSetup(val_clips=100)
    train, val = _direction_data(setup, seed_offset=50 + seed)
    m = set_hidden(build_model(ArchSpec(), seed), hidden, seed=seed)
    cfg = TrainConfig(max_iters=max_iters, eval_every=20, eval_clips=3, seed=seed, target_acc=target,
                      stop_at_target=True)
    return train_loop(m, train, cfg, val).reached_at


def init_ablation(seeds=range(5), target: float = 0.9, max_iters: int = 600) -> dict:
    """Median iterations to ``target`` video accuracy; a run that never gets there counts as infinite."""
    out = {}
    for hidden in ("identity", "random"):
        runs = [iterations_to_target(hidden, s, target, max_iters) for s in seeds]
        out[hidden] = {"runs": runs, "median": statistics.median(math.inf if r is None else r for r in runs)}
    return out


def order_curve(iters: int = 300, frames: int = 16, size: int = 32, seed: int = 0,
                fractions=tuple(i / 10 for i in range(1, 11))) -> dict:
    """Train on the order task, then score growing prefixes of held-out videos."""
    train = gen_motion_dataset(600, frames, size, size, "order", seed=2 * seed + 1)
    val = gen_motion_dataset(200, frames, size, size, "order", seed=2 * seed + 2)
    m = build_model(ArchSpec(num_classes=2, input_size=(frames, size, size)), seed)
    cfg = TrainConfig(max_iters=iters, eval_every=100, clip_frames=frames, crop=size, eval_clips=1, seed=seed)
    train_loop(m, train, cfg, val)
    _, videos = next(eval_views(val.frames, frames, size, 1))
    videos = videos.astype(m.spec.np_dtype)
    return {
        "curve": early_prediction_curve(m, videos, val.labels, fractions),
        "unrolled": video_accuracy(m, videos, val.labels),
        "model": m,
    }

