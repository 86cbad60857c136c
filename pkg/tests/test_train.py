import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import check
from rcnet.arch import ArchSpec, build_model
from rcnet.container import ContainerError
from rcnet.tensor import Tensor
from rcnet.train import (
    ClipDataset,
    SyntheticClip,
    TrainConfig,
    TrainingDiverged,
    augment,
    bce_multilabel,
    cross_entropy,
    eval_views,
    evaluate,
    gen_motion_dataset,
    learning_rate,
    linear_scaled_lr,
    render_blob,
    sgd_step,
    train_loop,
)

TINY = dict(num_classes=4, input_size=(8, 16, 16))


def quick_cfg(**kw):
    base = dict(batch=4, max_iters=3, clip_frames=8, crop=16, eval_every=100, eval_clips=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def direction_small():
    return gen_motion_dataset(24, 10, 18, 18, "direction", seed=3)


# --------------------------------------------------------------------------
# losses


def test_cross_entropy_uniform_is_log_classes():
    for C in (2, 4, 400):
        assert float(cross_entropy(Tensor(np.zeros((3, C))), [0, 1, 1]).data) == pytest.approx(math.log(C))


def test_cross_entropy_hand_example():
    # -log(e^2 / (e^2 + 1))
    assert float(cross_entropy(Tensor(np.array([[2.0, 0.0]])), [0]).data) == pytest.approx(0.126928, abs=1e-6)


def test_cross_entropy_stable_for_large_logits():
    assert float(cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0]).data) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("labels", [[4], [-1], [0, 1]])
def test_cross_entropy_rejects_bad_labels(labels):
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 4))), labels)


def test_bce_perfect_fit_goes_to_zero():
    mask = np.array([[1, 0, 1], [0, 0, 1]])
    logits = np.where(mask == 1, 40.0, -40.0)
    assert float(bce_multilabel(Tensor(logits), mask).data) < 1e-15


def test_bce_zero_logits_log_two():
    assert float(bce_multilabel(Tensor(np.zeros((2, 5))), np.ones((2, 5))).data) == pytest.approx(math.log(2))


def test_bce_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        bce_multilabel(Tensor(np.zeros((2, 5))), np.ones((2, 4)))


@given(st.integers(0, 2**31))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, 3)
    mask = rng.integers(0, 2, (3, 6, 5))
    assert check(lambda s: cross_entropy(s, labels), [rng.standard_normal((3, 5)) * 3]) <= 1e-6
    assert check(lambda s: bce_multilabel(s, mask), [rng.standard_normal((3, 6, 5)) * 3]) <= 1e-6


# --------------------------------------------------------------------------
# optimizer and schedule


def one_param_model(value=1.0):
    m = build_model(ArchSpec(**TINY))
    p = m.classifier.b
    p.data[:] = value
    return m, p


def test_plain_sgd_step():
    m, p = one_param_model()
    sgd_step(m, {p: np.ones_like(p.data)}, TrainConfig(lr0=0.1, momentum=0.0, weight_decay=0.0), 0, {})
    np.testing.assert_allclose(p.data, 0.9)


def test_momentum_and_weight_decay():
    m, p = one_param_model()
    cfg = TrainConfig(lr0=0.1, momentum=0.5, weight_decay=0.1)
    vel = {}
    sgd_step(m, {p: np.ones_like(p.data)}, cfg, 0, vel)
    np.testing.assert_allclose(p.data, 1 - 0.1 * 1.1)
    theta = p.data.copy()
    sgd_step(m, {p: np.ones_like(p.data)}, cfg, 1, vel)
    np.testing.assert_allclose(p.data, theta - 0.1 * (0.5 * 1.1 + 1 + 0.1 * theta))


def test_parameters_without_gradient_untouched():
    m, p = one_param_model()
    before = {n: q.data.copy() for n, q in m.named_parameters().items()}
    sgd_step(m, {p: np.ones_like(p.data)}, TrainConfig(), 0, {})
    for n, q in m.named_parameters().items():
        if q is not p:
            np.testing.assert_array_equal(q.data, before[n])


def test_step_schedule():
    cfg = TrainConfig(lr0=0.1, max_iters=400)
    assert cfg.drops == (250, 350)
    assert learning_rate(cfg, 249) == 0.1
    assert learning_rate(cfg, 250) == pytest.approx(0.01)
    assert learning_rate(cfg, 350) == pytest.approx(0.001)
    assert TrainConfig(lr0=1.0, lr_drop_steps=(5,), drop_factor=2).drops == (5,)
    assert learning_rate(TrainConfig(lr0=1.0, lr_drop_steps=(5,), drop_factor=2), 7) == 0.5


def test_linear_scaling():
    assert linear_scaled_lr(0.2, 16) == pytest.approx(0.05)
    assert linear_scaled_lr(0.1, 64) == 0.1


@pytest.mark.parametrize("bad", [dict(lr0=0.0), dict(lr_drop_steps=(10, 5))])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# --------------------------------------------------------------------------
# augmentation


def test_double_flip_is_identity(direction_small):
    clip = direction_small[0]
    once = augment(clip, 0, crop=18, clip_frames=10, flip=True)
    twice = augment(once, 0, crop=18, clip_frames=10, flip=True)
    np.testing.assert_array_equal(twice.frames, clip.frames)
    assert twice.label == clip.label


def test_flip_mirrors_pixels_and_horizontal_labels():
    clip = SyntheticClip(np.arange(3 * 2 * 4 * 4, dtype=float).reshape(3, 2, 4, 4), 0, "direction")
    out = augment(clip, 0, flip=True)
    np.testing.assert_array_equal(out.frames, clip.frames[..., ::-1])
    assert [augment(SyntheticClip(clip.frames, c, "direction"), 0, flip=True).label for c in range(4)] == [1, 0, 2, 3]


def test_flipped_right_motion_is_left_motion():
    right = render_blob(6, 12, 12, (4.0, 3.0), (0.0, 2.0))
    left = render_blob(6, 12, 12, (4.0, 11 - 3.0), (0.0, -2.0))
    np.testing.assert_allclose(right[..., ::-1], left, atol=1e-12)


def test_dense_flip_permutes_mask_columns():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[:, 0] = 1
    out = augment(SyntheticClip(np.zeros((3, 4, 8, 8)), mask, "dense"), 0, flip=True)
    assert out.label[:, 1].all() and not out.label[:, 0].any()


def test_temporal_offsets_stay_in_range():
    frames = np.broadcast_to(np.arange(12.0)[None, :, None, None], (3, 12, 4, 4))
    clip = SyntheticClip(np.ascontiguousarray(frames), 0)
    rng = np.random.default_rng(0)
    starts = {int(augment(clip, rng, clip_frames=8).frames[0, 0, 0, 0]) for _ in range(300)}
    assert starts == {0, 1, 2, 3, 4}


def test_augment_reproducible(direction_small):
    a = augment(direction_small[2], 11, crop=14, clip_frames=6)
    b = augment(direction_small[2], 11, crop=14, clip_frames=6)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.frames.shape == (3, 6, 14, 14)


def test_augment_rejects_small_clip(direction_small):
    with pytest.raises(ValueError):
        augment(direction_small[0], 0, crop=20)
    with pytest.raises(ValueError):
        augment(direction_small[0], 0, clip_frames=11)


def test_eval_views_regular_and_centred():
    frames = np.zeros((1, 3, 20, 10, 10))
    views = list(eval_views(frames, 8, 6, 5))
    assert [t0 for t0, _ in views] == [0, 3, 6, 9, 12]
    assert all(v.shape == (1, 3, 8, 6, 6) for _, v in views)


# --------------------------------------------------------------------------
# synthetic data


def test_reversed_right_clip_is_left_clip():
    T, v = 7, np.array([0.0, 2.0])
    fwd = render_blob(T, 16, 16, (5.0, 2.0), v)
    back = render_blob(T, 16, 16, (5.0, 2.0) + (T - 1) * v, -v)
    np.testing.assert_allclose(fwd[:, ::-1], back, atol=1e-12)


def test_generation_is_deterministic(tmp_path):
    a = gen_motion_dataset(6, 8, 12, 12, "direction", seed=5)
    b = gen_motion_dataset(6, 8, 12, 12, "direction", seed=5)
    a.save(tmp_path / "a.rcd")
    b.save(tmp_path / "b.rcd")
    assert (tmp_path / "a.rcd").read_bytes() == (tmp_path / "b.rcd").read_bytes()
    assert not np.array_equal(a.frames, gen_motion_dataset(6, 8, 12, 12, "direction", seed=6).frames)


def nearest_mean_accuracy(x, y, classes):
    half = len(x) // 2
    means = np.stack([x[:half][y[:half] == c].mean(axis=0) for c in range(classes)])
    d = ((x[half:, None] - means[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == y[half:]).mean())


def test_single_frames_carry_no_direction_signal():
    data = gen_motion_dataset(800, 6, 12, 12, "direction", seed=1)
    frame = data.frames[:, :, 3].reshape(len(data), -1)
    # pixel and intensity statistics of one frame
    features = np.concatenate([frame, np.sort(frame, axis=1)[:, -20:]], axis=1)
    assert nearest_mean_accuracy(features, data.labels, 4) <= 0.25 + 0.05


def test_order_task_frames_balanced():
    data = gen_motion_dataset(200, 12, 16, 16, "order", seed=2)
    assert set(np.unique(data.labels)) == {0, 1}
    # each clip shows both shapes, so the set of shapes is not informative
    energy = (data.frames[:, 0] > 0.3).sum(axis=(2, 3))
    assert ((energy > 0).sum(axis=1) >= 2).all()


def test_dense_masks_binary_and_aligned():
    data = gen_motion_dataset(10, 16, 16, 16, "dense", seed=0)
    assert data.labels.shape == (10, 16, 4)
    assert set(np.unique(data.labels)) <= {0, 1}
    assert data.dense and data.num_classes == 4


@pytest.mark.parametrize("kw", [dict(task="jumping"), dict(T=3)])
def test_generation_rejects_bad_arguments(kw):
    args = dict(num_clips=2, T=8, H=12, W=12)
    args.update(kw)
    with pytest.raises(ValueError):
        gen_motion_dataset(**args)


def test_static_shapes_task_allows_one_frame():
    data = gen_motion_dataset(4, 1, 16, 16, "shapes", seed=0)
    assert data.frames.shape == (4, 3, 1, 16, 16)


@pytest.mark.parametrize("task", ["direction", "dense"])
def test_dataset_container_round_trip(tmp_path, task):
    data = gen_motion_dataset(5, 8, 12, 12, task, seed=4)
    data.save(tmp_path / "d.rcd")
    back = ClipDataset.load(tmp_path / "d.rcd")
    np.testing.assert_array_equal(back.frames, data.frames)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert (back.task, back.seed) == (task, 4)


def test_dataset_container_rejects_garbage(tmp_path):
    (tmp_path / "x.rcd").write_bytes(b"not a dataset at all")
    with pytest.raises(ContainerError):
        ClipDataset.load(tmp_path / "x.rcd")


def test_split():
    a, b = gen_motion_dataset(10, 8, 12, 12, seed=0).split(7)
    assert (len(a), len(b)) == (7, 3)


# --------------------------------------------------------------------------
# training loop


def snapshot(m):
    return {n: p.data.copy() for n, p in m.named_parameters().items()}


def test_zero_iterations_leave_model_unchanged(direction_small):
    m = build_model(ArchSpec(**TINY))
    before = snapshot(m)
    result = train_loop(m, direction_small, quick_cfg(max_iters=0))
    assert all(np.array_equal(before[n], p.data) for n, p in m.named_parameters().items())
    assert [r["iter"] for r in result.log] == [0]


def test_training_is_deterministic(direction_small):
    runs = []
    for _ in range(2):
        m = build_model(ArchSpec(**TINY), seed=1)
        train_loop(m, direction_small, quick_cfg(seed=7))
        runs.append(snapshot(m))
    for name in runs[0]:
        np.testing.assert_array_equal(runs[0][name], runs[1][name])


def test_divergence_aborts(direction_small):
    m = build_model(ArchSpec(**TINY))
    m.classifier.b.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train_loop(m, direction_small, quick_cfg())


def test_frozen_hidden_kernels_stay_put(direction_small):
    m = build_model(ArchSpec(**TINY))
    before = snapshot(m)
    train_loop(m, direction_small, quick_cfg(freeze_hidden=True))
    changed = {n for n, p in m.named_parameters().items() if not np.array_equal(before[n], p.data)}
    assert changed and not any(n.endswith(".w_hh") for n in changed)
    assert all(p.requires_grad for p in m.named_parameters().values())


def test_log_columns_and_eval_rows(direction_small, tmp_path):
    m = build_model(ArchSpec(**TINY))
    val = gen_motion_dataset(8, 10, 16, 16, "direction", seed=9)
    result = train_loop(m, direction_small, quick_cfg(max_iters=5, eval_every=2), val, tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iter", "lr", "loss", "acc"]
    assert [r["iter"] for r in rows] == ["0", "1", "2", "3", "4", "5"]
    assert [r["acc"] != "" for r in rows] == [True, False, True, False, True, True]
    assert float(rows[-1]["acc"]) == evaluate(m, val, 8, 16, 2)["video_acc"] == result.final_metrics["video_acc"]


def test_stop_at_target(direction_small):
    m = build_model(ArchSpec(**TINY))
    result = train_loop(m, direction_small, quick_cfg(max_iters=50, eval_every=1, target_acc=0.0, stop_at_target=True),
                        direction_small)
    assert result.reached_at == 0 and len(result.log) == 1


def test_dense_training_reports_map():
    data = gen_motion_dataset(8, 8, 16, 16, "dense", seed=0)
    m = build_model(ArchSpec(**TINY))
    result = train_loop(m, data, quick_cfg(max_iters=2), data)
    assert set(result.final_metrics) == {"map@1", "map@8"}
    assert 0.0 <= result.final_metrics["map@1"] <= 1.0


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["rcn", "i3d", "2plus1d"])
def test_loss_decreases(variant):
    data = gen_motion_dataset(64, 8, 16, 16, "shapes", seed=0)
    m = build_model(ArchSpec(variant=variant, **TINY), seed=0)
    log = train_loop(m, data, quick_cfg(max_iters=100, batch=8, crop=16)).log
    losses = [r["loss"] for r in log if r["loss"] != ""]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
