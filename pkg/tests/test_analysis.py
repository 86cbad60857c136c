import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_ap, impulse_window
from rcnet.analysis import (
    EigenConvergenceError,
    average_precision,
    compare_costs,
    count_macs,
    count_params,
    early_prediction_curve,
    eigenvalues,
    frame_map,
    hessenberg,
    receptive_window,
    segment_relative_accuracy,
    temporal_receptive_field,
    video_accuracy,
    whh_statistics,
    write_csv,
)
from rcnet.arch import ArchSpec, Model, build_model, unroll_eval
from rcnet.layers import Conv3dLayer
from rcnet.weights import set_hidden

R18 = {v: Model(ArchSpec("resnet18", v, 400, (16, 112, 112))) for v in ("rcn", "i3d", "2plus1d")}


# --------------------------------------------------------------------------
# parameters and MACs


@pytest.mark.parametrize("variant,millions", [("rcn", 12.8), ("i3d", 33.4), ("2plus1d", 33.4)])
def test_resnet18_parameter_counts(variant, millions):
    assert count_params(R18[variant]).total_params / 1e6 == pytest.approx(millions, rel=0.03)


def test_factorized_count_tracks_i3d():
    a, b = count_params(R18["2plus1d"]).total_params, count_params(R18["i3d"]).total_params
    assert abs(a - b) / b < 0.01


def test_running_stats_not_counted():
    m = Model(ArchSpec())
    learnable = sum(p.data.size for p in m.named_parameters().values())
    assert count_params(m).total_params == learnable


def test_totals_are_sums_of_rows():
    r = count_macs(R18["rcn"])
    assert r.total_macs == sum(row["macs"] for row in r.rows())
    assert r.total_params == sum(row["params"] for row in r.rows())
    assert r.macs_per_frame == r.total_macs / 16


def test_pointwise_mac_loop_count():
    layer = Conv3dLayer("p", 2, 3, 1, 1)
    assert layer.macs((2, 4, 1, 1)) == 24


def test_rcn_macs_linear_in_frames():
    m = R18["rcn"]
    assert count_macs(m, (32, 112, 112)).total_macs == 2 * count_macs(m, (16, 112, 112)).total_macs


def test_compare_costs_ratios():
    rows = compare_costs([count_macs(m) for m in R18.values()])
    by = {r["variant"]: r for r in rows}
    assert by["rcn"]["params_ratio"] == 1.0
    assert 2.5 <= by["i3d"]["params_ratio"] <= 2.7
    assert by["i3d"]["macs_ratio"] == by["i3d"]["macs"] / by["rcn"]["macs"]


# --------------------------------------------------------------------------
# receptive fields


def test_rcn_window_is_whole_past():
    assert temporal_receptive_field(build_model(ArchSpec()), "res3", 5) == (1, 5)


def test_single_and_stacked_windows():
    assert receptive_window([(3, 1, 1)], 7) == (6, 8)
    assert receptive_window([(3, 1, 1)] * 4, 7) == (3, 11)


@st.composite
def chains(draw):
    L = draw(st.integers(1, 6))
    return [(n, draw(st.integers(1, 2)), n // 2) for n in draw(st.lists(st.sampled_from([1, 3]), min_size=L, max_size=L))]


@given(chains(), st.data())
def test_window_matches_impulse_tracing(chain, data):
    Tn = 40
    out_len = Tn
    for n, s, p in chain:
        out_len = (out_len + 2 * p - n) // s + 1
    t = data.draw(st.integers(1, out_len))
    lo, hi = receptive_window(chain, t)
    traced = impulse_window(chain, Tn, t)
    # strided unit-extent layers skip frames, so compare the interval hull;
    # a window clipped by the clip edge need not land on a reachable frame
    assert lo <= traced[0] and traced[-1] <= hi
    if 1 <= lo and hi <= Tn:
        assert (traced[0], traced[-1]) == (lo, hi)


def test_model_window_uses_stage_chain():
    m = Model(ArchSpec(variant="i3d"))
    assert temporal_receptive_field(m, "conv1", 4) == (3, 5)
    lo, hi = temporal_receptive_field(m, "convC", 2)
    assert lo < 3 < hi
    with pytest.raises(ValueError):
        temporal_receptive_field(m, "res9", 1)


# --------------------------------------------------------------------------
# eigenvalues


def test_identity_spectrum():
    mags = np.abs(eigenvalues(np.eye(64)))
    assert mags.mean() == 1.0 and mags.std() == 0.0


def test_rotation_generator_pair():
    ev = eigenvalues(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(sorted(ev, key=lambda z: z.imag), [-1j, 1j], atol=1e-10)
    np.testing.assert_allclose(np.abs(ev), 1.0, atol=1e-10)


@pytest.mark.parametrize("a,expected", [
    ([[2.0, 1.0], [1.0, 2.0]], [1.0, 3.0]),
    ([[1.0, 2.0], [3.0, 4.0]], [(5 - np.sqrt(33)) / 2, (5 + np.sqrt(33)) / 2]),
    ([[1.0, -2.0], [2.0, 1.0]], [1 - 2j, 1 + 2j]),
    ([[3.0, 1.0], [0.0, 3.0]], [3.0, 3.0]),
])
def test_closed_form_two_by_two(a, expected):
    ev = sorted(eigenvalues(np.array(a)), key=lambda z: (z.real, z.imag))
    np.testing.assert_allclose(ev, expected, atol=1e-10)


def test_diagonal_spectrum():
    np.testing.assert_allclose(sorted(eigenvalues(np.diag([5.0, 1, 4, 2, 3])).real), [1, 2, 3, 4, 5], atol=1e-12)


@given(st.integers(1, 32), st.integers(0, 2**31))
def test_trace_and_determinant_identities(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    ev = eigenvalues(a)
    assert len(ev) == n
    assert abs(ev.sum() - np.trace(a)) <= 1e-8 * max(1.0, np.abs(a).sum())
    det = np.linalg.det(a)
    assert abs(np.prod(ev) - det) <= 1e-8 * max(abs(det), 1e-300) + 1e-12


def test_hessenberg_is_similar_and_banded(rng):
    a = rng.standard_normal((7, 7))
    h = hessenberg(a)
    assert np.abs(np.tril(h, -2)).max() == 0.0
    assert np.trace(h) == pytest.approx(np.trace(a))
    assert np.linalg.norm(h) == pytest.approx(np.linalg.norm(a))


def test_non_convergence_flagged(rng):
    with pytest.raises(EigenConvergenceError) as info:
        eigenvalues(rng.standard_normal((12, 12)), max_iter=0)
    assert info.value.partial.shape == (12,)


def test_eigenvalues_reject_non_square():
    with pytest.raises(ValueError):
        eigenvalues(np.zeros((2, 3)))


def test_hidden_stats_one_row_per_unit():
    m = set_hidden(build_model(ArchSpec()), "random", seed=2)
    report = whh_statistics(m)
    assert len(report.layers) == len(m.rcu_layers())
    w = m.rcu_layers()[0].params.w_hh.data[:, :, 0, 0, 0]
    row = report.rows()[0]
    assert row["mean"] == pytest.approx(w.mean()) and row["std"] == pytest.approx(w.std())
    assert row["diag_std"] == pytest.approx(np.diag(w).std())
    assert row["eig_mean"] == pytest.approx(np.abs(np.linalg.eigvals(w)).mean(), rel=1e-10)
    assert row["converged"]


# --------------------------------------------------------------------------
# early prediction and segments


def constant_model(classes=4):
    m = build_model(ArchSpec(num_classes=classes, input_size=(10, 16, 16)))
    for p in m.named_parameters().values():
        p.data[...] = 0.0
    m.classifier.b.data[:] = np.arange(classes, dtype=float)
    return m


def test_constant_model_flat_curve(rng):
    videos = rng.standard_normal((6, 3, 10, 16, 16))
    labels = np.array([3, 3, 1, 0, 3, 2])
    rows = early_prediction_curve(constant_model(), videos, labels, [0.1, 0.25, 0.5, 1.0])
    assert {r["accuracy"] for r in rows} == {0.5}
    assert [r["frames"] for r in rows] == [1, 3, 5, 10]


def test_full_observation_equals_unroll(rng):
    m = set_hidden(build_model(ArchSpec(input_size=(7, 16, 16))), "random", seed=1)
    videos = rng.standard_normal((8, 3, 7, 16, 16))
    labels = unroll_eval(m, videos[::-1]).video.argmax(axis=1)  # arbitrary but fixed
    last = early_prediction_curve(m, videos, labels, [1.0])[-1]["accuracy"]
    assert last == video_accuracy(m, videos, labels)


def test_segments_of_stationary_model(rng):
    videos = rng.standard_normal((5, 3, 20, 16, 16))
    labels = np.array([3, 1, 3, 3, 0])
    for mode in ("unrolled", "sliding"):
        rows = segment_relative_accuracy(constant_model(), videos, labels, 10, mode)
        assert len(rows) == 10
        assert rows[0]["delta"] == 0.0
        assert all(r["delta"] == 0.0 for r in rows)


def test_segments_reject_bad_mode_and_short_video(rng):
    with pytest.raises(ValueError):
        segment_relative_accuracy(constant_model(), rng.standard_normal((1, 3, 20, 16, 16)), [0], mode="wrong")
    with pytest.raises(ValueError):
        segment_relative_accuracy(constant_model(), rng.standard_normal((1, 3, 5, 16, 16)), [0], 10)


# --------------------------------------------------------------------------
# frame-wise mAP


def test_perfect_scores_map_one(rng):
    mask = rng.integers(0, 2, size=(3, 16, 4))
    mask[0, 0] = 1
    assert frame_map(mask.astype(float), mask) == 1.0


def test_inverted_balanced_hand_example():
    mask = np.array([1, 1, 1, 0, 0, 0])
    assert average_precision(1 - mask, mask) == brute_ap(1 - mask, mask) == 0.5


@given(st.lists(st.integers(0, 3), min_size=2, max_size=30), st.integers(0, 2**31))
def test_ap_matches_threshold_enumeration(raw_scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(raw_scores))
    labels[0] = 1
    assert average_precision(raw_scores, labels) == pytest.approx(brute_ap(raw_scores, labels), abs=1e-12)


def test_blockwise_constant_k1_equals_k8(rng):
    blocks_s = rng.standard_normal((2, 4, 3))
    blocks_m = rng.integers(0, 2, size=(2, 4, 3))
    blocks_m[:, 0] = 1
    scores, masks = np.repeat(blocks_s, 8, axis=1), np.repeat(blocks_m, 8, axis=1)
    assert frame_map(scores, masks, 1) == frame_map(scores, masks, 8)


def test_map_rejects_misaligned():
    with pytest.raises(ValueError):
        frame_map(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        frame_map(np.zeros((4, 2)), np.zeros((4, 2)))


def test_write_csv(tmp_path):
    write_csv(tmp_path / "r.csv", [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.0}])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b", "1,2.5", "3,4.0"]
