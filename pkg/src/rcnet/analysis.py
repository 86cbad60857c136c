"""Structural and behavioural analysis of built or trained models.

Cost accounting counts one MAC per multiply-accumulate inside convolutions
(BN, ReLU and pooling are free).  Eigenvalues come from a Householder
Hessenberg reduction followed by shifted QR iteration.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from rcnet.arch import Model, forward_clip, unroll_eval

# --------------------------------------------------------------------------
# parameter and MAC accounting


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    out_shape: tuple


@dataclass
class CostReport:
    variant: str
    input_size: tuple
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def macs_per_frame(self) -> float:
        return self.total_macs / self.input_size[0]

    def rows(self) -> list[dict]:
        return [
            {"layer": l.name, "kind": l.kind, "params": l.params, "macs": l.macs,
             "out_shape": "x".join(map(str, l.out_shape))}
            for l in self.layers
        ]


def _layer_params(layer) -> int:
    return sum(p.data.size for p in layer.parameters().values())


def count_macs(m: Model, input_size: Sequence[int] | None = None) -> CostReport:
    """Per-layer parameter and MAC counts for a ``(T, H, W)`` input."""
    size = tuple(input_size or m.spec.input_size)
    report = CostReport(m.variant, size)
    for name, layer, _in, out, macs in m.walk_shapes(size):
        report.layers.append(LayerCost(name, layer.kind, _layer_params(layer), int(macs), tuple(out)))
    return report


def count_params(m: Model) -> CostReport:
    """Learnable parameters: kernels, BN scale/shift, classifier; no running stats."""
    return count_macs(m)


def compare_costs(reports: Iterable[CostReport], reference: str = "rcn") -> list[dict]:
    """Totals per variant with parameter and MAC ratios against ``reference``."""
    reports = list(reports)
    ref = next((r for r in reports if r.variant == reference), reports[0])
    return [
        {
            "variant": r.variant,
            "params": r.total_params,
            "macs": r.total_macs,
            "macs_per_frame": r.macs_per_frame,
            "params_ratio": r.total_params / ref.total_params,
            "macs_ratio": r.total_macs / ref.total_macs,
        }
        for r in reports
    ]


# --------------------------------------------------------------------------
# temporal receptive fields


def receptive_window(ops: Sequence[tuple[int, int, int]], t: int) -> tuple[int, int]:
    """Input-frame interval (1-based, unclamped) feeding output frame ``t``
    of a chain of temporal convolutions given as ``(n, stride, pad)``."""
    lo = hi = t
    for n, s, p in reversed(ops):
        lo = (lo - 1) * s - p + 1
        hi = (hi - 1) * s - p + n
    return lo, hi


def temporal_receptive_field(m: Model, layer: str, t: int) -> tuple[int, int]:
    """Input frames that can influence frame ``t`` of ``layer``'s output.

    ``layer`` is a stage name (``conv1``, ``res3``, ``convC``...) or a layer
    name.  Recurrent models see the whole past: ``(1, t)``.
    """
    if m.variant == "rcn":
        return (1, t)
    chain = m.temporal_chain()
    stages = [c[0] for c in chain]
    names = [c[1] for c in chain]
    if layer in ("pool", "convC", "mean"):
        cut = len(chain)
    elif layer in names:
        cut = names.index(layer) + 1
    elif layer in stages:
        cut = len(stages) - stages[::-1].index(layer)
    else:
        raise ValueError(f"unknown layer {layer!r}")
    return receptive_window([c[2:] for c in chain[:cut]], t)


# --------------------------------------------------------------------------
# eigenvalues


class EigenConvergenceError(RuntimeError):
    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Upper Hessenberg matrix similar to ``a`` (Householder reflections)."""
    h = np.array(a, dtype=np.result_type(a, float), copy=True)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        norm = np.linalg.norm(x)
        if norm == 0.0:
            continue
        v = x.copy()
        v[0] += norm if x[0].real >= 0 else -norm
        v /= np.linalg.norm(v)
        h[k + 1:, k:] -= 2.0 * np.outer(v, v.conj() @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v.conj())
        h[k + 2:, k] = 0.0
    return h


def _eig2(a, b, c, d):
    mean = (a + d) / 2
    root = np.sqrt(((a - d) / 2) ** 2 + b * c + 0j)
    return mean + root, mean - root


def eigenvalues(a: np.ndarray, max_iter: int = 60) -> np.ndarray:
    """Complex eigenvalues of a real square matrix.

    Raises :class:`EigenConvergenceError` when an eigenvalue needs more than
    ``max_iter`` QR sweeps.
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigenvalues needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    h = hessenberg(a).astype(complex)
    eps = np.finfo(float).eps
    scale = max(np.abs(h).max(), np.finfo(float).tiny)
    out = np.empty(n, dtype=complex)
    hi = n - 1
    sweeps = 0
    while hi >= 0:
        lo = hi
        while lo > 0:
            s = abs(h[lo - 1, lo - 1]) + abs(h[lo, lo])
            if abs(h[lo, lo - 1]) <= eps * (s if s > 0 else scale):
                h[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            out[hi] = h[hi, hi]
            hi -= 1
            sweeps = 0
            continue
        if lo == hi - 1:
            out[hi - 1], out[hi] = _eig2(h[lo, lo], h[lo, hi], h[hi, lo], h[hi, hi])
            hi -= 2
            sweeps = 0
            continue
        sweeps += 1
        if sweeps > max_iter:
            out[: hi + 1] = np.nan
            raise EigenConvergenceError(f"QR iteration did not converge after {max_iter} sweeps", out)
        if sweeps % 10 == 0:
            mu = h[hi, hi] + abs(h[hi, hi - 1])  # exceptional shift
        else:
            e1, e2 = _eig2(h[hi - 1, hi - 1], h[hi - 1, hi], h[hi, hi - 1], h[hi, hi])
            mu = e1 if abs(e1 - h[hi, hi]) < abs(e2 - h[hi, hi]) else e2
        _qr_sweep(h, lo, hi, mu)
    return out


def _qr_sweep(h: np.ndarray, lo: int, hi: int, mu: complex) -> None:
    """One shifted QR step ``RQ + mu`` on the active block ``h[lo:hi+1, lo:hi+1]``."""
    blk = h[lo:hi + 1, lo:hi + 1]
    m = blk.shape[0]
    blk[np.arange(m), np.arange(m)] -= mu
    rots = []
    for k in range(m - 1):
        x, y = blk[k, k], blk[k + 1, k]
        r = math.hypot(abs(x), abs(y))
        if r == 0.0:
            c, s = 1.0 + 0j, 0j
        else:
            c, s = x / r, y / r
        rows = blk[k:k + 2, k:].copy()
        blk[k, k:] = c.conjugate() * rows[0] + s.conjugate() * rows[1]
        blk[k + 1, k:] = -s * rows[0] + c * rows[1]
        rots.append((c, s))
    for k, (c, s) in enumerate(rots):
        top = min(k + 2, m - 1) + 1
        cols = blk[:top, k:k + 2].copy()
        blk[:top, k] = c * cols[:, 0] + s * cols[:, 1]
        blk[:top, k + 1] = -s.conjugate() * cols[:, 0] + c.conjugate() * cols[:, 1]
    blk[np.arange(m), np.arange(m)] += mu


@dataclass
class HiddenLayerStats:
    layer: str
    size: int
    mean: float
    std: float
    diag_mean: float
    diag_std: float
    eig_mean: float
    eig_std: float
    converged: bool


@dataclass
class HiddenStatsReport:
    layers: list[HiddenLayerStats] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [asdict(l) for l in self.layers]


def whh_statistics(m: Model, max_iter: int = 60) -> HiddenStatsReport:
    """Entry, diagonal and eigenvalue-magnitude statistics of every hidden kernel."""
    report = HiddenStatsReport()
    for layer in m.rcu_layers():
        w = layer.params.w_hh.data[:, :, 0, 0, 0].astype(float)
        diag = np.diag(w)
        try:
            mags = np.abs(eigenvalues(w, max_iter))
            converged = True
        except EigenConvergenceError as exc:
            mags = np.abs(exc.partial[np.isfinite(exc.partial)])
            converged = False
        report.layers.append(HiddenLayerStats(
            layer.name, w.shape[0], float(w.mean()), float(w.std()), float(diag.mean()),
            float(diag.std()), float(mags.mean()) if mags.size else float("nan"),
            float(mags.std()) if mags.size else float("nan"), converged,
        ))
    return report


# --------------------------------------------------------------------------
# early prediction and segment analysis


def _per_frame_scores(m: Model, videos: np.ndarray, chunk: int = 64) -> np.ndarray:
    parts = [unroll_eval(m, videos[i:i + chunk]).per_frame for i in range(0, len(videos), chunk)]
    return np.concatenate(parts, axis=0)


def video_accuracy(m: Model, videos: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the temporal-mean score of a full unroll over each video."""
    preds = []
    for i in range(0, len(videos), 64):
        preds.append(unroll_eval(m, videos[i:i + 64]).video.argmax(axis=1))
    return float((np.concatenate(preds) == labels).mean())


def early_prediction_curve(m: Model, videos: np.ndarray, labels: np.ndarray,
                           fractions: Sequence[float]) -> list[dict]:
    """Accuracy from the mean of the first ``ceil(f * T)`` per-frame scores."""
    per_frame = _per_frame_scores(m, videos)
    T = per_frame.shape[1]
    rows = []
    for f in fractions:
        k = min(T, max(1, math.ceil(f * T - 1e-9)))
        preds = per_frame[:, :k].mean(axis=1).argmax(axis=1)
        rows.append({"fraction": float(f), "frames": k, "accuracy": float((preds == labels).mean())})
    return rows


def _segment_bounds(length: int, n: int) -> list[tuple[int, int]]:
    if length < n:
        raise ValueError(f"cannot split {length} frames into {n} segments")
    edges = np.linspace(0, length, n + 1).round().astype(int)
    return list(zip(edges[:-1], edges[1:]))


def segment_relative_accuracy(m: Model, videos: np.ndarray, labels: np.ndarray,
                              n_segments: int = 10, mode: str = "unrolled") -> list[dict]:
    """Accuracy of each of ``n_segments`` regular segments minus that of the first.

    ``unrolled`` averages the scores a single pass over the whole video gives
    inside each segment; ``sliding`` evaluates every segment as a fresh clip.
    """
    if mode == "unrolled":
        per_frame = _per_frame_scores(m, videos)
        seg_scores = [per_frame[:, a:b].mean(axis=1) for a, b in _segment_bounds(per_frame.shape[1], n_segments)]
    elif mode == "sliding":
        seg_scores = []
        for a, b in _segment_bounds(videos.shape[2], n_segments):
            clip = videos[:, :, a:b]
            scores = [forward_clip(m, clip[i:i + 64]).video for i in range(0, len(clip), 64)]
            seg_scores.append(np.concatenate(scores, axis=0))
    else:
        raise ValueError(f"mode must be 'unrolled' or 'sliding', got {mode!r}")
    accs = [float((s.argmax(axis=1) == labels).mean()) for s in seg_scores]
    return [{"segment": i + 1, "accuracy": a, "delta": a - accs[0]} for i, a in enumerate(accs)]


# --------------------------------------------------------------------------
# dense prediction


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall step curve, ties grouped into one threshold."""
    scores = np.asarray(scores, dtype=float).ravel()
    positives = np.asarray(positives).ravel().astype(bool)
    n_pos = positives.sum()
    if n_pos == 0:
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positives[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def frame_map(per_frame_scores: np.ndarray, masks: np.ndarray, k: int = 1) -> float:
    """Frame-wise mAP over every ``k``-th frame, averaged over classes with positives.

    Inputs are ``(T, C)`` or ``(N, T, C)``.
    """
    scores = np.asarray(per_frame_scores)
    masks = np.asarray(masks)
    if scores.shape != masks.shape:
        raise ValueError(f"scores {scores.shape} and masks {masks.shape} are not aligned")
    if scores.ndim == 2:
        scores, masks = scores[None], masks[None]
    s = scores[:, ::k].reshape(-1, scores.shape[-1])
    y = masks[:, ::k].reshape(-1, masks.shape[-1])
    aps = [average_precision(s[:, c], y[:, c]) for c in range(s.shape[1]) if y[:, c].any()]
    if not aps:
        raise ValueError("no class has a positive frame")
    return float(np.mean(aps))


def write_csv(path, rows: list[dict]) -> None:
    rows = list(rows)
    with Path(path).open("w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
