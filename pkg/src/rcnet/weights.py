"""Initialization schemes, 2D-donor inflation and checkpoint persistence."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rcnet import container
from rcnet.arch import ArchSpec, Model
from rcnet.layers import Conv3dLayer, RcuLayer

CKPT_MAGIC = b"RCNCKPT\x00"


class CheckpointError(container.ContainerError):
    pass


class InflationError(ValueError):
    pass


def init_random(m: Model, seed: int = 0) -> Model:
    """Fan-in scaled normal kernels (std ``sqrt(2 / fan_in)``), unit BN, zero biases."""
    rng = np.random.default_rng(seed)
    for name, p in m.named_parameters().items():
        if p.ndim == 5:
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.shape)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    for bn in m.batchnorms().values():
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 1.0
    return m


def init_identity_hidden(m: Model) -> Model:
    """Set every hidden kernel to the channel identity."""
    if m.variant != "rcn":
        raise ValueError(f"identity hidden init applies to rcn models, not {m.variant}")
    for layer in m.rcu_layers():
        w = layer.params.w_hh.data
        w[...] = 0.0
        w[:, :, 0, 0, 0] = np.eye(w.shape[0])
    return m


def set_hidden(m: Model, value: float | str, seed: int = 0) -> Model:
    """Overwrite hidden kernels: ``"identity"``, ``"random"`` (fan-in normal) or a constant."""
    if value == "identity":
        return init_identity_hidden(m)
    rng = np.random.default_rng(seed)
    for layer in m.rcu_layers():
        w = layer.params.w_hh.data
        if value == "random":
            w[...] = rng.normal(0.0, np.sqrt(2.0 / w.shape[1]), size=w.shape)
        else:
            w[...] = float(value)
    return m


# --------------------------------------------------------------------------
# 2D donors


@dataclass
class Donor2dCheckpoint:
    """Named 2D kernels ``(Cout, Cin, d, d)`` and BN parameters of a 2D ResNet."""

    kernels: dict[str, np.ndarray] = field(default_factory=dict)
    batchnorms: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    spec: ArchSpec | None = None

    @classmethod
    def from_model(cls, m: Model) -> "Donor2dCheckpoint":
        if m.variant != "2d":
            raise ValueError("donors are extracted from 2d-topology models")
        kernels = {}
        for layer in m.layers():
            if isinstance(layer, Conv3dLayer):
                kernels[layer.name] = layer.params.w.data[:, :, 0].copy()
        bns = {
            name: {
                "gamma": bn.gamma.data.copy(),
                "beta": bn.beta.data.copy(),
                "running_mean": bn.running_mean.copy(),
                "running_var": bn.running_var.copy(),
            }
            for name, bn in m.batchnorms().items()
        }
        return cls(kernels, bns, m.spec)

    def save(self, path) -> None:
        blobs = {f"kernel:{k}": v for k, v in self.kernels.items()}
        for name, fields in self.batchnorms.items():
            for key, arr in fields.items():
                blobs[f"bn:{name}:{key}"] = arr
        header = {"kind": "donor", "topology": "2d", "spec": self.spec.to_dict() if self.spec else None}
        container.write(path, CKPT_MAGIC, header, blobs)

    @classmethod
    def load(cls, path) -> "Donor2dCheckpoint":
        header, blobs = _read(path)
        if header.get("topology") != "2d":
            raise CheckpointError(f"{path}: not a 2d donor checkpoint (topology {header.get('topology')!r})")
        donor = cls(spec=ArchSpec.from_dict(header["spec"]) if header.get("spec") else None)
        for key, arr in blobs.items():
            kind, _, rest = key.partition(":")
            if kind == "kernel":
                donor.kernels[rest] = arr
            elif kind == "bn":
                name, _, field_ = rest.rpartition(":")
                donor.batchnorms.setdefault(name, {})[field_] = arr
        return donor


def inflate_from_2d(m: Model, donor: Donor2dCheckpoint) -> Model:
    """Copy donor weights into ``m``.

    RCU spatial kernels take the donor kernel unchanged; ``n x d x d`` kernels
    take it replicated ``n`` times along time and divided by ``n``.  BN
    parameters and statistics are copied.  Hidden kernels and the classifier
    are left alone.
    """
    if m.variant == "2plus1d":
        raise InflationError("donor inflation unsupported for 2plus1d: its middle planes have no 2D counterpart")

    def kernel(name, shape):
        if name not in donor.kernels:
            raise InflationError(f"donor has no kernel {name!r}")
        k = donor.kernels[name]
        if k.shape != shape:
            raise InflationError(f"donor kernel {name!r} has shape {k.shape}, expected {shape}")
        return k

    for layer in m.layers():
        if isinstance(layer, RcuLayer):
            w = layer.params.w_xh.data
            w[:, :, 0] = kernel(layer.name, w.shape[:2] + w.shape[3:])
        elif isinstance(layer, Conv3dLayer):
            w = layer.params.w.data
            n = w.shape[2]
            k = kernel(layer.name, w.shape[:2] + w.shape[3:])
            w[...] = np.repeat(k[:, :, None], n, axis=2) / n
    for name, bn in m.batchnorms().items():
        if name not in donor.batchnorms:
            raise InflationError(f"donor has no batchnorm {name!r}")
        src = donor.batchnorms[name]
        if src["gamma"].shape != bn.gamma.shape:
            raise InflationError(f"donor batchnorm {name!r} has {src['gamma'].shape[0]} channels, expected {bn.channels}")
        bn.gamma.data[...] = src["gamma"]
        bn.beta.data[...] = src["beta"]
        bn.running_mean[...] = src["running_mean"]
        bn.running_var[...] = src["running_var"]
    return m


def donor_spec(spec: ArchSpec, num_classes: int | None = None) -> ArchSpec:
    """The 2D topology matching ``spec`` (same widths, kernels and spatial strides)."""
    d = spec.to_dict()
    d["variant"] = "2d"
    if num_classes is not None:
        d["num_classes"] = num_classes
    return ArchSpec.from_dict(d)


# --------------------------------------------------------------------------
# checkpoints


def _read(path):
    try:
        return container.read(path, CKPT_MAGIC)
    except container.ContainerError as exc:
        raise CheckpointError(str(exc)) from None


def save_checkpoint(m: Model, path, seed: int | None = None, meta: dict | None = None) -> None:
    blobs = {f"param:{k}": v.data for k, v in m.named_parameters().items()}
    for name, bn in m.batchnorms().items():
        blobs[f"buffer:{name}:running_mean"] = bn.running_mean
        blobs[f"buffer:{name}:running_var"] = bn.running_var
    header = {
        "kind": "model",
        "topology": m.variant,
        "spec": m.spec.to_dict(),
        "seed": seed,
        "meta": meta or {},
    }
    container.write(path, CKPT_MAGIC, header, blobs)


def load_checkpoint(path, spec: ArchSpec | None = None) -> Model:
    """Rebuild the stored model; ``spec``, when given, must equal the stored one."""
    header, blobs = _read(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind {header.get('kind')!r})")
    stored = ArchSpec.from_dict(header["spec"])
    if spec is not None and spec != stored:
        raise CheckpointError(f"{path}: checkpoint spec {stored} does not match requested {spec}")
    m = Model(stored)
    params = m.named_parameters()
    for name, p in params.items():
        key = f"param:{name}"
        if key not in blobs or blobs[key].shape != p.shape:
            raise CheckpointError(f"{path}: missing or malformed parameter {name!r}")
        p.data[...] = blobs[key]
    for name, bn in m.batchnorms().items():
        for key in ("running_mean", "running_var"):
            arr = blobs.get(f"buffer:{name}:{key}")
            if arr is None or arr.shape != (bn.channels,):
                raise CheckpointError(f"{path}: missing or malformed buffer {name}.{key}")
            getattr(bn, key)[...] = arr
    m.meta = dict(header.get("meta") or {}, seed=header.get("seed"))
    return m
