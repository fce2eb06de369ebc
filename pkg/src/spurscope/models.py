"""Small classifiers described by a JSON-serializable layer list.

A :class:`ModelSpec` is a sequence of layer descriptors such as
``{"type": "conv", "out": 8, "k": 3, "pad": 1}``. Layer indices are 1-based
and probe points are layer indices whose outputs are exposed as embeddings;
the last probe is always the final (logit) layer.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_TYPES = ("conv", "relu", "maxpool", "avgpool", "flatten", "dense", "patch_pool")
ACTIVATION_TYPES = ("relu", "maxpool", "avgpool", "patch_pool")


class SpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    classes: int
    probes: Union[str, list] = "activations"

    def to_json(self) -> dict:
        return {"layers": copy.deepcopy(self.layers), "input_shape": list(self.input_shape),
                "classes": self.classes, "probes": copy.deepcopy(self.probes)}

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"layers", "input_shape", "classes", "probes"}
        if unknown:
            raise SpecError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(layers=copy.deepcopy(d["layers"]), input_shape=tuple(d["input_shape"]),
                   classes=int(d["classes"]), probes=copy.deepcopy(d.get("probes", "activations")))

    def probe_layers(self) -> list:
        """1-based layer indices of the probe points."""
        n = len(self.layers)
        if isinstance(self.probes, str):
            if self.probes == "activations":
                kinds = ACTIVATION_TYPES
            elif self.probes == "relu":
                kinds = ("relu",)
            else:
                raise SpecError(f"unknown probe policy {self.probes!r}")
            idx = [i for i, layer in enumerate(self.layers, 1) if layer["type"] in kinds]
            return [i for i in idx if i != n] + [n]
        idx = [int(i) for i in self.probes]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise SpecError(f"probe indices must be strictly increasing: {idx}")
        if not idx or idx[-1] != n or idx[0] < 1:
            raise SpecError(f"probes must lie in [1, {n}] and end at the final layer {n}")
        return idx


def reference_spec(name: str, input_shape=(1, 28, 28), classes: int = 2, **kw) -> ModelSpec:
    """Shipped architectures: ``cnn-small``, ``mlp-2``, ``patchpool``, ``linear``,
    ``conv-relu-linear``."""
    c, h, w = input_shape
    if name == "cnn-small":
        width = kw.get("width", (8, 16, 16))
        layers = []
        for ch in width:
            layers += [{"type": "conv", "out": ch, "k": 3, "stride": 1, "pad": 1},
                       {"type": "relu"}, {"type": "maxpool", "k": 2}]
        layers += [{"type": "flatten"}, {"type": "dense", "out": kw.get("hidden", 32)},
                   {"type": "relu"}, {"type": "dense", "out": classes}]
    elif name == "mlp-2":
        hidden = kw.get("hidden", (64, 32))
        layers = [{"type": "flatten"}]
        for n in hidden:
            layers += [{"type": "dense", "out": n}, {"type": "relu"}]
        layers += [{"type": "dense", "out": classes}]
    elif name == "patchpool":
        layers = [{"type": "patch_pool", "patch": kw.get("patch", 5),
                   "phi": list(kw.get("phi", (32, 32))), "rho": list(kw.get("rho", (32,)))},
                  {"type": "dense", "out": classes}]
    elif name == "linear":
        layers = [{"type": "flatten"}, {"type": "dense", "out": classes}]
    elif name == "conv-relu-linear":
        layers = [{"type": "conv", "out": kw.get("channels", 4), "k": 3, "stride": 1, "pad": 1},
                  {"type": "relu"}, {"type": "flatten"}, {"type": "dense", "out": classes}]
    else:
        raise SpecError(f"unknown reference architecture {name!r}")
    return ModelSpec(layers=layers, input_shape=tuple(input_shape), classes=classes)


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _infer(spec: ModelSpec, rng: Optional[np.random.Generator]):
    """Walk the layers, checking shapes; optionally draw initial parameters."""
    if spec.classes < 2:
        raise SpecError("a classifier needs at least 2 classes")
    if not spec.layers:
        raise SpecError("model has no layers")
    params = {}

    def new(name, shape, fan_in):
        if rng is not None:
            params[name + ".weight"] = _kaiming(rng, shape, fan_in)
            params[name + ".bias"] = np.zeros(shape[0])

    shape = tuple(spec.input_shape)
    if len(shape) != 3:
        raise SpecError(f"input_shape must be (C, H, W), got {shape}")
    for i, layer in enumerate(spec.layers, 1):
        kind = layer.get("type")
        if kind not in LAYER_TYPES:
            raise SpecError(f"layer {i}: unknown type {kind!r}")
        if kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: conv needs a spatial input, got {shape}")
            k, s, p = layer["k"], layer.get("stride", 1), layer.get("pad", 0)
            c, h, w = shape
            ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if ho < 1 or wo < 1:
                raise SpecError(f"layer {i}: kernel {k} does not fit {shape}")
            new(str(i), (layer["out"], c, k, k), c * k * k)
            shape = (layer["out"], ho, wo)
        elif kind in ("maxpool", "avgpool"):
            if len(shape) != 3 or shape[1] < layer["k"] or shape[2] < layer["k"]:
                raise SpecError(f"layer {i}: pooling window {layer['k']} does not fit {shape}")
            k, s = layer["k"], layer.get("stride", layer["k"])
            shape = (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"layer {i}: dense before flatten (input {shape})")
            new(str(i), (layer["out"], shape[0]), shape[0])
            shape = (layer["out"],)
        elif kind == "patch_pool":
            if len(shape) != 3:
                raise SpecError(f"layer {i}: patch_pool needs a spatial input, got {shape}")
            c, h, w = shape
            ps = layer["patch"]
            if h % ps or w % ps:
                raise SpecError(f"layer {i}: {h}×{w} input not divisible by patch size {ps}")
            d = c * ps * ps
            for j, n in enumerate(layer["phi"]):
                new(f"{i}.phi{j}", (n, d), d)
                d = n
            for j, n in enumerate(layer.get("rho", [])):
                new(f"{i}.rho{j}", (n, d), d)
                d = n
            shape = (d,)
    if shape != (spec.classes,):
        raise SpecError(f"final layer emits {shape}, expected ({spec.classes},) logits")
    spec.probe_layers()
    return params


def validate_spec(spec: ModelSpec) -> None:
    _infer(spec, None)


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.dtype(np.float32)

    @property
    def n_probes(self) -> int:
        return len(self.spec.probe_layers())

    def astype(self, dtype) -> "TrainedModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return TrainedModel(self.spec, params, dict(self.meta))

    def copy(self) -> "TrainedModel":
        return self.astype(self.dtype)

    def _run(self, x: Tensor, stop: Optional[int], probes: Optional[set]):
        embeddings = {}
        for i, layer in enumerate(self.spec.layers, 1):
            x = self._layer(i, layer, x)
            if probes is not None and i in probes:
                embeddings[i] = x
            if stop is not None and i == stop:
                break
        return x, embeddings

    def _layer(self, i: int, layer: dict, x: Tensor) -> Tensor:
        kind = layer["type"]
        p = self.params
        if kind == "conv":
            return ad.conv2d(x, p[f"{i}.weight"], p[f"{i}.bias"],
                             stride=layer.get("stride", 1), pad=layer.get("pad", 0))
        if kind == "relu":
            return ad.relu(x)
        if kind == "maxpool":
            return ad.max_pool2d(x, layer["k"], layer.get("stride"))
        if kind == "avgpool":
            return ad.avg_pool2d(x, layer["k"], layer.get("stride"))
        if kind == "flatten":
            return ad.flatten(x)
        if kind == "dense":
            return ad.dense(x, p[f"{i}.weight"], p[f"{i}.bias"])
        if kind == "patch_pool":
            return self._patch_pool(i, layer, x)
        raise SpecError(f"unknown layer type {kind!r}")

    def _patch_pool(self, i: int, layer: dict, x: Tensor) -> Tensor:
        # patches are summed in ascending grid index, so permuting patch
        # contents only permutes the summands
        h = ad.patchify(x, layer["patch"])
        for j in range(len(layer["phi"])):
            h = ad.relu(ad.dense(h, self.params[f"{i}.phi{j}.weight"], self.params[f"{i}.phi{j}.bias"]))
        h = ad.sum_reduce(h, axis=1)
        for j in range(len(layer.get("rho", []))):
            h = ad.relu(ad.dense(h, self.params[f"{i}.rho{j}.weight"], self.params[f"{i}.rho{j}.bias"]))
        return h

    def _check_input(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ad.ShapeError(f"model expects N×{tuple(self.spec.input_shape)}, got {x.shape}")
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        return x

    def forward(self, batch, upto: Optional[int] = None) -> Tensor:
        """Logits, or the output of layer ``upto`` (1-based) when given."""
        out, _ = self._run(self._check_input(batch), upto, None)
        return out

    def forward_with_probes(self, batch):
        """Return ``(logits, {probe index (1-based): embedding})``."""
        layers = self.spec.probe_layers()
        logits, emb = self._run(self._check_input(batch), None, set(layers))
        return logits, {k: emb[layer] for k, layer in enumerate(layers, 1)}

    def predict_logits(self, images: np.ndarray, batch: int = 512) -> np.ndarray:
        out = [self.forward(images[i:i + batch]).data for i in range(0, len(images), batch)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.classes))


def patch_pool_forward(model: TrainedModel, batch) -> Tensor:
    if not any(layer["type"] == "patch_pool" for layer in model.spec.layers):
        raise SpecError("model has no patch_pool layer")
    return model.forward(batch)


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> TrainedModel:
    """Initialize parameters (Kaiming-uniform weights, zero biases) from ``seed``."""
    rng = np.random.default_rng(seed)
    raw = _infer(spec, rng)
    params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()}
    return TrainedModel(spec, params, {"seed": seed, "epochs": 0})
