"""Probe-local saliency, ensemble-entropy difficulty and spurious-feature verdicts.

The soft-kNN head turns a binary k-NN probe into a differentiable score

    g(q) = sum_{j in N+} exp(-|q - x_j|_1 / s) / sum_{j in N} exp(-|q - x_j|_1 / s)

over the K nearest bank entries N (N+ the positive ones), with s the median
neighbor distance. Its gradient drives a Grad-CAM map at any spatial probe.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .datagen import LabeledDataset, intervene_randomize_spurious, mask_core_only, split
from .infometrics import pvi_dataset, train_null_model
from .models import ModelSpec, TrainedModel, build_model, reference_spec
from .probes import MAX_SPATIAL, ProbeSet, build_probe_set, pd_histogram
from .tensorio import save_tensor
from .training import TrainConfig, accuracy, train

log = logging.getLogger(__name__)

S_FLOOR = 1e-12


@dataclass
class SoftKnnHead:
    probe: int              # 1-based probe index
    bank: np.ndarray        # (M, d) downsampled reference embeddings
    labels: np.ndarray      # (M,) binary labels
    k: int = 101            # clipped to the bank size; see from_probe_set
    max_spatial: int = MAX_SPATIAL
    floored: int = 0        # how often s had to be floored

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("the soft-kNN head needs binary bank labels")
        if self.k < 1:
            raise ValueError(f"K must be positive, got {self.k}")
        self.k = min(self.k, len(self.bank))

    @classmethod
    def from_probe_set(cls, probe_set: ProbeSet, probe: int, k: int = 101) -> "SoftKnnHead":
        # a neighborhood as small as the probe's k is often single-class, which
        # makes the score constant and its gradient zero
        if not 1 <= probe <= probe_set.n_probes:
            raise ValueError(f"probe {probe} outside 1..{probe_set.n_probes}")
        return cls(probe, probe_set.banks[probe - 1], probe_set.labels,
                   k=min(k, len(probe_set.labels)), max_spatial=probe_set.max_spatial)


def _median_weights(k: int) -> np.ndarray:
    # d(median)/d(sorted distance): one middle entry, or two halves for even K
    w = np.zeros(k)
    if k % 2:
        w[k // 2] = 1.0
    else:
        w[k // 2 - 1] = w[k // 2] = 0.5
    return w


def soft_knn_score(head: SoftKnnHead, query: ad.Tensor) -> ad.Tensor:
    """Soft-kNN positive-class score for ``(B, d)`` (or ``(d,)``) embeddings.

    Neighbor selection is piecewise constant and not differentiated; the
    gradient flows through the kernel weights and the median scale.
    """
    q = query if isinstance(query, ad.Tensor) else ad.Tensor(np.asarray(query))
    single = q.ndim == 1
    qd = np.atleast_2d(q.data).astype(np.float64)
    if qd.shape[1] != head.bank.shape[1]:
        raise ad.ShapeError(f"query dim {qd.shape[1]} != bank dim {head.bank.shape[1]}")
    bank = head.bank.astype(np.float64)
    y = head.labels.astype(np.float64)
    mw = _median_weights(head.k)
    scores = np.empty(len(qd))
    cache = []
    for b, row in enumerate(qd):
        dist = np.abs(row - bank).sum(axis=1)
        nn = np.argsort(dist, kind="stable")[:head.k]
        d = dist[nn]  # ascending
        s = float(np.median(d))
        floored = s < S_FLOOR
        if floored:
            head.floored += 1
            log.warning("soft-kNN scale floored at %g", S_FLOOR)
            s = S_FLOOR
        w = np.exp(-(d - d[0]) / s)  # shift for stability; cancels in the ratio
        z = w.sum()
        score = float((w * y[nn]).sum() / z)
        scores[b] = score
        cache.append((nn, d, s, w, z, score, floored))

    def backward(g):
        g = np.atleast_1d(g).astype(np.float64)
        out = np.zeros_like(qd)
        for b, (nn, d, s, w, z, score, floored) in enumerate(cache):
            resid = (y[nn] - score) * w / z
            dd = -resid / s
            if not floored:
                dd = dd + mw * float((resid * d).sum()) / s ** 2
            out[b] = (dd[:, None] * np.sign(qd[b] - bank[nn])).sum(axis=0) * g[b]
        out = out[0] if single else out
        return [out.astype(q.dtype)]

    out = scores[0] if single else scores
    return ad.apply_op("soft_knn", [q], np.asarray(out, dtype=q.dtype), backward)


# -- saliency maps --------------------------------------------------------------------

@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]
    probe: int
    method: str

    def save(self, prefix) -> tuple:
        """Write ``prefix.dstf`` and ``prefix.csv`` (row,col,value)."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        tpath, cpath = prefix.with_suffix(".dstf"), prefix.with_suffix(".csv")
        save_tensor(tpath, self.values.astype(np.float32))
        with open(cpath, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["row", "col", "value"])
            for (r, c), v in np.ndenumerate(self.values):
                wr.writerow([r, c, f"{v:.6g}"])
        return tpath, cpath


def normalize_map(m: np.ndarray) -> np.ndarray:
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    top = m.max() if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def upsample_bilinear(m: np.ndarray, h: int, w: int) -> np.ndarray:
    if m.shape == (h, w):
        return m.astype(np.float64)
    return ndimage.zoom(m.astype(np.float64), (h / m.shape[0], w / m.shape[1]),
                        order=1, mode="nearest", grid_mode=True)


def _probe_output(model: TrainedModel, probe: int, x: ad.Tensor) -> ad.Tensor:
    layers = model.spec.probe_layers()
    if not 1 <= probe <= len(layers):
        raise ValueError(f"probe {probe} outside 1..{len(layers)}")
    return model.forward(x, upto=layers[probe - 1])


def soft_knn_saliency(model: TrainedModel, head: SoftKnnHead, image: np.ndarray,
                      method: str = "gradcam-softknn") -> SaliencyMap:
    """Saliency of one ``C×H×W`` image for the soft-kNN score at ``head.probe``."""
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim == 3:
        image = image[None]
    h, w = image.shape[2:]
    if method == "gradcam-softknn":
        x = ad.Tensor(image)
        with ad.Tape() as tape:
            act = _probe_output(model, head.probe, x)
            if act.ndim != 4:
                raise ValueError(f"probe {head.probe} has no spatial dims; use method='input-grad'")
            score = ad.sum_reduce(soft_knn_score(head, ad.flatten(_pool(act, head.max_spatial))))
        if not score.requires_grad:
            cam = np.zeros((h, w))
        else:
            tape.backward(score)
            grad = act.grad if act.grad is not None else np.zeros_like(act.data)
            weights = grad[0].mean(axis=(1, 2))
            cam = np.maximum((weights[:, None, None] * act.data[0]).sum(axis=0), 0.0)
            cam = upsample_bilinear(cam, h, w)
        return SaliencyMap(normalize_map(cam), head.probe, method)
    if method == "input-grad":
        x = ad.Tensor(image, requires_grad=True)
        with ad.Tape() as tape:
            act = _probe_output(model, head.probe, x)
            feat = _pool(act, head.max_spatial)
            score = ad.sum_reduce(soft_knn_score(head, ad.flatten(feat) if feat.ndim > 2 else feat))
        tape.backward(score)
        sal = np.abs(x.grad[0]).sum(axis=0)
        return SaliencyMap(normalize_map(sal), head.probe, method)
    raise ValueError(f"unknown saliency method {method!r}")


def _pool(act: ad.Tensor, max_spatial: int) -> ad.Tensor:
    if act.ndim == 4:
        ah, aw = act.shape[2:]
        if ah > max_spatial or aw > max_spatial:
            return ad.adaptive_avg_pool2d(act, min(ah, max_spatial), min(aw, max_spatial))
    return act


def patch_saliency_ratio(sal: SaliencyMap, top: int, left: int, size: int) -> float:
    """Mean saliency inside a square patch divided by the mean outside it."""
    inside = np.zeros(sal.values.shape, dtype=bool)
    inside[top:top + size, left:left + size] = True
    inner, out = sal.values[inside].mean(), sal.values[~inside].mean()
    if out > 0:
        return float(inner / out)
    return float("inf") if inner > 0 else float("nan")


# -- ensemble entropy ------------------------------------------------------------------

def softmax_entropy(logits: np.ndarray) -> np.ndarray:
    """Per-row softmax entropy in nats."""
    lp = ad.log_softmax_np(np.asarray(logits, dtype=np.float64))
    return np.maximum(-(np.exp(lp) * lp).sum(axis=1), 0.0)


def ensemble_entropy(ds: LabeledDataset, count: int = 5, family: str = "linear", seed: int = 0,
                     cfg: Optional[TrainConfig] = None,
                     eval_ds: Optional[LabeledDataset] = None) -> tuple:
    """Mean softmax entropy (nats) over ``count`` independently initialized members.

    Returns ``(per-sample entropy, dataset mean)`` on ``eval_ds`` (default ``ds``).
    """
    if count < 2:
        raise ValueError("an ensemble needs at least 2 members")
    cfg = cfg or TrainConfig(epochs=5)
    eval_ds = eval_ds if eval_ds is not None else ds
    spec = reference_spec(family, tuple(ds.images.shape[1:]), ds.classes)
    total = np.zeros(len(eval_ds))
    for j in range(count):
        member = build_model(spec, seed * 1000 + j)
        train(member, ds, TrainConfig(**{**cfg.to_json(), "seed": seed * 1000 + j}))
        total += softmax_entropy(member.predict_logits(eval_ds.images))
    per = total / count
    return per, float(per.mean()) if len(per) else 0.0


# -- dominoes and verdicts ---------------------------------------------------------------

def core_only_accuracy(model: TrainedModel, test: LabeledDataset) -> tuple:
    """``(validation accuracy, core-only accuracy)`` on held-out dominoes."""
    return accuracy(model, test), accuracy(model, mask_core_only(test))


METRICS = ("accuracy", "mean-pd", "v-info")


@dataclass
class Verdict:
    metric: str
    psi_observational: list
    psi_interventional: list
    seeds: list
    family: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "harmful" if min(self.psi_interventional) > max(self.psi_observational) else "benign"

    def to_json(self) -> dict:
        return {"metric": self.metric, "family": self.family,
                "psi_observational": self.psi_observational,
                "psi_interventional": self.psi_interventional,
                "seeds": self.seeds, "verdict": self.verdict}


def difficulty(model: TrainedModel, train_ds: LabeledDataset, test_ds: LabeledDataset, metric: str,
               seed: int = 0, probe_m: int = 400, k: int = 29, delta: float = 0.1) -> float:
    """Held-out difficulty Ψ: higher means harder."""
    if metric == "accuracy":
        return 1.0 - accuracy(model, test_ds)
    if metric == "mean-pd":
        if model.n_probes < 3:
            raise ValueError(f"metric 'mean-pd' needs at least 3 probes, model has {model.n_probes}")
        ps = build_probe_set(model, train_ds, m=min(probe_m, len(train_ds)), k=k, delta=delta, seed=seed)
        return pd_histogram(model, ps, test_ds).mean_pd
    if metric == "v-info":
        g = train_null_model(train_ds.labels, model.spec, seed)
        return -pvi_dataset(g, model, test_ds).v_information
    raise ValueError(f"unknown difficulty metric {metric!r}; expected one of {METRICS}")


def harmfulness_verdict(family: Union[str, ModelSpec], ds: LabeledDataset, metric: str = "accuracy",
                        seeds: Sequence[int] = (0, 1, 2), cfg: Optional[TrainConfig] = None,
                        fractions=(0.75, 0.25), **probe_kw) -> Verdict:
    """Train ``family`` on ``ds`` and on its do(s)-intervened copy per seed.

    The spurious feature is harmful when every interventional difficulty
    exceeds every observational one.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown difficulty metric {metric!r}; expected one of {METRICS}")
    spec = family if isinstance(family, ModelSpec) else reference_spec(
        family, tuple(ds.images.shape[1:]), ds.classes)
    if metric == "mean-pd" and len(spec.probe_layers()) < 3:
        raise ValueError(f"metric 'mean-pd' needs at least 3 probes, model has {len(spec.probe_layers())}")
    cfg = cfg or TrainConfig()
    obs, intv = [], []
    for seed in seeds:
        run_cfg = TrainConfig(**{**cfg.to_json(), "seed": seed})
        for data, sink in ((ds, obs), (intervene_randomize_spurious(ds, seed), intv)):
            tr, te = split(data, fractions, seed)
            model = build_model(spec, seed)
            train(model, tr, run_cfg)
            sink.append(float(difficulty(model, tr, te, metric, seed, **probe_kw)))
    name = family if isinstance(family, str) else "custom"
    return Verdict(metric, obs, intv, list(seeds), name)
