"""Usable-information estimates and their relation to prediction depth.

All quantities are in bits. ``g`` is a model of the diagnosed family
trained on null (all-zero) inputs, so it can only learn the label marginal;
``g'`` is the same family trained on real inputs. Pointwise information is

    pvi(x -> y) = -log2 g[null](y) + log2 g'[x](y)

and its mean over a held-out set equals H_V(Y) - H_V(Y|X).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .datagen import LabeledDataset
from .models import ModelSpec, TrainedModel, build_model
from .optim import OptimizerState, optimizer_step
from .probes import UNDEFINED, ProbeSet, embed, knn_votes, l1_distances

LOG2_PMIN = -30.0  # probabilities are clamped at 2**-30


@dataclass
class PviRecord:
    pvi: np.ndarray              # bits per sample
    neg_log2_gprime: np.ndarray  # -log2 g'[x](y) per sample
    h_y: float                   # H_V(Y)
    h_y_given_x: float           # H_V(Y|X)
    clamp_count: int = 0
    sample_ids: Optional[np.ndarray] = None

    @property
    def v_information(self) -> float:
        return self.h_y - self.h_y_given_x

    def summary(self) -> dict:
        return {"h_y_bits": self.h_y, "h_y_given_x_bits": self.h_y_given_x,
                "neg_h_y_given_x_bits": -self.h_y_given_x,
                "v_information_bits": self.v_information, "mean_pvi_bits": float(self.pvi.mean()),
                "clamp_count": self.clamp_count, "samples": int(len(self.pvi))}


def log2_likelihood(logits: np.ndarray, labels) -> tuple:
    """Clamped ``log2 softmax(logits)[label]`` and the number of clamped entries."""
    lp = -ad.neg_log2_likelihood(logits, labels)
    clamped = lp < LOG2_PMIN
    return np.maximum(lp, LOG2_PMIN), int(clamped.sum())


def null_input(shape, n: int = 1, dtype=np.float32) -> np.ndarray:
    return np.zeros((n, *shape), dtype=dtype)


def train_null_model(labels, spec: ModelSpec, seed: int = 0, steps: int = 300,
                     lr: float = 0.05) -> TrainedModel:
    """Fit the family on (null input, label) pairs by full-batch Adam.

    Every input is the same all-zero tensor, so the forward pass runs once
    per step and its logits are broadcast over the label vector.
    """
    labels = np.asarray(labels).astype(np.int64)
    g = build_model(spec, seed)
    state = OptimizerState(kind="adam", lr=lr)
    phi = null_input(spec.input_shape, dtype=g.dtype)
    spread = ad.Tensor(np.zeros((len(labels), spec.classes), dtype=g.dtype))
    for _ in range(steps):
        with ad.Tape() as tape:
            loss = ad.cross_entropy(ad.add(g.forward(phi), spread), labels)
        optimizer_step(state, g.params, tape.backward(loss))
    g.meta.update({"null_model": True, "steps": steps})
    return g


def marginal_entropy(g: TrainedModel, labels) -> tuple:
    """H_V(Y) estimate: mean ``-log2 g[null](y)``; returns (bits, per-sample, clamps)."""
    labels = np.asarray(labels)
    logits = np.repeat(g.forward(null_input(g.spec.input_shape, dtype=g.dtype)).data, len(labels), axis=0)
    lp, clamps = log2_likelihood(logits, labels)
    return float(-lp.mean()) if len(lp) else 0.0, -lp, clamps


def conditional_v_entropy(gprime: TrainedModel, ds: LabeledDataset) -> tuple:
    """H_V(Y|X) on ``ds``: mean ``-log2 g'[x](y)``; returns (bits, per-sample, clamps)."""
    lp, clamps = log2_likelihood(gprime.predict_logits(ds.images), ds.labels)
    return float(-lp.mean()) if len(lp) else 0.0, -lp, clamps


def pvi(g: TrainedModel, gprime: TrainedModel, x: np.ndarray, y) -> float:
    """Pointwise usable information of one sample ``x`` (C×H×W) with label ``y``."""
    _, null_terms, _ = marginal_entropy(g, [y])
    lp, _ = log2_likelihood(gprime.forward(np.asarray(x, dtype=gprime.dtype)[None]).data, [y])
    return float(null_terms[0] + lp[0])


def pvi_second_term(gprime: TrainedModel, x: np.ndarray, y) -> float:
    """Only the input-dependent term ``log2 g'[x](y)``."""
    lp, _ = log2_likelihood(gprime.forward(np.asarray(x, dtype=gprime.dtype)[None]).data, [y])
    return float(lp[0])


def pvi_dataset(g: TrainedModel, gprime: TrainedModel, ds: LabeledDataset) -> PviRecord:
    h_y, null_terms, c1 = marginal_entropy(g, ds.labels)
    h_yx, cond_terms, c2 = conditional_v_entropy(gprime, ds)
    return PviRecord(null_terms - cond_terms, cond_terms, h_y, h_yx, c1 + c2, np.arange(len(ds)))


@dataclass
class BinnedCorrelation:
    bins: list          # (first pd, last pd, count, mean conditional entropy)
    skipped: list       # (first pd, last pd) of empty bins
    spearman: float
    undefined_excluded: int

    def to_json(self) -> dict:
        return {"bins": [{"pd_from": a, "pd_to": b, "count": c, "mean_entropy_bits": m}
                         for a, b, c, m in self.bins],
                "skipped": [{"pd_from": a, "pd_to": b} for a, b in self.skipped],
                "spearman": self.spearman, "undefined_excluded": self.undefined_excluded}


def pd_pvi_binned_correlation(pd, entropy, bin_width: int = 4,
                              n_probes: Optional[int] = None) -> BinnedCorrelation:
    """Group depths into bins of ``bin_width`` and correlate bin order with mean entropy.

    ``entropy`` is the per-sample conditional V-entropy ``-log2 g'[x](y)``
    aligned with ``pd``. Undefined depths are excluded; empty bins are
    skipped and listed.
    """
    pd = np.asarray(pd)
    entropy = np.asarray(entropy, dtype=np.float64)
    if pd.shape != entropy.shape:
        raise ValueError("pd and entropy records are not aligned")
    ok = pd != UNDEFINED
    n = int(n_probes if n_probes is not None else (pd[ok].max() if ok.any() else 0))
    bins, skipped = [], []
    for lo in range(1, n + 1, bin_width):
        hi = min(lo + bin_width - 1, n)
        sel = ok & (pd >= lo) & (pd <= hi)
        if sel.any():
            bins.append((lo, hi, int(sel.sum()), float(entropy[sel].mean())))
        else:
            skipped.append((lo, hi))
    if len(bins) >= 2:
        means = [b[3] for b in bins]
        rho = float(stats.spearmanr(np.arange(len(bins)), means).statistic)
    else:
        rho = float("nan")
    return BinnedCorrelation(bins, skipped, rho, int((~ok).sum()))


def knn_v_information(probe_set: ProbeSet, model: TrainedModel, ds: LabeledDataset,
                      h_y: Optional[float] = None) -> np.ndarray:
    """Per-probe usable information of a k-NN readout, in bits.

    The k-NN likelihood of the true label is its Laplace-smoothed vote share
    ``(votes + 1) / (k + C)``. ``h_y`` defaults to the empirical label entropy.
    """
    if h_y is None:
        p = np.bincount(ds.labels, minlength=ds.classes) / len(ds)
        h_y = float(-(p[p > 0] * np.log2(p[p > 0])).sum())
    out = []
    rows = np.arange(len(ds))
    for bank, e in zip(probe_set.banks, embed(model, ds.images, max_spatial=probe_set.max_spatial)):
        votes = knn_votes(l1_distances(e, bank), probe_set.labels, probe_set.k, probe_set.classes)
        share = (votes[rows, ds.labels.astype(np.int64)] + 1) / (probe_set.k + probe_set.classes)
        out.append(h_y + float(np.log2(share).mean()))
    return np.asarray(out)


# -- separation check -----------------------------------------------------------------

@dataclass
class DatasetMetrics:
    pd: np.ndarray
    v_information: float
    neg_h_y_given_x: float
    knn_v_information: Optional[np.ndarray] = None

    @property
    def mean_pd(self) -> float:
        d = self.pd[self.pd != UNDEFINED]
        return float(d.mean()) if len(d) else float("nan")


@dataclass
class Prop1Report:
    mean_pd_s: float
    mean_pd_i: float
    psi: float
    L: int
    K: int
    N: int
    frac_s_shallow: float
    frac_i_deep: float
    separation_satisfied: bool
    bound: float
    assumption4_satisfied: bool
    neg_h_s: float
    neg_h_i: float
    v_info_s: float
    v_info_i: float
    pd_gap: bool
    info_ordering: bool
    tau_hat: Optional[float] = None
    eps_hat: Optional[float] = None
    notes: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "holds" if self.pd_gap and self.info_ordering else "gap insufficient"

    def to_json(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["verdict"] = self.verdict
        return d


def assumption4_bound(n_layers: int, psi: float, marginals) -> float:
    """``N - psi * max_y(-ln p(y))``; depths below it satisfy the separation bound."""
    p = np.asarray(marginals, dtype=np.float64)
    p = p[p > 0]
    return n_layers - psi * float(np.max(-np.log(p)))


def min_separation_psi(pd_s, pd_i, n_probes: int) -> tuple:
    """Smallest psi (with its L = K) such that 1-psi of D_s has pd <= L and
    1-psi of D_i has pd > K. Undefined depths satisfy neither side."""
    pd_s, pd_i = np.asarray(pd_s), np.asarray(pd_i)
    best = (1.0, 1)
    for t in range(1, n_probes):
        shallow = np.mean((pd_s != UNDEFINED) & (pd_s <= t))
        deep = np.mean((pd_i != UNDEFINED) & (pd_i > t))
        need = max(1 - shallow, 1 - deep)
        if need < best[0]:
            best = (float(need), t)
    return best


def prop1_gap_check(ds_metrics: DatasetMetrics, di_metrics: DatasetMetrics, psi: float,
                    L: int, K: int, n_probes: int, marginals: Sequence[float]) -> Prop1Report:
    """Check the depth-separation preconditions and the information ordering.

    Depth separation holds when ``L <= K``, ``psi`` in (0, 0.5), at least
    ``1-psi`` of D_s has pd <= L and at least ``1-psi`` of D_i has pd > K.
    The bound ``L < N - psi·max_y(-ln p(y))`` is evaluated separately.
    """
    if n_probes < 3:
        raise ValueError("the check needs at least 3 probes")
    pd_s, pd_i = np.asarray(ds_metrics.pd), np.asarray(di_metrics.pd)
    shallow = float(np.mean((pd_s != UNDEFINED) & (pd_s <= L))) if len(pd_s) else 0.0
    deep = float(np.mean((pd_i != UNDEFINED) & (pd_i > K))) if len(pd_i) else 0.0
    sep = 0 < psi < 0.5 and L <= K and shallow >= 1 - psi and deep >= 1 - psi
    bound = assumption4_bound(n_probes, psi, marginals)
    tau = eps = None
    notes = []
    if ds_metrics.knn_v_information is not None and di_metrics.knn_v_information is not None:
        inc = np.concatenate([np.diff(ds_metrics.knn_v_information), np.diff(di_metrics.knn_v_information)])
        if len(inc):
            tau, eps = float(inc.min()), float(inc.max())
            notes.append("tau_hat/eps_hat are observed k-NN information increments (diagnostic only)")
    ms, mi = ds_metrics.mean_pd, di_metrics.mean_pd
    return Prop1Report(
        mean_pd_s=ms, mean_pd_i=mi, psi=psi, L=L, K=K, N=n_probes,
        frac_s_shallow=shallow, frac_i_deep=deep, separation_satisfied=bool(sep),
        bound=bound, assumption4_satisfied=bool(L <= K and L < bound),
        neg_h_s=ds_metrics.neg_h_y_given_x, neg_h_i=di_metrics.neg_h_y_given_x,
        v_info_s=ds_metrics.v_information, v_info_i=di_metrics.v_information,
        pd_gap=bool(not math.isnan(ms) and not math.isnan(mi) and ms < mi),
        info_ordering=bool(ds_metrics.v_information > di_metrics.v_information),
        tau_hat=tau, eps_hat=eps, notes=notes)
