"""k-NN layer probes and Prediction Depth.

For every probe point of a model, a bank of reference embeddings is built
from a class-stratified sample of training images. A query's embedding is
classified by its ``k`` nearest bank entries under the L1 distance. The
prediction depth of a sample is the first probe from which every deeper
probe predicts the final probe's class with a valid (not near-chance)
vote; it is undefined when any of the last three probes is near chance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .datagen import LabeledDataset
from .models import TrainedModel
from .training import TrainConfig, train

UNDEFINED = -1
MAX_SPATIAL = 8


def downsample(emb: np.ndarray, max_spatial: int = MAX_SPATIAL) -> np.ndarray:
    """Average-pool spatial maps to at most ``max_spatial`` per side, then flatten."""
    if emb.ndim == 4:
        _, _, h, w = emb.shape
        if h > max_spatial or w > max_spatial:
            emb = ad.adaptive_avg_pool2d(ad.Tensor(emb), min(h, max_spatial), min(w, max_spatial)).data
    return emb.reshape(len(emb), -1)


def embed(model: TrainedModel, images: np.ndarray, batch: int = 256,
          max_spatial: int = MAX_SPATIAL) -> list:
    """Downsampled, flattened embeddings at every probe: a list of ``(n, d_i)`` arrays."""
    chunks = None
    for i in range(0, len(images), batch):
        _, emb = model.forward_with_probes(images[i:i + batch])
        flat = [downsample(emb[p].data, max_spatial) for p in sorted(emb)]
        if chunks is None:
            chunks = [[] for _ in flat]
        for c, f in zip(chunks, flat):
            c.append(f)
    if chunks is None:
        return []
    return [np.concatenate(c, axis=0) for c in chunks]


@dataclass
class ProbeSet:
    banks: list            # per probe: (M, d_i) reference embeddings
    labels: np.ndarray     # (M,) reference labels, shared by all probes
    ref_index: np.ndarray  # (M,) indices of the reference samples in the source dataset
    k: int = 29
    delta: float = 0.1
    classes: int = 2
    metric: str = "l1"
    max_spatial: int = MAX_SPATIAL

    def __post_init__(self):
        m = len(self.labels)
        if self.k % 2 == 0 or not 1 <= self.k <= m:
            raise ValueError(f"k must be odd and at most M={m}, got {self.k}")
        if not 0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")
        if any(len(b) != m for b in self.banks):
            raise ValueError("every probe bank must hold the same reference samples")

    @property
    def n_probes(self) -> int:
        return len(self.banks)


def stratified_sample(labels: np.ndarray, m: int, classes: int, seed: int) -> np.ndarray:
    """``m`` indices whose per-class counts differ by at most one (when classes allow)."""
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(classes)]
    take = [0] * classes
    remaining = m
    active = [c for c in range(classes) if len(pools[c])]
    while remaining > 0 and active:
        share, extra = divmod(remaining, len(active))
        for j, c in enumerate(list(active)):
            want = share + (1 if j < extra else 0)
            got = min(want, len(pools[c]) - take[c])
            take[c] += got
            remaining -= got
        active = [c for c in active if take[c] < len(pools[c])]
    return np.sort(np.concatenate([pools[c][:take[c]] for c in range(classes)]))


def build_probe_set(model: TrainedModel, ds: LabeledDataset, m: int = 500, k: int = 29,
                    delta: float = 0.1, seed: int = 0, max_spatial: int = MAX_SPATIAL) -> ProbeSet:
    if m > len(ds):
        raise ValueError(f"M={m} exceeds the dataset size {len(ds)}")
    if m < k:
        raise ValueError(f"M={m} is smaller than k={k}")
    idx = stratified_sample(ds.labels, m, ds.classes, seed)
    banks = embed(model, ds.images[idx], max_spatial=max_spatial)
    return ProbeSet(banks, ds.labels[idx].astype(np.int64), idx, k, delta, ds.classes,
                    max_spatial=max_spatial)


def l1_distances(queries: np.ndarray, bank: np.ndarray) -> np.ndarray:
    return cdist(np.asarray(queries, dtype=np.float64), np.asarray(bank, dtype=np.float64), "cityblock")


def knn_votes(dist: np.ndarray, labels: np.ndarray, k: int, classes: int) -> np.ndarray:
    """Per-query class vote counts among the ``k`` nearest (ties: lower index first)."""
    nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(dist), classes), dtype=np.int64)
    np.add.at(votes, (np.arange(len(dist))[:, None], labels[nn]), 1)
    return votes


def vote_validity(votes: np.ndarray, k: int, delta: float) -> tuple:
    """``(predicted class, top vote fraction, valid)`` from vote counts.

    Binary: valid iff the positive-class share is at least ``delta`` away
    from 0.5. Multiclass: valid iff the top share is at least 1/C + delta.
    """
    classes = votes.shape[1]
    pred = votes.argmax(axis=1)  # lowest class id wins equal counts
    frac = votes[np.arange(len(votes)), pred] / k
    tol = 1e-9
    if classes == 2:
        valid = np.abs(votes[:, 1] / k - 0.5) >= delta - tol
    else:
        valid = frac >= 1.0 / classes + delta - tol
    return pred, frac, valid


def knn_predict(probe_set: ProbeSet, probe: int, query) -> tuple:
    """Classify query embedding(s) at 1-based ``probe``.

    ``query`` is one flattened embedding ``(d,)`` or a batch ``(n, d)``;
    returns ``(class, fraction, valid)`` scalars or arrays accordingly.
    """
    bank = probe_set.banks[probe - 1]
    q = np.asarray(query)
    single = q.ndim == 1
    q = q.reshape(1, -1) if single else q.reshape(len(q), -1)
    if q.shape[1] != bank.shape[1]:
        raise ValueError(f"query dimension {q.shape[1]} does not match probe {probe} bank ({bank.shape[1]})")
    votes = knn_votes(l1_distances(q, bank), probe_set.labels, probe_set.k, probe_set.classes)
    pred, frac, valid = vote_validity(votes, probe_set.k, probe_set.delta)
    if single:
        return int(pred[0]), float(frac[0]), bool(valid[0])
    return pred, frac, valid


def prediction_depth(classes: Sequence[int], valid: Sequence[bool]) -> int:
    """Earliest 1-based probe from which all deeper probes agree with the final one.

    Returns :data:`UNDEFINED` if any of the last three probes is invalid.
    Invalid probes before that count as disagreement.
    """
    n = len(classes)
    if n < 3:
        raise ValueError("prediction depth needs at least 3 probes")
    if not all(valid[-3:]):
        return UNDEFINED
    final = classes[-1]
    pd = n
    for p in range(n - 1, -1, -1):
        if valid[p] and classes[p] == final:
            pd = p + 1
        else:
            break
    return pd


@dataclass
class PdTrace:
    """Per-sample probe outputs (arrays of shape ``(n, N)``) and resulting depths."""

    pred: np.ndarray
    frac: np.ndarray
    valid: np.ndarray
    pd: np.ndarray
    sample_ids: np.ndarray

    @property
    def n_probes(self) -> int:
        return self.pred.shape[1]

    def record(self, i: int) -> dict:
        return {"sample_id": int(self.sample_ids[i]), "pred": self.pred[i].tolist(),
                "frac": self.frac[i].tolist(), "valid": self.valid[i].tolist(), "pd": int(self.pd[i])}


@dataclass
class PdHistogram:
    counts: np.ndarray        # counts[p-1] = samples with pd == p
    undefined: int
    total: int

    @property
    def n_probes(self) -> int:
        return len(self.counts)

    @property
    def defined(self) -> int:
        return int(self.counts.sum())

    @property
    def mean_pd(self) -> float:
        if self.defined == 0:
            return float("nan")
        return float((np.arange(1, self.n_probes + 1) * self.counts).sum() / self.defined)

    @classmethod
    def from_depths(cls, pd: np.ndarray, n_probes: int) -> "PdHistogram":
        pd = np.asarray(pd)
        counts = np.bincount(pd[pd != UNDEFINED] - 1, minlength=n_probes)[:n_probes].astype(np.int64)
        return cls(counts, int((pd == UNDEFINED).sum()), len(pd))

    def to_json(self) -> dict:
        return {"counts": {str(p): int(c) for p, c in enumerate(self.counts, 1)},
                "undefined": self.undefined, "mean_pd": self.mean_pd, "total": self.total}


def pd_trace(probe_set: ProbeSet, model: TrainedModel, ds: LabeledDataset,
             sample_ids: Optional[np.ndarray] = None) -> PdTrace:
    embs = embed(model, ds.images, max_spatial=probe_set.max_spatial)
    n = len(ds)
    shape = (n, probe_set.n_probes)
    pred = np.zeros(shape, dtype=np.int64)
    frac = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    for p, e in enumerate(embs, 1):
        pred[:, p - 1], frac[:, p - 1], valid[:, p - 1] = knn_predict(probe_set, p, e)
    pd = np.array([prediction_depth(pred[i], valid[i]) for i in range(n)], dtype=np.int64)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    return PdTrace(pred, frac, valid, pd, ids)


def pd_histogram(model: TrainedModel, probe_set: ProbeSet, ds: LabeledDataset) -> PdHistogram:
    trace = pd_trace(probe_set, model, ds)
    return PdHistogram.from_depths(trace.pd, probe_set.n_probes)


def epoch_snapshot_series(model: TrainedModel, train_ds: LabeledDataset, eval_ds: LabeledDataset,
                          cfg: TrainConfig, snapshot_epochs: Sequence[int], m: int = 500,
                          k: int = 29, delta: float = 0.1, probe_seed: int = 0):
    """Train ``model`` and take a PD histogram at each snapshot epoch.

    The probe bank is rebuilt from the current parameters at every
    snapshot. Epoch 0 (the untrained model) is allowed. Returns
    ``(histograms, train_result)``; histograms follow ``snapshot_epochs``.
    """
    wanted = sorted(set(int(e) for e in snapshot_epochs))
    if wanted and wanted[-1] > cfg.epochs:
        raise ValueError(f"snapshot epoch {wanted[-1]} exceeds training epochs {cfg.epochs}")
    found = {}

    def snap(epoch, mdl):
        if epoch in wanted:
            ps = build_probe_set(mdl, train_ds, m, k, delta, probe_seed)
            found[epoch] = pd_histogram(mdl, ps, eval_ds)

    result = train(model, train_ds, cfg, on_epoch=snap)
    return [found[int(e)] for e in snapshot_epochs], result


@dataclass
class PeakVerdict:
    suspicious: bool
    early_mass: float
    early_probes: int
    mean_pd: float
    mu_ref: Optional[float]
    peak_probes: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return "suspicious" if self.suspicious else "clean"

    def to_json(self) -> dict:
        return {"verdict": self.label, "early_mass": self.early_mass, "early_probes": self.early_probes,
                "mean_pd": self.mean_pd, "mu_ref": self.mu_ref, "peak_probes": self.peak_probes}


def early_peak_detector(hist: PdHistogram, alpha: float = 0.25, mass: float = 0.5,
                        mu_ref: Optional[float] = None) -> PeakVerdict:
    """Flag histograms whose defined mass piles up in the first probes.

    Suspicious iff the share of defined samples in the first ``ceil(alpha·N)``
    probes is at least ``mass``, or the mean PD is below half of ``mu_ref``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    n = hist.n_probes
    early = math.ceil(alpha * n)
    defined = hist.defined
    share = float(hist.counts[:early].sum() / defined) if defined else 0.0
    mean_pd = hist.mean_pd
    low_mean = mu_ref is not None and defined > 0 and mean_pd < 0.5 * mu_ref
    shares = hist.counts / defined if defined else np.zeros(n)
    peaks = [p + 1 for p in range(n) if shares[p] >= 0.1
             and (p == 0 or hist.counts[p] >= hist.counts[p - 1])
             and (p == n - 1 or hist.counts[p] >= hist.counts[p + 1])]
    return PeakVerdict(share >= mass or low_mean, share, early, mean_pd, mu_ref, peaks)
