"""Central finite-difference checks of analytic gradients (64-bit)."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .models import TrainedModel


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float,
                 entries: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place and restored)."""
    out = np.zeros_like(arr)
    for i in (entries if entries is not None else np.ndindex(arr.shape)):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def check_op(fn: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
             seed: int = 0) -> list:
    """Relative error per input of ``sum(fn(*inputs) * R)`` for a fixed random ``R``."""
    tensors = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    probe = None

    def loss_value():
        return float((fn(*[ad.Tensor(t.data) for t in tensors]).data * probe).sum())

    with ad.Tape() as tape:
        out = fn(*tensors)
        probe = np.random.default_rng(seed).normal(size=out.shape)
        loss = ad.sum_reduce(ad.mul(out, ad.Tensor(probe)))
    tape.backward(loss)
    errs = []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errs.append(rel_error(analytic, numeric_grad(loss_value, t.data, h)))
    return errs


def finite_diff_gradcheck(model: TrainedModel, batch, h: float = 1e-5, tolerance: float = 1e-5,
                          loss: Optional[Callable] = None, max_entries: Optional[int] = None,
                          seed: int = 0) -> dict:
    """Compare analytic and central-difference parameter gradients per block.

    ``batch`` is ``(images, labels)``; ``loss(logits, labels)`` defaults to
    cross-entropy. With ``max_entries`` only a seeded sample of entries per
    block is perturbed. Returns ``{name: {"rel_error", "passed"}}``.
    """
    images, labels = batch
    m64 = model.astype(np.float64)
    x = np.asarray(images, dtype=np.float64)
    loss = loss or ad.cross_entropy

    def value() -> float:
        return float(loss(m64.forward(x), labels).data)

    with ad.Tape() as tape:
        out = loss(m64.forward(x), labels)
    grads = tape.backward(out) if m64.params else {}
    rng = np.random.default_rng(seed)
    report = {}
    for name in sorted(m64.params):
        p = m64.params[name].data
        entries = list(np.ndindex(p.shape))
        if max_entries is not None and len(entries) > max_entries:
            entries = [entries[i] for i in sorted(rng.choice(len(entries), max_entries, replace=False))]
        analytic = grads.get(name, np.zeros_like(p))
        numeric = numeric_grad(value, p, h, entries)
        idx = tuple(np.array(entries).T)
        err = rel_error(analytic[idx], numeric[idx])
        report[name] = {"rel_error": err, "passed": bool(err < tolerance)}
    return report
