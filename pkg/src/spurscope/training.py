"""Minibatch training and evaluation for :class:`~spurscope.models.TrainedModel`."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .datagen import LabeledDataset
from .models import TrainedModel
from .optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    patience: Optional[int] = None  # early stopping on validation loss

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch": self.batch, "optimizer": self.optimizer,
                "lr": self.lr, "seed": self.seed, "patience": self.patience}


@dataclass
class TrainResult:
    model: TrainedModel
    state: OptimizerState
    history: list = field(default_factory=list)
    stopped_epoch: Optional[int] = None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    # keyed on (seed, epoch) so a resumed run draws the same order
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_step(model: TrainedModel, state: OptimizerState, x: np.ndarray, y: np.ndarray) -> float:
    with ad.Tape() as tape:
        loss = ad.cross_entropy(model.forward(x), y)
    grads = tape.backward(loss)
    optimizer_step(state, model.params, grads)
    return float(loss.data)


def evaluate(model: TrainedModel, ds: LabeledDataset, batch: int = 512) -> dict:
    logits = model.predict_logits(ds.images, batch)
    if len(ds) == 0:
        return {"loss": float("nan"), "accuracy": float("nan")}
    nll = ad.neg_log2_likelihood(logits, ds.labels) * np.log(2.0)
    acc = float((logits.argmax(axis=1) == ds.labels).mean())
    return {"loss": float(nll.mean()), "accuracy": acc}


def accuracy(model: TrainedModel, ds: LabeledDataset) -> float:
    return evaluate(model, ds)["accuracy"]


def train(model: TrainedModel, ds: LabeledDataset, cfg: TrainConfig,
          val: Optional[LabeledDataset] = None, state: Optional[OptimizerState] = None,
          on_epoch: Optional[Callable[[int, TrainedModel], None]] = None,
          start_epoch: int = 0) -> TrainResult:
    """Train in place for epochs ``start_epoch+1 .. cfg.epochs``.

    ``on_epoch(epoch, model)`` runs after each epoch (and once for epoch 0
    when starting fresh). With ``cfg.patience`` set, training stops after
    that many epochs without validation-loss improvement and the best
    parameters are restored.
    """
    if state is None:
        state = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    if on_epoch is not None and start_epoch == 0:
        on_epoch(0, model)
    result = TrainResult(model, state)
    best_loss, best_params, bad = np.inf, None, 0
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = epoch_order(len(ds), cfg.seed, epoch)
        losses = []
        for i in range(0, len(order), cfg.batch):
            idx = np.sort(order[i:i + cfg.batch])
            losses.append(train_step(model, state, ds.images[idx], ds.labels[idx]))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val is not None:
            row.update({f"val_{k}": v for k, v in evaluate(model, val).items()})
        result.history.append(row)
        log.debug("epoch %d: %s", epoch, row)
        model.meta["epochs"] = epoch
        if on_epoch is not None:
            on_epoch(epoch, model)
        if cfg.patience is not None and val is not None:
            if row["val_loss"] < best_loss:
                best_loss, bad = row["val_loss"], 0
                best_params = {k: v.data.copy() for k, v in model.params.items()}
            else:
                bad += 1
                if bad >= cfg.patience:
                    result.stopped_epoch = epoch
                    break
    if best_params is not None and result.stopped_epoch is not None:
        for k, v in best_params.items():
            model.params[k].data = v
    return result
