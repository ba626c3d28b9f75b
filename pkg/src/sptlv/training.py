"""Fold-wise training: Adam on MAE + tensor-normal prior, per-epoch
covariance re-estimation, plateau decay and best-on-validation retention."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import phantom
from .evaluate import FAMILIES, mae_metric
from .model import LVNet
from .objective import CovarianceSet, mae_loss, total_loss, update_covariances
from .phantom import CineSequence
from .tensor import AdamState, Graph, NumericError, adam_step, lr_plateau_decay

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 4e-4
    batch_subjects: int = 3
    lam: float = 1e-3
    seed: int = 0
    augment: bool = False
    cov_sweeps: int = 5
    patience: int = 5


@dataclass
class TrainResult:
    model: LVNet                       # best-on-validation parameters
    cov: CovarianceSet
    history: list = field(default_factory=list)
    best_epoch: int = 0


def _targets(subjects: Sequence[CineSequence]) -> np.ndarray:
    return np.stack([phantom.normalize(s.truth, s.spacing, s.shape) for s in subjects])


def family_mae(model: LVNet, subjects: Sequence[CineSequence]) -> dict:
    """Validation MAE per index family in physical units, plus the normalised MAE."""
    frames = np.stack([s.frames for s in subjects])
    preds = model.predict(frames)
    phys = np.stack([phantom.denormalize(p, s.spacing, s.shape) for p, s in zip(preds, subjects)])
    truth = np.stack([s.truth for s in subjects])
    mean, _ = mae_metric(phys, truth)
    out = {f: float(np.mean(mean[list(idx)])) for f, idx in FAMILIES.items()}
    out["loss"] = float(np.abs(preds - _targets(subjects)).sum(axis=-1).mean())
    return out


def train_step(model: LVNet, frames: np.ndarray, targets: np.ndarray, cov: CovarianceSet,
               state: AdamState, rng: np.random.Generator, lam: float) -> float:
    for p in model.params.values():
        p.grad = None
    with Graph() as g:
        pred = model.forward(frames, train=True, rng=rng)
        loss = total_loss(pred, targets, model.params["head.weight"], cov, lam)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    g.backward(loss)
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
    return value


def train(model: LVNet, train_set: Sequence[CineSequence], val_set: Sequence[CineSequence],
          cfg: TrainConfig, on_epoch: Optional[Callable[[dict], None]] = None,
          on_checkpoint: Optional[Callable[[LVNet, CovarianceSet, int], None]] = None) -> TrainResult:
    """Train ``model`` in place and return the best-on-validation copy.

    ``on_checkpoint`` is invoked whenever a new best model is found, which
    lets callers persist the last good state before a numeric failure.
    """
    rng = np.random.default_rng([cfg.seed, 101])
    state = AdamState(lr=cfg.lr)
    cov = CovarianceSet.identity(model.head_shape, lam=cfg.lam)
    targets = _targets(train_set)
    best = model.copy()
    best_cov = cov
    best_score = np.inf
    best_epoch = 0
    history: list = []
    val_history: list = []
    if val_set:
        init = family_mae(model, val_set)
        best_score = init["loss"]
        history.append({"epoch": 0, "train_loss": float("nan"), **{f"val_{k}": v for k, v in init.items()},
                        "lr": state.lr})
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for s in range(0, len(order), cfg.batch_subjects):
            idx = order[s:s + cfg.batch_subjects]
            batch = [train_set[i] for i in idx]
            if cfg.augment:
                batch = [phantom.augment(b, seed=int(rng.integers(2 ** 31))) for b in batch]
                tgt = _targets(batch)
            else:
                tgt = targets[idx]
            frames = np.stack([b.frames for b in batch])
            losses.append(train_step(model, frames, tgt, cov, state, rng, cfg.lam))
        if cfg.lam > 0:
            cov = update_covariances(model.params["head.weight"], n_sweeps=cfg.cov_sweeps, lam=cfg.lam)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_set:
            val = family_mae(model, val_set)
            row.update({f"val_{k}": v for k, v in val.items()})
            val_history.append(val["loss"])
            if val["loss"] < best_score:
                best_score, best_epoch = val["loss"], epoch
                best, best_cov = model.copy(), cov
                if on_checkpoint:
                    on_checkpoint(best, best_cov, epoch)
            lr_plateau_decay(state, val_history, patience=cfg.patience)
        else:
            best, best_cov, best_epoch = model.copy(), cov, epoch
        row["lr"] = state.lr
        history.append(row)
        logger.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if on_epoch:
            on_epoch(row)
    return TrainResult(best, best_cov, history, best_epoch)
