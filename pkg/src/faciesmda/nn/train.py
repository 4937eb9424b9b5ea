"""Adam training loop for the VAE."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from ..geomodel import FaciesGrid, derive_seed, to_one_hot
from .layers import NumericalError
from .network import VaeNetwork, reconstruction_accuracy

__all__ = ["TrainConfig", "AdamState", "TrainHistory", "TrainingDiverged", "train", "read_history_csv",
           "validation_loss", "write_history_csv"]

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params, grads, cfg: TrainConfig):
        self.step += 1
        b1, b2 = cfg.beta1, cfg.beta2
        lr_t = cfg.learning_rate * np.sqrt(1.0 - b2**self.step) / (1.0 - b1**self.step)
        for name in sorted(params):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= lr_t * m / (np.sqrt(v) + cfg.adam_eps)


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss, self.val_accuracy))


def _codes(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset
    return np.stack([g.codes if isinstance(g, FaciesGrid) else np.asarray(g) for g in dataset])


def validation_loss(net: VaeNetwork, codes: np.ndarray, kl_weight: float, batch_size=256) -> float:
    """Eval-mode loss with z at the encoder mean (no sampling, no dropout)."""
    k = net.input_shape[0]
    total = 0.0
    for start in range(0, len(codes), batch_size):
        x = to_one_hot(codes[start:start + batch_size], k)
        loss, _ = net.loss_and_grads(x, np.zeros((len(x), net.n_z)), lam=kl_weight, train=False)
        total += loss * len(x)
    return total / len(codes)


def train(net: VaeNetwork, train_set, val_set, cfg: TrainConfig, *, adam: AdamState | None = None,
          start_epoch: int = 0, history: TrainHistory | None = None, progress=None):
    """Train ``net`` in place and return ``(net, history, adam_state)``.

    Epoch ``e`` shuffles with ``derive_seed(cfg.seed, e)`` so a run resumed
    from a checkpoint at epoch ``e`` continues exactly as an uninterrupted
    run would.  ``cfg.epochs`` is the total epoch count, not the increment.
    """
    train_codes, val_codes = _codes(train_set), _codes(val_set)
    if len(train_codes) == 0 or len(val_codes) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if train_codes.shape[1:] != net.input_shape[1:] or val_codes.shape[1:] != net.input_shape[1:]:
        raise ValueError(f"dataset grids {train_codes.shape[1:]} do not match network {net.input_shape}")
    k = net.input_shape[0]
    adam = adam or AdamState()
    history = history or TrainHistory()
    n = len(train_codes)
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, epoch))
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = to_one_hot(train_codes[idx], k)
            eps = rng.standard_normal((len(idx), net.n_z))
            try:
                loss, grads = net.loss_and_grads(x, eps, lam=cfg.kl_weight, rng=rng)
            except NumericalError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, "loss is not finite")
            adam.update(net.params, grads, cfg)
            running += loss * len(idx)
        try:
            vloss = validation_loss(net, val_codes, cfg.kl_weight)
            vacc = reconstruction_accuracy(net, val_codes)
        except NumericalError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        history.epoch.append(epoch + 1)
        history.train_loss.append(running / n)
        history.val_loss.append(vloss)
        history.val_accuracy.append(vacc)
        log.info("epoch %d train_loss %.6f val_loss %.6f val_acc %.4f",
                 epoch + 1, running / n, vloss, vacc)
        if progress is not None:
            progress(epoch + 1, running / n, vloss, vacc)
    return net, history, adam


def write_history_csv(path, history: TrainHistory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for e, tl, vl, va in history.rows():
            w.writerow([e, repr(float(tl)), repr(float(vl)), repr(float(va))])


def read_history_csv(path) -> TrainHistory:
    history = TrainHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            history.epoch.append(int(row["epoch"]))
            history.train_loss.append(float(row["train_loss"]))
            history.val_loss.append(float(row["val_loss"]))
            history.val_accuracy.append(float(row["val_accuracy"]))
    return history
