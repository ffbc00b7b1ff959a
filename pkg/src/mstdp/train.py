"""Sample construction, the teacher-forced training loop and checkpoints."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import nn
from .graph import HeteroGraph, NodeFeatures
from .io import atomic_write_text
from .metrics import accuracy
from .model import MSTDP, ModelConfig, collate, make_sample
from .trajectory import WINDOW

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    clip_norm: Optional[float] = 1.0
    lam: Optional[float] = None
    schedule: str = "constant"  # or "cosine": decay to lr_min over the epoch budget
    lr_min: float = 0.0

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * frac))


def make_samples(histories: dict, day_range: tuple) -> list:
    """One sample per (user, target day) with the target inside ``day_range``.

    The window covers the 7 days before the target and only reads earlier
    days; targets whose window holds no observed day are skipped.
    """
    lo, hi = day_range
    samples = []
    for u in sorted(histories):
        h = histories[u]
        for day in sorted(h.days):
            if not lo <= day < hi:
                continue
            if not any((day - j) in h.days for j in range(1, WINDOW + 1)):
                continue
            samples.append(make_sample(h, day - 1, h.days[day]))
    return samples


def batches(samples, batch_size: int, rng=None):
    order = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


def evaluate_accuracy(model: MSTDP, samples, batch_size: int = 256) -> float:
    """Next-day slot accuracy of greedy predictions against the samples' targets."""
    if not samples:
        return float("nan")
    from .trajectory import recouple

    model.freeze()
    try:
        preds, actual = [], []
        for chunk in batches(samples, batch_size):
            preds.extend(model.predict_samples(chunk))
            actual.extend(recouple(*s.target, model.cfg.T) for s in chunk)
    finally:
        model.unfreeze()
    return accuracy(preds, actual)


@dataclass
class TrainResult:
    best_epoch: int
    best_val_acc: float
    log_rows: list

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc"])
        for r in self.log_rows:
            w.writerow([r[0], f"{r[1]:.6f}", f"{r[2]:.6f}"])
        return buf.getvalue()


def train(model: MSTDP, train_samples, val_samples, cfg: TrainConfig, log_path=None,
          on_epoch=None) -> TrainResult:
    """Teacher-forced Adam training with validation-Acc model selection.

    On return the model holds the parameters of the best validation epoch
    (lowest training loss when there is no validation set). ``on_epoch(epoch,
    model)`` runs after every epoch; a true return value stops training.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = nn.Adam(model.store, lr=cfg.lr)
    best_state, best_acc, best_epoch, stale = model.store.state(), -math.inf, 0, 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        total, n = 0.0, 0
        for chunk in batches(train_samples, cfg.batch_size, rng):
            batch = collate(chunk, model.cfg.n_cells)
            model.store.zero_grad()
            loss = model.loss(batch, cfg.lam)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} after {n} batches")
            loss.backward()
            nn.clip_grad_norm(model.store, cfg.clip_norm)
            opt.step()
            total += value * len(chunk)
            n += len(chunk)
        val_acc = evaluate_accuracy(model, val_samples) if val_samples else float("nan")
        train_loss = total / max(n, 1)
        rows.append((epoch, train_loss, val_acc))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, train_loss, val_acc)
        if log_path is not None:
            atomic_write_text(log_path, TrainResult(best_epoch, best_acc, rows).log_csv())
        score = val_acc if np.isfinite(val_acc) else -train_loss
        if score > best_acc:
            best_state, best_acc, best_epoch, stale = model.store.state(), score, epoch, 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
        if on_epoch is not None and on_epoch(epoch, model):
            break
    model.store.load_state(best_state)
    return TrainResult(best_epoch, best_acc, rows)


def save_model(path, model: MSTDP, meta: dict = None) -> None:
    nn.save_checkpoint(path, model.store, model.cfg.to_dict(), meta)


def load_model(path, graph: HeteroGraph, features: NodeFeatures) -> tuple:
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    config, meta, state = nn.read_checkpoint(path)
    cfg = ModelConfig(**config)
    model = MSTDP(cfg, graph, features)
    model.store.load_state(state)
    return model, meta


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
