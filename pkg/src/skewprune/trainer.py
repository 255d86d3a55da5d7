"""Desk-scale training and fine-tuning with best-F1 checkpoint selection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fairness import macro_f1
from .models import ModelSpec, forward, predict
from .tensor import Tensor, cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "sgd"          # sgd (momentum) | adamw
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    scheduler: str = "plateau"      # plateau | cosine | none
    factor: float = 0.5
    patience: int = 10
    warmup_epochs: int = 0
    max_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    freeze: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("plateau", "cosine", "none"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")

    @classmethod
    def vgg_recipe(cls, **kw) -> "TrainConfig":
        """SGD + plateau halving (patience 10) from lr 1e-2."""
        base = dict(optimizer="sgd", lr=1e-2, scheduler="plateau", factor=0.5, patience=10)
        base.update(kw)
        return cls(**base)

    @classmethod
    def vit_recipe(cls, **kw) -> "TrainConfig":
        """AdamW with cosine decay after a linear warm-up."""
        base = dict(optimizer="adamw", lr=1e-5, weight_decay=0.05, scheduler="cosine", warmup_epochs=5,
                    max_epochs=100)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    checkpoints: list[str] = field(default_factory=list)

    @property
    def best_f1(self) -> float:
        return self.epochs[self.best_epoch]["val_f1"] if self.epochs else float("nan")

    def to_dict(self) -> dict:
        return {"schema": "skewprune.trainlog/1", **asdict(self)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


class PlateauScheduler:
    """Multiply lr by ``factor`` once the metric has not improved for ``patience`` epochs."""

    def __init__(self, lr: float, factor: float, patience: int):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.best = -math.inf
        self.bad = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


def cosine_lr(base: float, epoch: int, warmup: int, total: int) -> float:
    if epoch < warmup:
        return base * (epoch + 1) / warmup
    span = max(total - warmup, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * (epoch - warmup) / span))


class Optimizer:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = [np.zeros_like(p.data) for p in self.params]
        self.state2 = [np.zeros_like(p.data) for p in self.params] if cfg.optimizer == "adamw" else None
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        lr32 = np.float32(lr)
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if cfg.optimizer == "sgd":
                if cfg.weight_decay:
                    g = g + np.float32(cfg.weight_decay) * p.data
                buf = self.state[i]
                buf *= np.float32(cfg.momentum)
                buf += g
                p.data = p.data - lr32 * buf
            else:
                b1, b2 = cfg.betas
                m, v = self.state[i], self.state2[i]
                m *= np.float32(b1)
                m += np.float32(1 - b1) * g
                v *= np.float32(b2)
                v += np.float32(1 - b2) * g * g
                mhat = m / np.float32(1 - b1 ** self.t)
                vhat = v / np.float32(1 - b2 ** self.t)
                decayed = p.data * np.float32(1 - lr * cfg.weight_decay)
                p.data = (decayed - lr32 * mhat / (np.sqrt(vhat) + np.float32(1e-8))).astype(np.float32)
            p.grad = None


def trainable(model: ModelSpec, freeze: Sequence[str]) -> list[Tensor]:
    names = {n.name for n in model.nodes}
    unknown = [f for f in freeze if f not in names]
    if unknown:
        raise ValueError(f"freeze list names unknown layers: {unknown}")
    return [model.w(n, k) for n in model.nodes if n.name not in freeze for k in n.params]


def _snapshot(model: ModelSpec) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.weights.items()}


def train(model: ModelSpec, train_set, val_set, config: TrainConfig,
          checkpoint_dir=None) -> tuple[ModelSpec, TrainLog]:
    """Cross-entropy training; returns the best-val-F1 weights and the epoch log.

    ``train_set``/``val_set`` are ``(images, labels)`` array pairs. The input
    model is not modified.
    """
    x_tr, y_tr = train_set
    x_va, y_va = val_set
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("empty training or validation split")
    work = model.copy()
    params = trainable(work, config.freeze)
    opt = Optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    sched = PlateauScheduler(config.lr, config.factor, config.patience)
    lr = config.lr
    tlog = TrainLog()
    best_state = _snapshot(work)
    best_f1 = -math.inf
    for epoch in range(config.max_epochs):
        if config.scheduler == "cosine":
            lr = cosine_lr(config.lr, epoch, config.warmup_epochs, config.max_epochs)
        order = rng.permutation(len(x_tr))
        total, seen, correct = 0.0, 0, 0
        try:
            with np.errstate(over="ignore", invalid="ignore"):   # non-finite values are checked explicitly
                for bi in range(0, len(order), config.batch_size):
                    idx = order[bi:bi + config.batch_size]
                    logits = forward(work, x_tr[idx])
                    loss = cross_entropy(logits, y_tr[idx])
                    loss.backward()
                    opt.step(lr)
                    for p in work.parameters():
                        p.grad = None
                    total += loss.item() * len(idx)
                    seen += len(idx)
                    correct += int((logits.data.argmax(1) == y_tr[idx]).sum())
                if not all(np.isfinite(p.data).all() for p in params):
                    raise FloatingPointError("non-finite weights after update")
                pred = predict(work, x_va).argmax(1)
        except FloatingPointError as e:
            raise TrainingDiverged(f"epoch {epoch}: {e}") from e
        f1 = macro_f1(y_va, pred, work.num_classes)
        entry = {"epoch": epoch, "loss": total / seen, "train_acc": correct / seen,
                 "val_acc": float(np.mean(pred == y_va)), "val_f1": f1, "lr": lr}
        tlog.epochs.append(entry)
        log.info("epoch %d loss %.4f train_acc %.3f val_f1 %.3f lr %.2e",
                 epoch, entry["loss"], entry["train_acc"], f1, lr)
        if f1 > best_f1:
            best_f1 = f1
            best_state = _snapshot(work)
            tlog.best_epoch = epoch
        if config.scheduler == "plateau":
            lr = sched.step(f1)
    for k, arr in best_state.items():
        work.weights[k] = Tensor(arr, requires_grad=True)
    if checkpoint_dir is not None:
        from .data import save_model

        path = save_model(work, Path(checkpoint_dir) / "best")
        tlog.checkpoints.append(str(path))
    return work, tlog


def finetune(model: ModelSpec, train_set, val_set, config: TrainConfig,
             provenance: dict | None = None, checkpoint_dir=None) -> tuple[ModelSpec, TrainLog]:
    """Train a pruned model, freezing whatever its pruning provenance asks for."""
    freeze = list(config.freeze)
    prov = provenance if provenance is not None else model.meta.get("provenance", {})
    for name in prov.get("freeze", []):
        if name not in freeze:
            freeze.append(name)
    cfg = TrainConfig(**{**asdict(config), "freeze": freeze})
    return train(model, train_set, val_set, cfg, checkpoint_dir)
