"""Adam optimizer, the mini-batch training loop and the overfit harness."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .architectures import Network
from .checkpoint import load_state, save_checkpoint, state_dict
from .data import PatchSet
from .engine import functional as F
from .engine.tensor import Tensor, backward, no_grad, zero_grad
from .errors import ConfigError, UsageError
from .metrics import evaluate_scores

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_f1", "val_auc", "seconds")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    checkpoint: Optional[str] = None
    max_steps: Optional[int] = None
    deterministic: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float
    val_auc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    steps: int = 0

    def best(self) -> Optional[EpochRecord]:
        return next((r for r in self.records if r.epoch == self.best_epoch), None)

    def to_csv(self, path, timings: bool = True) -> None:
        """Write the log; with ``timings=False`` the seconds column is 0 so reruns compare byte-equal."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                secs = r.seconds if timings else 0.0
                w.writerow([r.epoch] + [_fmt(v) for v in (r.train_loss, r.val_loss, r.val_f1, r.val_auc, secs)])


def _fmt(v: float) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


def check_divisible(net: Network, patch_size: int) -> None:
    k = 2**net.config.max_levels
    if patch_size % k:
        raise ConfigError(f"patch size {patch_size} is not divisible by 2^{net.config.max_levels} = {k}")


def loss_on(net: Network, images: np.ndarray, masks: np.ndarray) -> Tensor:
    x = Tensor(images, dtype=net.dtype)
    return F.bce_with_logits(net.logits(x), masks.astype(net.dtype))


def validate(net: Network, images: np.ndarray, masks: np.ndarray, batch_size: int) -> tuple[float, float, float]:
    """Inference-mode validation loss, F1 and AUC over patch pixels."""
    if len(images) == 0:
        return math.nan, math.nan, math.nan
    was_training = net.training
    net.eval()
    total, probs = 0.0, []
    try:
        with no_grad():
            for s in range(0, len(images), batch_size):
                xb, yb = images[s : s + batch_size], masks[s : s + batch_size]
                logits = net.logits(Tensor(xb, dtype=net.dtype))
                total += float(F.bce_with_logits(logits, yb.astype(net.dtype)).data) * len(xb)
                probs.append(1 / (1 + np.exp(-logits.data.astype(np.float64))))
    finally:
        net.train(was_training)
    report = evaluate_scores(np.concatenate(probs), masks)
    auc = report.auc if report.auc is not None else math.nan
    return total / len(images), report.f1, auc


def train(
    net: Network,
    patches: PatchSet,
    cfg: TrainConfig,
    progress: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[Network, TrainLog]:
    """Fit ``net`` on the training split of ``patches``.

    After every epoch the validation loss is measured; the best state (lowest
    validation loss, strict improvement only) is kept and restored at the end,
    and training stops after ``cfg.patience`` epochs without improvement. With
    no validation patches the final state is kept. Batch order comes from
    ``cfg.seed`` alone, so runs are reproducible at a fixed thread count.
    """
    cfg.validate()
    check_divisible(net, patches.patch_size)
    x_tr, y_tr = patches.train()
    x_va, y_va = patches.val()
    if len(x_tr) == 0:
        raise UsageError("patch set has no training patches")
    params = net.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    best_loss, best_state, stale = math.inf, None, 0
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(x_tr))
        seen, running = 0, 0.0
        for s in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and log.steps >= cfg.max_steps:
                break
            idx = order[s : s + cfg.batch_size]
            loss = loss_on(net, x_tr[idx], y_tr[idx])
            zero_grad(params)
            backward(loss, params)
            opt.step()
            log.steps += 1
            running += float(loss.data) * len(idx)
            seen += len(idx)
        if seen == 0:
            break
        val_loss, val_f1, val_auc = validate(net, x_va, y_va, cfg.batch_size)
        rec = EpochRecord(epoch, running / seen, val_loss, val_f1, val_auc, time.perf_counter() - start)
        log.records.append(rec)
        if progress:
            progress(rec)
        if math.isnan(val_loss):
            continue
        if val_loss < best_loss:
            best_loss, best_state, stale = val_loss, state_dict(net), 0
            log.best_epoch = epoch
            if cfg.checkpoint:
                save_checkpoint(net, cfg.checkpoint, extra={"epoch": epoch, "val_loss": val_loss})
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        load_state(net, best_state)
    elif cfg.checkpoint:
        save_checkpoint(net, cfg.checkpoint)
    return net, log


def overfit(
    net: Network,
    images: np.ndarray,
    masks: np.ndarray,
    steps: int = 500,
    lr: float = 1e-3,
    target: Optional[float] = None,
) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the loss before each step.

    Stops early once the loss falls below ``target`` (the final entry is then
    the first loss under the target).
    """
    check_divisible(net, images.shape[-1])
    params = net.parameters()
    opt = Adam(params, lr)
    net.train()
    losses = []
    for _ in range(steps):
        loss = loss_on(net, images, masks)
        losses.append(float(loss.data))
        if target is not None and losses[-1] < target:
            break
        zero_grad(params)
        backward(loss, params)
        opt.step()
    return losses


def write_log(log: TrainLog, path, deterministic: bool) -> Path:
    path = Path(path)
    log.to_csv(path, timings=not deterministic)
    return path
