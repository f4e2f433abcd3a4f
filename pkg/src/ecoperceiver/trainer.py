"""Seeded training loop: warm-up plus cosine learning rate, AdamW, early stopping."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .dataio import WindowSet, batch_iterator
from .errors import ConfigError
from .model import EcoPerceiver, ModelConfig, mse_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)


class OptimizerError(FloatingPointError):
    """A non-finite gradient reached the optimizer."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 8e-5
    batch_size: int = 256
    warmup_epochs: int = 1
    total_epochs: int = 20
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 5
    windows_per_epoch: int = 0      # 0 = every training window each epoch
    eval_batch_size: int = 1024
    worker_count: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < total_epochs (got {self.warmup_epochs}, {self.total_epochs})")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.windows_per_epoch < 0:
            raise ConfigError("windows_per_epoch must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.weight_decay >= 0):
            raise ConfigError("invalid optimizer hyperparameters")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``lr``, then cosine decay reaching 0 on the final step."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if steps_per_epoch < 1:
        raise ConfigError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    warmup = cfg.warmup_epochs * steps_per_epoch
    last = cfg.total_epochs * steps_per_epoch - 1
    if step < warmup:
        return cfg.lr * step / warmup
    if step >= last:
        return 0.0
    progress = (step - warmup) / (last - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, lr: float) -> AdamState:
    """One AdamW update, in place on ``params`` (name -> Tensor or ndarray).

    Weight decay multiplies each parameter by ``1 - lr * weight_decay``
    before the moment-based step, independently of the gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        g = np.asarray(g, dtype=data.dtype)
        if data.shape != g.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            data *= 1.0 - lr * cfg.weight_decay
        data -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    steps: int
    rng_fingerprint: str
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r.train_loss for r in self.records])

    @property
    def val_losses(self) -> np.ndarray:
        return np.array([r.val_loss for r in self.records])

    def to_csv(self, path) -> Path:
        """Deterministic log; wall times go to :meth:`timing_csv`."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "steps", "rng_fingerprint"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), r.steps, r.rng_fingerprint])
        return path

    def timing_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_time_s"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.wall_time:.3f}"])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                log.records.append(EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]),
                                               float(row["lr"]), int(row["steps"]), row["rng_fingerprint"]))
        return log


@dataclass
class TrainResult:
    model: EcoPerceiver          # parameters of the best validation epoch
    checkpoint: Checkpoint
    log: TrainLog


def _rng_fingerprint(rng: np.random.Generator) -> str:
    blob = json.dumps(rng.bit_generator.state, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def target_scaling(windows: WindowSet) -> tuple[float, float]:
    y = windows.targets
    mean = float(np.mean(y))
    std = float(np.std(y))
    return mean, (std if std > 0 else 1.0)


def predict(model: EcoPerceiver, windows: WindowSet, target_mean: float = 0.0, target_std: float = 1.0,
            batch_size: int = 1024) -> np.ndarray:
    """Predictions in physical units."""
    return model.predict(windows, batch_size) * target_std + target_mean


def evaluate_loss(model: EcoPerceiver, windows: WindowSet, target_mean: float, target_std: float,
                  batch_size: int = 1024) -> float:
    """Eval-mode MSE in standardised target units."""
    pred = model.predict(windows, batch_size)
    y = (windows.targets - target_mean) / target_std
    return float(np.mean((pred - y) ** 2))


def train(model_cfg: ModelConfig, train_windows: WindowSet, val_windows: WindowSet, cfg: TrainConfig,
          target_mean: float | None = None, target_std: float | None = None,
          meta: dict | None = None, progress=None) -> TrainResult:
    """Train from scratch; every random draw derives from ``cfg.seed``.

    Targets are standardised with ``target_mean``/``target_std`` (taken from
    the training windows when omitted); the scaling is stored in the
    checkpoint metadata. The returned model and checkpoint hold the epoch
    with the lowest validation loss.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ConfigError("training and validation window sets must be non-empty")
    if train_windows.T != model_cfg.T or val_windows.T != model_cfg.T:
        raise ConfigError(f"windows have T={train_windows.T}/{val_windows.T}, model expects T={model_cfg.T}")
    if target_mean is None or target_std is None:
        target_mean, target_std = target_scaling(train_windows)
    model = EcoPerceiver(model_cfg, seed=cfg.seed)
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState()
    n_epoch = min(len(train_windows), cfg.windows_per_epoch) if cfg.windows_per_epoch else len(train_windows)
    steps_per_epoch = math.ceil(n_epoch / cfg.batch_size)
    log = TrainLog()
    best_val, best_state, best_epoch, since_best = math.inf, model.state(), -1, 0
    step = 0
    for epoch in range(cfg.total_epochs):
        t0 = time.perf_counter()
        total, count, lr = 0.0, 0, 0.0
        for batch in batch_iterator(train_windows, cfg.batch_size, cfg.seed, epoch, cfg.worker_count,
                                    limit=n_epoch):
            lr = lr_schedule(step, steps_per_epoch, cfg)
            log.lr_trace.append(lr)
            target = (batch.target - target_mean) / target_std
            model.zero_grad()
            loss = mse_loss(model(batch, "train", dropout_rng), target)
            loss.backward()
            optimizer_step(model.params, {k: p.grad for k, p in model.params.items()}, state, cfg, lr)
            total += loss.item() * len(batch)
            count += len(batch)
            step += 1
        val = evaluate_loss(model, val_windows, target_mean, target_std, cfg.eval_batch_size)
        record = EpochRecord(epoch, total / count, val, lr, steps_per_epoch, _rng_fingerprint(dropout_rng),
                             time.perf_counter() - t0)
        log.records.append(record)
        logger.info("epoch %d train %.5f val %.5f lr %.3g (%.1fs)", epoch, record.train_loss, val, lr,
                    record.wall_time)
        if progress is not None:
            progress(record)
        if val < best_val:
            best_val, best_state, best_epoch, since_best = val, model.state(), epoch, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.stopped_early = True
                break
    log.best_epoch = best_epoch
    model.load_state(best_state)
    info = {"target_mean": target_mean, "target_std": target_std, "best_val_loss": best_val}
    info.update(meta or {})
    ckpt = Checkpoint.from_model(model, epoch=best_epoch, rng_state=dropout_rng.bit_generator.state, meta=info)
    return TrainResult(model, ckpt, log)
