"""Optimization harness: AdamW, warmup+cosine schedule, accumulation, early
stopping, checkpointed resume, and deterministic seeding.

The learning-rate schedule is per optimizer step: ``T = epochs *
steps_per_epoch``.  Warmup runs ``lr = peak*(t+1)/W`` for the first ``W =
round(warmup_ratio*T)`` steps (never exactly zero), then cosine anneals from
peak to ``min_lr_ratio*peak``, hitting the floor exactly at ``t = T``.

Gradients are accumulated over ``grad_accum_steps`` micro-batches and
averaged before each AdamW step, so accumulation is loss-equivalent to
large-batch training for deterministic models.  Early stopping counts epochs
without a *strict* validation-accuracy improvement; ties do not reset it.

All randomness is keyed through peftkit.rng substreams, which makes a resumed
run byte-identical to an uninterrupted one.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as prng
from . import tensor as T
from .checkpoint import load_checkpoint, load_params_into, params_to_arrays, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .nn import ClassifierHead, Model, forward_logits
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    micro_batch: int = 4
    grad_accum_steps: int = 8
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    min_lr_ratio: float = 0.1
    label_smoothing: float = 0.1
    patience: int = 5
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum_steps


def train_preset(name: str) -> TrainConfig:
    presets = {
        "peft": TrainConfig(),
        "frozen": TrainConfig(epochs=80, micro_batch=8, grad_accum_steps=4,
                              peak_lr=1e-3, patience=5),
        "scratch_cnn": TrainConfig(epochs=150, micro_batch=32, grad_accum_steps=1,
                                   peak_lr=1e-3, warmup_ratio=0.0, patience=10),
        "scratch_vit": TrainConfig(epochs=150, micro_batch=32, grad_accum_steps=1,
                                   peak_lr=5e-5, warmup_ratio=0.0, patience=10),
    }
    if name not in presets:
        raise ConfigError(f"unknown train preset {name!r}")
    return presets[name]


@dataclass
class ScheduleState:
    step: int
    total: int
    warmup: int


def warmup_steps(cfg: TrainConfig, total: int) -> int:
    if cfg.warmup_ratio <= 0.0:
        return 0
    return max(1, round(cfg.warmup_ratio * total))


def lr_at(t: int, total: int, cfg: TrainConfig) -> float:
    """Learning rate at optimizer step t in [0, total]."""
    w = warmup_steps(cfg, total)
    if total <= w:
        raise ConfigError(f"total steps {total} must exceed warmup steps {w}")
    min_lr = cfg.min_lr_ratio * cfg.peak_lr
    if t < w:
        return cfg.peak_lr * (t + 1) / w
    if t >= total:
        return min_lr
    span = (t - w) / (total - w)
    return min_lr + (cfg.peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * span))


def set_seed(seed: int) -> None:
    """Make every derived random stream a pure function of this seed."""
    prng.set_seed(seed)


class AdamW:
    """Decoupled weight decay plus bias-corrected adaptive updates."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if cfg.weight_decay:
                p.data -= lr * cfg.weight_decay * p.data
            m = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = arrays[f"opt.v.{name}"].astype(self.v[name].dtype, copy=True)


class EarlyStopper:
    """Stops after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


@dataclass
class ArrayDataset:
    """Preprocessed split: normalized images (N,3,H,W) and integer labels."""
    images: np.ndarray
    labels: np.ndarray
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    wall_seconds: float


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_accuracy: float
    history: list[HistoryRow]
    stopped_epoch: int


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "lr", "wall_seconds")


def history_to_csv(rows: list[HistoryRow]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in rows:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},"
                     f"{r.val_accuracy!r},{r.lr!r},{r.wall_seconds!r}")
    return "\n".join(lines) + "\n"


def evaluate(model: Model, head: ClassifierHead, data: ArrayDataset,
             batch_size: int = 64, smoothing: float = 0.0
             ) -> tuple[float, float, np.ndarray]:
    """Returns (mean loss, accuracy, predictions); eval mode, no tape."""
    if len(data) == 0:
        raise DataError("cannot evaluate an empty split")
    preds = np.empty(len(data), dtype=np.int64)
    loss_sum = 0.0
    for start in range(0, len(data), batch_size):
        xb = Tensor(data.images[start:start + batch_size])
        yb = data.labels[start:start + batch_size]
        logits = forward_logits(model, head, xb, training=False)
        loss = T.cross_entropy_label_smoothed(logits, yb, smoothing)
        loss_sum += loss.item() * len(yb)
        preds[start:start + len(yb)] = logits.data.argmax(axis=1)
    accuracy = float((preds == data.labels).mean())
    return loss_sum / len(data), accuracy, preds


def trainable_params(model: Model, head: ClassifierHead) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, p in model.parameters().items():
        if p.requires_grad:
            params[f"model.{name}"] = p
    for name, p in head.parameters().items():
        if p.requires_grad:
            params[f"head.{name}"] = p
    return params


class Trainer:
    """Epoch-driven training loop with checkpointed resume.

    Because every random draw is keyed by (seed, purpose, epoch/step), a run
    resumed from an epoch-boundary checkpoint reproduces the uninterrupted
    trajectory bit for bit.
    """

    def __init__(self, model: Model, head: ClassifierHead, train_data: ArrayDataset,
                 val_data: ArrayDataset, cfg: TrainConfig):
        if len(train_data) == 0 or len(val_data) == 0:
            raise DataError("train and val splits must be non-empty")
        self.model = model
        self.head = head
        self.train_data = train_data
        self.val_data = val_data
        self.cfg = cfg
        self.params = trainable_params(model, head)
        self.opt = AdamW(self.params, cfg)
        n = len(train_data)
        micro_per_epoch = math.ceil(n / cfg.micro_batch)
        self.steps_per_epoch = math.ceil(micro_per_epoch / cfg.grad_accum_steps)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.step = 0
        self.epoch = 0
        self.history: list[HistoryRow] = []
        self.stopper = EarlyStopper(cfg.patience)
        self.best_params: dict[str, np.ndarray] = {}
        self.stopped = False

    def _run_epoch(self, epoch: int) -> float:
        cfg = self.cfg
        n = len(self.train_data)
        order = prng.substream("shuffle", epoch, seed=cfg.seed).permutation(n)
        loss_sum = 0.0
        micro_starts = list(range(0, n, cfg.micro_batch))
        for gstart in range(0, len(micro_starts), cfg.grad_accum_steps):
            group = micro_starts[gstart:gstart + cfg.grad_accum_steps]
            self.opt.zero_grad()
            for k, mstart in enumerate(group):
                idx = order[mstart:mstart + cfg.micro_batch]
                xb = Tensor(self.train_data.images[idx])
                yb = self.train_data.labels[idx]
                drop_rng = prng.substream("dropout", epoch, gstart + k, seed=cfg.seed)
                with GradTape() as tape:
                    logits = forward_logits(self.model, self.head, xb,
                                            training=True, rng=drop_rng)
                    loss = T.cross_entropy_label_smoothed(logits, yb, cfg.label_smoothing)
                    tape.backward(loss)
                loss_sum += loss.item() * len(yb)
            for p in self.params.values():
                if p.grad is not None:
                    p.grad /= len(group)
            self.opt.step(lr_at(self.step, self.total_steps, self.cfg))
            self.step += 1
        return loss_sum / n

    def run(self, stop_after: int | None = None) -> TrainResult:
        cfg = self.cfg
        while self.epoch < cfg.epochs and not self.stopped:
            if stop_after is not None and self.epoch >= stop_after:
                break
            epoch = self.epoch + 1
            t0 = time.perf_counter()
            train_loss = self._run_epoch(epoch)
            val_loss, val_acc, _ = evaluate(self.model, self.head, self.val_data,
                                            smoothing=cfg.label_smoothing)
            wall = time.perf_counter() - t0
            self.history.append(HistoryRow(
                epoch, train_loss, val_loss, val_acc,
                lr_at(self.step - 1, self.total_steps, cfg), wall))
            if val_acc > self.stopper.best:
                self.best_params = {k: p.data.copy() for k, p in self.params.items()}
            if self.stopper.update(epoch, val_acc):
                self.stopped = True
            self.epoch = epoch
        if not self.best_params and self.history:
            self.best_params = {k: p.data.copy() for k, p in self.params.items()}
        return TrainResult(self.best_params, self.stopper.best_epoch,
                           self.stopper.best, self.history, self.epoch)

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        tensors = {f"param.{k}": p.data for k, p in self.params.items()}
        tensors.update(self.opt.state_arrays())
        for k, arr in self.best_params.items():
            tensors[f"best.{k}"] = arr
        manifest = {
            "kind": "train_state",
            "config": asdict(self.cfg),
            "epoch": self.epoch,
            "step": self.step,
            "opt_step": self.opt.step_count,
            "stopped": self.stopped,
            "stopper": {"best": self.stopper.best,
                        "best_epoch": self.stopper.best_epoch,
                        "stale": self.stopper.stale},
            "history": [asdict(r) for r in self.history],
        }
        save_checkpoint(path, tensors, manifest)

    def load(self, path) -> None:
        arrays, manifest, _ = load_checkpoint(path)
        if manifest.get("kind") != "train_state":
            raise ConfigError(f"{path} is not a trainer checkpoint")
        load_params_into(self.params, arrays, prefix="param.")
        self.opt.load_state_arrays(arrays, manifest["opt_step"])
        self.epoch = manifest["epoch"]
        self.step = manifest["step"]
        self.stopped = manifest["stopped"]
        st = manifest["stopper"]
        self.stopper.best = st["best"]
        self.stopper.best_epoch = st["best_epoch"]
        self.stopper.stale = st["stale"]
        self.history = [HistoryRow(**r) for r in manifest["history"]]
        self.best_params = {k[len("best."):]: v for k, v in arrays.items()
                            if k.startswith("best.")}


def train_loop(model: Model, head: ClassifierHead, train_data: ArrayDataset,
               val_data: ArrayDataset, cfg: TrainConfig) -> TrainResult:
    """Train to early stop or epoch budget; returns best-val state + history."""
    return Trainer(model, head, train_data, val_data, cfg).run()


def restore_params(model: Model, head: ClassifierHead,
                   arrays: dict[str, np.ndarray]) -> None:
    """Write a best-params snapshot back into the live model/head tensors."""
    params = trainable_params(model, head)
    for name, p in params.items():
        if name in arrays:
            p.data = arrays[name].astype(p.dtype, copy=True)
