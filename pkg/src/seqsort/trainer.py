"""Mini-batch SGD with momentum, step learning-rate decay, logging and checkpoints.

All randomness is a function of ``(seed, epoch)`` for data order and
``(seed, step)`` for dropout masks, so a run resumed from a checkpoint
continues exactly as the uninterrupted run would.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Checkpoint, OrderNet, make_checkpoint, save_checkpoint
from .ops import softmax_cross_entropy
from .tensor import NumericError, ShapeError, make_rng

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "flip", "dihedral")


def augment_batch(x: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Apply one random flip/rotation per tuple, the same to all of its frames.

    Spatial transforms shared by every frame leave the temporal order, and so
    the label, unchanged. Draws one op per sample, in sample order.
    """
    if mode == "none":
        return x
    ops = rng.integers(0, 2 if mode == "flip" else 8, size=len(x))
    out = np.empty_like(x)
    for i, op in enumerate(ops):
        t = x[i]
        if op >= 4 or mode == "flip" and op == 1:
            t = t[..., ::-1]
        out[i] = np.rot90(t, int(op) % 4, axes=(-2, -1)) if mode == "dihedral" else t
    return out


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr0: float = 0.05
    momentum: float = 0.9
    lr_decay_factor: float = 10.0
    # empty -> decay at 60% and 85% of total_steps
    decay_steps: tuple[int, ...] = ()
    total_steps: int = 1200
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    weight_decay: float = 0.0
    # label-preserving augmentation applied identically to every frame of a tuple
    augment: str = "dihedral"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        ds = list(self.decay_steps)
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError(f"decay_steps must be strictly increasing, got {ds}")
        if self.total_steps < 0 or self.lr0 < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid total_steps, lr0 or momentum")
        if self.augment not in AUGMENTATIONS:
            raise ValueError(f"augment must be one of {AUGMENTATIONS}, got {self.augment!r}")

    def resolved_decay_steps(self) -> tuple[int, ...]:
        if self.decay_steps:
            return tuple(self.decay_steps)
        return (int(0.6 * self.total_steps), int(0.85 * self.total_steps))


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_acc: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def extend(self, other: "TrainLog") -> None:
        for k in ("steps", "lr", "loss", "train_acc", "eval_steps", "eval_acc"):
            getattr(self, k).extend(getattr(other, k))
        self.wall_time += other.wall_time

    def write_csv(self, path: str | Path) -> None:
        evals = dict(zip(self.eval_steps, self.eval_acc))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss", "train_acc", "eval_acc"])
            for s, lr, l, a in zip(self.steps, self.lr, self.loss, self.train_acc):
                w.writerow([s, repr(lr), repr(l), repr(a), repr(evals[s]) if s in evals else ""])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                s = int(row["step"])
                out.steps.append(s)
                out.lr.append(float(row["lr"]))
                out.loss.append(float(row["loss"]))
                out.train_acc.append(float(row["train_acc"]))
                if row["eval_acc"]:
                    out.eval_steps.append(s)
                    out.eval_acc.append(float(row["eval_acc"]))
        return out


def lr_at(step: int, cfg: TrainConfig) -> float:
    drops = sum(1 for d in cfg.resolved_decay_steps() if step >= d)
    return cfg.lr0 * cfg.lr_decay_factor ** (-drops)


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
                      momentum: float) -> None:
    """In place: ``v = momentum * v - lr * g``; ``p = p + v``."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ShapeError(f"sgd: shapes differ {param.shape} {grad.shape} {velocity.shape}")
    velocity *= momentum
    velocity -= lr * grad
    param += velocity


def order_accuracy_arrays(model: OrderNet, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float((model.predict(x).argmax(axis=1) == y).mean())


class Trainer:
    """Owns the model, momentum buffers and step counter of one training run."""

    def __init__(self, model: OrderNet, cfg: TrainConfig):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.step = 0
        self.velocity = {k: np.zeros_like(p.value) for k, p in model.params().items()}

    def _epoch_order(self, epoch: int, count: int) -> np.ndarray:
        return make_rng(self.cfg.seed, "epoch", epoch).permutation(count)

    def batch_indices(self, step: int, count: int) -> np.ndarray:
        bs = min(self.cfg.batch_size, count)
        per_epoch = count // bs
        epoch, k = divmod(step, per_epoch)
        return self._epoch_order(epoch, count)[k * bs:(k + 1) * bs]

    def train_step(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        lr = lr_at(self.step, self.cfg)
        m = self.model
        m.zero_grad()
        x = augment_batch(x, self.cfg.augment, make_rng(self.cfg.seed, "augment", self.step))
        logits = m.forward(x, train=True, rng=make_rng(self.cfg.seed, "dropout", self.step))
        loss, dlogits = softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at step {self.step} (lr={lr})")
        m.backward(dlogits)
        for k, p in m.params().items():
            g = p.grad
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.value
            sgd_momentum_step(p.value, g, self.velocity[k], lr, self.cfg.momentum)
        acc = float((logits.argmax(axis=1) == y).mean())
        self.step += 1
        return loss, acc

    def run(self, x: np.ndarray, y: np.ndarray, steps: int | None = None, eval_data=None,
            checkpoint_dir: str | Path | None = None) -> TrainLog:
        """Train until ``steps`` more steps (default: until ``total_steps``)."""
        if len(x) < 2:
            raise ValueError("need at least 2 training samples")
        if x.shape[1] != self.model.cfg.n:
            raise ShapeError(f"dataset tuple length {x.shape[1]} != model n={self.model.cfg.n}")
        if len(y) and y.max() >= self.model.cfg.num_classes:
            raise ShapeError("dataset labels exceed model class count")
        end = self.cfg.total_steps if steps is None else self.step + steps
        tlog = TrainLog()
        t0 = time.perf_counter()
        while self.step < end:
            s = self.step
            idx = self.batch_indices(s, len(x))
            try:
                loss, acc = self.train_step(x[idx], y[idx])
            except NumericError as e:
                raise NumericError(f"{e}; batch sample indices {idx[:8].tolist()}...") from e
            tlog.steps.append(s)
            tlog.lr.append(lr_at(s, self.cfg))
            tlog.loss.append(loss)
            tlog.train_acc.append(acc)
            done = self.step
            if eval_data is not None and self.cfg.eval_every and done % self.cfg.eval_every == 0:
                tlog.eval_steps.append(s)
                tlog.eval_acc.append(order_accuracy_arrays(self.model, *eval_data))
                log.info("step %d loss %.4f eval_acc %.3f", done, loss, tlog.eval_acc[-1])
            if checkpoint_dir is not None and self.cfg.checkpoint_every and done % self.cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{done:06d}.opnc", self.checkpoint())
        tlog.wall_time = time.perf_counter() - t0
        return tlog

    def checkpoint(self) -> Checkpoint:
        hyper = {f"train.{k}": (",".join(map(str, v)) if isinstance(v, tuple) else str(v))
                 for k, v in asdict(self.cfg).items()}
        extra = {f"velocity/{k}": v for k, v in self.velocity.items()}
        return make_checkpoint(self.model, self.step, extra, hyper)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig | None = None) -> "Trainer":
        from .model import model_from_checkpoint

        model = model_from_checkpoint(ckpt)
        tr = cls(model, cfg or train_config_from_hyper(ckpt.hyper))
        tr.step = ckpt.step
        for k in tr.velocity:
            key = f"velocity/{k}"
            if key in ckpt.tensors:
                tr.velocity[k][...] = ckpt.tensors[key]
        return tr


def train_config_from_hyper(hyper: dict[str, str]) -> TrainConfig:
    cfg = TrainConfig()
    for k, v in hyper.items():
        if not k.startswith("train."):
            continue
        name = k[6:]
        default = getattr(cfg, name, None)
        if isinstance(default, tuple):
            setattr(cfg, name, tuple(int(s) for s in v.split(",") if s))
        elif default is not None:
            setattr(cfg, name, type(default)(v))
    return cfg


def train(model: OrderNet, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, eval_data=None,
          checkpoint_dir=None) -> tuple[Checkpoint, TrainLog]:
    tr = Trainer(model, cfg)
    tlog = tr.run(x, y, eval_data=eval_data, checkpoint_dir=checkpoint_dir)
    return tr.checkpoint(), tlog
