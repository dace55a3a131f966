"""Cross-entropy training loop, optimizers, evaluation and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, check_shapes, load_checkpoint, save_checkpoint
from .model import ConfigError, CrossViT
from .rng import make_rng, rng_from_state, rng_state
from .tensor import Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    seed: int = 0
    val_fraction: float = 0.2
    checkpoint_path: str | None = None
    log_path: str | None = None

    def violations(self) -> list[str]:
        out = []
        if not self.learning_rate > 0:
            out.append("learning_rate > 0")
        if not 0.0 < self.val_fraction < 1.0:
            out.append("0 < val_fraction < 1")
        if self.epochs < 0:
            out.append("epochs >= 0")
        if self.batch_size < 1:
            out.append("batch_size >= 1")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer in {OPTIMIZERS}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            out.append("adam betas in [0, 1)")
        if self.adam_eps <= 0:
            out.append("adam_eps > 0")
        if self.grad_clip < 0:
            out.append("grad_clip >= 0")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"{labels.size} labels for {b} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = -1.0 / b
    return T.sum(T.mul(T.log_softmax_lastdim(logits), Tensor(onehot)))


# ---------------------------------------------------------------- optimizer


class Optimizer:
    """Plain SGD or bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.kind = config.optimizer
        self.lr = config.learning_rate
        self.beta1, self.beta2, self.eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        self.clip = config.grad_clip
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        if self.kind == "adam":
            self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
            self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        elif self.kind != "sgd":
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values())))

    def step(self) -> None:
        for name, p in self.params.items():
            if p.requires_grad and p.grad is None:
                raise ValueError(f"missing gradient for parameter {name}")
        scale = 1.0
        if self.clip > 0:
            norm = self.grad_norm()
            if norm > self.clip:
                scale = self.clip / norm
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.kind == "sgd":
                p.data -= self.lr * g
            else:
                m, v = self.m[name], self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                m_hat = m / (1.0 - self.beta1**t)
                v_hat = v / (1.0 - self.beta2**t)
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grad()

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"kind": self.kind, "step": self.step_count}
        moments = {f"m.{n}": a for n, a in self.m.items()}
        moments.update({f"v.{n}": a for n, a in self.v.items()})
        return meta, moments

    def load_state(self, meta: dict, moments: dict[str, np.ndarray]) -> None:
        if meta.get("kind") != self.kind:
            raise CheckpointError(f"checkpoint optimizer {meta.get('kind')!r} != {self.kind!r}")
        self.step_count = int(meta["step"])
        for n in self.m:
            self.m[n] = moments[f"m.{n}"].copy()
            self.v[n] = moments[f"v.{n}"].copy()


# ---------------------------------------------------------------- loops


@dataclass
class EpochStats:
    mean_loss: float
    train_acc: float


@dataclass
class EvalResult:
    labels: np.ndarray
    predictions: np.ndarray
    scores: np.ndarray  # softmax probability of class 1


def train_epoch(model: CrossViT, images: np.ndarray, labels, opt: Optimizer, rng, batch_size: int = 32,
                epoch: int = 0) -> EpochStats:
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = rng.permutation(n)
    total_loss, correct = 0.0, 0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        opt.zero_grad()
        logits = model.forward(images[idx], training=True, rng=rng)
        loss = cross_entropy(logits, labels[idx])
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
        T.backward(loss)
        opt.step()
        total_loss += value * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
    return EpochStats(total_loss / n, correct / n)


def evaluate(model: CrossViT, images: np.ndarray, labels, batch_size: int = 64) -> EvalResult:
    """Inference-mode predictions; touches no parameter and no RNG."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    probs = []
    with T.no_grad():
        for start in range(0, len(labels), batch_size):
            logits = model.forward(images[start : start + batch_size], training=False).data
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs.append(shifted / shifted.sum(axis=1, keepdims=True))
    p = np.concatenate(probs)
    return EvalResult(labels, np.argmax(p, axis=1), p[:, 1] if p.shape[1] > 1 else p[:, 0])


def make_checkpoint(model: CrossViT, opt: Optimizer, epoch: int, rng, train_config: TrainConfig) -> Checkpoint:
    meta, moments = opt.state()
    return Checkpoint(
        model_config=model.config,
        params={n: p.data.copy() for n, p in model.params.items()},
        epoch=epoch,
        rng_state=rng_state(rng),
        optimizer=meta,
        moments={k: v.copy() for k, v in moments.items()},
        train_config=train_config.to_dict(),
    )


def restore(ckpt: Checkpoint, train_config: TrainConfig) -> tuple[CrossViT, Optimizer, np.random.Generator]:
    model = CrossViT(ckpt.model_config)
    check_shapes(ckpt, {n: p.shape for n, p in model.params.items()})
    for name, p in model.params.items():
        p.data = ckpt.params[name].copy()
    opt = Optimizer(model.params, train_config)
    opt.load_state(ckpt.optimizer, ckpt.moments)
    rng = rng_from_state(ckpt.rng_state)
    return model, opt, rng


def training_rng(train_config: TrainConfig) -> np.random.Generator:
    """The single stream used for shuffling, dropout and layer drop."""
    return make_rng(train_config.seed, 1)


def fit(
    model: CrossViT,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray] | None,
    config: TrainConfig,
    *,
    resume_from=None,
    stop_after: int | None = None,
) -> list[dict]:
    """Train for ``config.epochs`` epochs, logging and checkpointing after each one.

    ``resume_from`` continues from a checkpoint file (its parameters, optimizer
    moments, RNG state and epoch replace the ones passed in).  ``stop_after``
    ends the run early after that many total epochs, as an interrupted run would.
    Returns the per-epoch log records.
    """
    config.validate()
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.model_config != model.config:
            raise CheckpointError("checkpoint model config differs from the requested model")
        restored, opt, rng = restore(ckpt, config)
        for name, p in model.params.items():
            p.data = restored.params[name].data
        opt.params = model.params
        first_epoch = ckpt.epoch + 1
    else:
        opt = Optimizer(model.params, config)
        rng = training_rng(config)
        first_epoch = 1
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    images, labels = train_data
    records = []
    for epoch in range(first_epoch, last + 1):
        t0 = time.perf_counter()
        stats = train_epoch(model, images, labels, opt, rng, config.batch_size, epoch)
        record = {"epoch": epoch, "mean_loss": stats.mean_loss, "train_acc": stats.train_acc, "val_acc": None}
        if val_data is not None and len(val_data[1]):
            res = evaluate(model, *val_data)
            record["val_acc"] = float(np.mean(res.predictions == res.labels))
        record["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        records.append(record)
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %s", epoch, stats.mean_loss,
                 stats.train_acc, record["val_acc"])
        if config.log_path:
            with open(config.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if config.checkpoint_path:
            Path(config.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(config.checkpoint_path, make_checkpoint(model, opt, epoch, rng, config))
    return records
