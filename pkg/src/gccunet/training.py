"""Cross-entropy training with Adam and early stopping, plus evaluation."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ops
from .data import FundusSample, augment, stack
from .metrics import MetricsReport, metrics_report
from .network import GCCUNet, save_weights
from .tensor import ConfigurationError, ContractError, Tensor, as_tensor, backward, no_grad, register_op

register_op("cross_entropy", "two-class softmax cross-entropy over FOV pixels (fused)")

LOG_CLAMP = 1e-12


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, epoch: int, batch: int, parameter: Optional[str]):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.parameter = parameter


def cross_entropy(logits: Tensor, target, fov) -> Tensor:
    """Mean over FOV pixels of -log q_target, q the per-pixel softmax of the two logits."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    fov = np.asarray(fov).astype(bool)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ContractError(f"logits must be [B,2,H,W], got {logits.shape}")
    B, _, H, W = logits.shape
    if target.shape != (B, H, W) or fov.shape != (B, H, W):
        raise ContractError(f"target {target.shape} / fov {fov.shape} must be {(B, H, W)}")
    n = int(fov.sum())
    if n == 0:
        raise ContractError("field of view is empty")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    q = e / e.sum(axis=1, keepdims=True)
    onehot = np.stack([target == 0, target == 1], axis=1).astype(np.float64)
    q_t = (q * onehot).sum(axis=1)
    clamped = q_t < LOG_CLAMP
    loss = -np.log(np.maximum(q_t, LOG_CLAMP))[fov].sum() / n

    def bw(g):
        # d(-log q_t)/dz = q - onehot; zero where the clamp is active
        w = (fov & ~clamped)[:, None].astype(np.float64) * (g / n)
        return ((q - onehot) * w,)

    return Tensor._from_op(np.array(loss), (logits,), bw, "cross_entropy")


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    augment: bool = False
    max_steps: Optional[int] = None
    max_seconds: Optional[float] = None
    clip_norm: Optional[float] = 1.0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ConfigurationError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        if self.learning_rate < 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("learning rate must be >= 0, eps > 0 and betas in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {unknown}")
        return cls(**d).validate()


@dataclass
class TrainResult:
    model: GCCUNet
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    steps: int = 0
    stop_reason: str = ""


def _batches(samples: list[FundusSample], batch_size: int):
    for i in range(0, len(samples), batch_size):
        yield stack(samples[i:i + batch_size])


def dataset_loss(model: GCCUNet, samples: list[FundusSample], batch_size: int = 8) -> float:
    """FOV-pixel-weighted mean cross-entropy over a sample list."""
    total, pixels = 0.0, 0
    with no_grad():
        for x, y, f in _batches(samples, batch_size):
            n = int(f.sum())
            total += cross_entropy(model(x), y, f).item() * n
            pixels += n
    return total / pixels


def _check_finite(model: GCCUNet, loss: Tensor, epoch: int, batch: int) -> None:
    if not np.isfinite(loss.item()):
        raise TrainingAborted(f"loss is {loss.item()} at epoch {epoch}, batch {batch}", epoch, batch, None)
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingAborted(
                f"non-finite gradient in {name} at epoch {epoch}, batch {batch}", epoch, batch, name)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def train(model: GCCUNet, train_set: list[FundusSample], val_set: list[FundusSample],
          cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam; the parameters with the best validation loss are restored at the end."""
    cfg.validate()
    if not train_set or not val_set:
        raise ContractError("training and validation sets must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps)
    result = TrainResult(model)
    best_state = model.state_dict()
    since_best = 0
    start = time.perf_counter()
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        epoch_samples = [train_set[i] for i in order]
        if cfg.augment:
            epoch_samples = [augment(s, rng) for s in epoch_samples]
        losses, halted = [], None
        for b, (x, y, f) in enumerate(_batches(epoch_samples, cfg.batch_size)):
            loss = cross_entropy(model(x), y, f)
            backward(loss, params)
            _check_finite(model, loss, epoch, b)
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            losses.append(loss.item())
            result.steps += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                halted = "max_steps"
            elif cfg.max_seconds is not None and time.perf_counter() - start >= cfg.max_seconds:
                halted = "time_budget"
            if halted:
                break
        val_loss = dataset_loss(model, val_set)
        if not np.isfinite(val_loss):
            raise TrainingAborted(f"validation loss is {val_loss} at epoch {epoch}", epoch, -1, None)
        improved = val_loss < result.best_val_loss
        if improved:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
        result.history.append({
            "epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
            "improved": improved, "steps": result.steps, "seconds": time.perf_counter() - t0,
        })
        if halted:
            result.stop_reason = halted
            break
        if since_best >= cfg.patience:
            result.stop_reason = "early_stopping"
            break
    else:
        result.stop_reason = "max_epochs"

    model.load_state_dict(best_state)
    if out_dir:
        save_weights(model, out_dir / "best.gccw")
        write_jsonl(result.history, out_dir / "history.jsonl")
    return result


def write_jsonl(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def predict_proba(model: GCCUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Vessel-class softmax probability [N,H,W] for images [N,C,H,W]."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(images[i:i + batch_size])
            out.append(ops.softmax(logits, axis=1).data[:, 1])
    return np.concatenate(out, axis=0)


def evaluate(model: GCCUNet, test_set: list[FundusSample], threshold: float = 0.5,
             batch_size: int = 8) -> MetricsReport:
    if not test_set:
        raise ContractError("test set is empty")
    x, y, f = stack(test_set)
    return metrics_report(predict_proba(model, x, batch_size), y, f, threshold)
