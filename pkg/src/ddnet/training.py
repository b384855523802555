"""Soft-IoU loss, Adam, the piecewise-constant learning-rate schedule and the
training loop shared by both model kinds."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import networks
from .metrics import miou
from .networks import ModelConfig, ModelParams
from .tensor import NonFiniteError, Tensor, _result, backward, no_grad, sigmoid

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Optional[Path] = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    base_lr: float = 5e-4
    lr_milestones: Tuple[int, ...] = (50, 75)
    lr_decay: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0  # global-norm clip; 0 disables
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_milestones must be strictly increasing, got {list(ms)}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"lr_milestones must be < epochs ({self.epochs}), got {list(ms)}")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Base rate, multiplied by ``lr_decay`` at every milestone reached."""
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.base_lr * config.lr_decay ** passed


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def soft_iou_loss(pred_prob: Tensor, gt) -> Tensor:
    """1 - sum(p*g) / (sum(p) + sum(g) - sum(p*g)), pooled over the whole batch."""
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=pred_prob.dtype)
    p = pred_prob.data
    if p.shape != g.shape:
        raise ValueError(f"prediction dims {p.shape} != ground-truth dims {g.shape}")
    if p.min(initial=0.0) < 0 or p.max(initial=0.0) > 1 or g.min(initial=0.0) < 0 or g.max(initial=0.0) > 1:
        raise ValueError("soft_iou_loss inputs must lie in [0, 1]")
    inter = float((p * g).sum())
    union = float(p.sum()) + float(g.sum()) - inter
    if union <= 0.0:
        # both empty: perfect agreement
        return _result(np.asarray(0.0, dtype=p.dtype), (pred_prob,), lambda go: (np.zeros_like(p),), "soft_iou")
    loss = np.asarray(1.0 - inter / union, dtype=p.dtype)

    def bw(go):
        return (go * -(g * union - inter * (1.0 - g)) / (union * union),)

    return _result(loss, (pred_prob,), bw, "soft_iou")


def soft_iou_loss_logits(logits: Tensor, gt) -> Tensor:
    return soft_iou_loss(sigmoid(logits), gt)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; names missing from ``grads`` get zero gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    new_params, new_state = {}, AdamState(step=t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        new_params[name] = Tensor(data, requires_grad=p.requires_grad, name=name)
        new_state.m[name] = m.astype(p.dtype)
        new_state.v[name] = v.astype(p.dtype)
    return new_params, new_state


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# datasets and inference
# ---------------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Model inputs plus current-frame masks.

    ``inputs`` is [n,1,H,W] for sd2net or [n,N,1,H,W] for std2net; ``masks``
    is always [n,1,H,W].
    """

    inputs: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.masks):
            raise ValueError("inputs and masks differ in length")

    def __len__(self) -> int:
        return len(self.inputs)


def predict_probs(kind: str, params: ModelParams, config: ModelConfig, inputs: np.ndarray,
                  batch_size: int = 8) -> np.ndarray:
    dtype = next(iter(params.values())).dtype
    outs = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            x = Tensor(np.asarray(inputs[i:i + batch_size], dtype=dtype))
            outs.append(sigmoid(networks.forward(kind, x, params, config)).data)
    return np.concatenate(outs, axis=0)


def evaluate_miou(kind, params, config, dataset: ArrayDataset, threshold: float = 0.5) -> float:
    probs = predict_probs(kind, params, config, dataset.inputs)
    return miou(list(probs[:, 0] > threshold), list(dataset.masks[:, 0] > 0.5))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_miou: float
    seconds: float

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.6g} loss={self.loss:.6f} "
                f"val_miou={self.val_miou:.6f} seconds={self.seconds:.3f}")

    @classmethod
    def parse(cls, line: str) -> "EpochRecord":
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(int(kv["epoch"]), float(kv["lr"]), float(kv["loss"]), float(kv["val_miou"]),
                   float(kv.get("seconds", "nan")))


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_miou: float
    log: List[EpochRecord]
    adam: AdamState


@dataclass
class ResumeState:
    params: ModelParams
    adam: AdamState
    next_epoch: int
    best_params: ModelParams
    best_miou: float
    log: List[EpochRecord]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch, a pure function of (seed, epoch)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5F, int(epoch)])))
    return rng.permutation(n)


def train(model_kind: str, dataset: ArrayDataset, train_cfg: TrainConfig, model_cfg: ModelConfig,
          val_set: Optional[ArrayDataset] = None, resume: Optional[ResumeState] = None,
          on_epoch: Optional[Callable[["ResumeState"], None]] = None,
          dtype=np.float32, stop_after: Optional[int] = None,
          snapshot_path: Optional[Path] = None) -> TrainResult:
    """Train ``model_kind`` on ``dataset``; deterministic given the seeds.

    ``on_epoch`` receives the resumable state after every epoch (checkpointing).
    ``stop_after`` ends the run early after that many epochs (used to test resume).
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    if resume is None:
        params = networks.init_params(model_cfg, train_cfg.seed, model_kind, dtype)
        adam, start, log = AdamState(), 0, []
        best_params, best = networks.copy_params(params), -1.0
    else:
        params, adam, start = resume.params, resume.adam, resume.next_epoch
        best_params, best, log = resume.best_params, resume.best_miou, list(resume.log)
    trainable = set(networks.trainable_names(params, model_cfg, model_kind))
    for name, t in params.items():
        t.requires_grad = name in trainable

    n = len(dataset)
    end = train_cfg.epochs if stop_after is None else min(train_cfg.epochs, start + stop_after)
    for epoch in range(start, end):
        t0 = time.perf_counter()
        lr = lr_at(epoch, train_cfg)
        order = epoch_order(n, train_cfg.seed, epoch)
        losses = []
        for i in range(0, n, train_cfg.batch_size):
            idx = np.sort(order[i:i + train_cfg.batch_size])
            try:
                x = Tensor(dataset.inputs[idx].astype(dtype, copy=False))
                loss = soft_iou_loss_logits(networks.forward(model_kind, x, params, model_cfg),
                                            dataset.masks[idx].astype(dtype, copy=False))
            except NonFiniteError as exc:
                raise _diverged(str(exc), params, model_cfg, adam, snapshot_path) from exc
            if not np.isfinite(loss.data):
                raise _diverged("non-finite loss", params, model_cfg, adam, snapshot_path)
            for t in params.values():
                t.grad = None
            backward(loss)
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            clip_global_norm(grads, train_cfg.grad_clip)
            try:
                params, adam = adam_step(params, grads, adam, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
            except NonFiniteError as exc:
                raise _diverged(str(exc), params, model_cfg, adam, snapshot_path) from exc
            for name, t in params.items():
                t.requires_grad = name in trainable
            losses.append(float(loss.data))
        seconds = time.perf_counter() - t0
        val = evaluate_miou(model_kind, params, model_cfg, val_set, train_cfg.threshold) if val_set is not None else float("nan")
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), val, seconds)
        log.append(rec)
        logger.info(rec.line())
        score = val if val_set is not None else -rec.loss
        if score > best:
            best, best_params = score, networks.copy_params(params)
        if on_epoch is not None:
            on_epoch(ResumeState(params, adam, epoch + 1, best_params, best, log))
    return TrainResult(params, best_params, best, log, adam)


def _diverged(msg, params, cfg, adam, path) -> TrainingDiverged:
    if path is not None:
        from .io import save_checkpoint

        save_checkpoint(path, params, cfg, adam)
    return TrainingDiverged(f"training diverged: {msg}" + (f" (snapshot: {path})" if path else ""), path)
