"""Loss, optimiser, training loop and evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from stam.autodiff import Tensor, backward, no_grad, ops
from stam.data.dataset import WINDOWS, TactileDataset
from stam.errors import ConfigurationError, ContractError
from stam.model.forward import model_forward, predict_label
from stam.model.params import VARIANTS, ModelConfig, StamParams, init_params

logger = logging.getLogger(__name__)


def cross_entropy_loss(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``; a batch of logits gives the batch mean."""
    return ops.cross_entropy(logits, label)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, momentum: float,
             velocity: Optional[Sequence[np.ndarray]] = None):
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Pure: returns new parameter and velocity lists, inputs are untouched.
    """
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    if len(velocity) != len(params):
        raise ContractError("velocity state differs in length from params")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        p, g, v = np.asarray(p), np.asarray(g), np.asarray(v)
        if p.shape != g.shape or p.shape != v.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    n: int = 4
    window: str = "from_onset"
    variant: str = "full-stam"
    n_heads: int = 10
    patience: int = 10
    widths: tuple[int, ...] = (8, 16, 32)
    head_dim: Optional[int] = None
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.window not in WINDOWS:
            raise ConfigurationError(f"window must be one of {WINDOWS}")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.n < 1:
            raise ConfigurationError("batch_size, epochs, patience and n must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("need lr >= 0 and 0 <= momentum < 1")

    def model_config(self, n_classes: int, frame_size: tuple[int, int]) -> ModelConfig:
        return ModelConfig(n_frames=self.n, frame_size=frame_size, n_classes=n_classes,
                           widths=self.widths, n_heads=self.n_heads, head_dim=self.head_dim,
                           variant=self.variant, hidden=self.hidden)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainResult:
    params: StamParams
    history: list[EpochMetrics]
    best_epoch: int
    initial_loss: float
    epochs_run: int = 0
    seconds: float = 0.0


def predict_logits(params: StamParams, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits ``[B, K]`` for a stack of windows ``[B, n, H, W, 1]`` without recording a graph."""
    out = []
    with no_grad():
        for start in range(0, len(frames), batch_size):
            out.append(model_forward(frames[start:start + batch_size], params).data)
    if not out:
        return np.zeros((0, params.config.n_classes))
    return np.concatenate(out)


def confusion_matrix(labels: np.ndarray, predicted: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(predicted, dtype=int)), 1)
    return cm


def evaluate_arrays(params: StamParams, frames: np.ndarray, labels: np.ndarray):
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    if len(frames) == 0:
        raise ContractError("cannot evaluate an empty split")
    predicted = predict_label(predict_logits(params, frames))
    k = params.config.n_classes
    return float(np.mean(predicted == labels)), confusion_matrix(labels, predicted, k)


def evaluate(params: StamParams, dataset: TactileDataset, split: str, config: TrainConfig):
    frames, labels, _, _ = dataset.windows(dataset.ids(split), config.window, config.n)
    return evaluate_arrays(params, frames, labels)


def mean_loss(params: StamParams, frames: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a stack of windows, without recording a graph."""
    logits = predict_logits(params, frames)
    with no_grad():
        return float(ops.cross_entropy(Tensor(logits), labels).data)


def fit_arrays(model_config: ModelConfig, train_x: np.ndarray, train_y: np.ndarray,
               val_x: Optional[np.ndarray], val_y: Optional[np.ndarray], config: TrainConfig,
               params: Optional[StamParams] = None) -> TrainResult:
    """Mini-batch SGD with best-validation model selection and early stopping.

    Without validation data the final epoch's parameters are returned. The
    shuffle order and initial weights are derived from ``config.seed`` only.
    """
    if len(train_x) == 0:
        raise ConfigurationError("empty training split")
    has_val = val_x is not None and len(val_x) > 0
    started = time.perf_counter()
    params = params if params is not None else init_params(model_config, config.seed)
    rng = np.random.default_rng([config.seed, 17])
    tensors = params.tensors()
    velocity = [np.zeros_like(t.data) for t in tensors]
    initial_loss = mean_loss(params, train_x, train_y)
    best = (-1.0, 0, params.copy())
    history: list[EpochMetrics] = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_x))
        losses, hits = [], 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params.zero_grad()
            logits = model_forward(train_x[idx], params)
            loss = cross_entropy_loss(logits, train_y[idx])
            backward(loss)
            new_p, velocity = sgd_step([t.data for t in tensors], [t.grad for t in tensors],
                                       config.lr, config.momentum, velocity)
            for t, p in zip(tensors, new_p):
                t.data = p
            losses.append(float(loss.data) * len(idx))
            hits += int(np.sum(predict_label(logits.data) == train_y[idx]))
        train_loss = float(np.sum(losses) / len(order))
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        val_acc = evaluate_arrays(params, val_x, val_y)[0] if has_val else float("nan")
        history.append(EpochMetrics(epoch, train_loss, hits / len(order), val_acc,
                                    time.perf_counter() - t0))
        logger.debug("epoch %d loss %.4f train %.3f val %.3f", epoch, train_loss,
                     hits / len(order), val_acc)
        if not has_val or val_acc > best[0]:
            best = (val_acc, epoch, params.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    params.zero_grad()
    return TrainResult(best[2], history, best[1], initial_loss, len(history),
                       time.perf_counter() - started)


def train(config: TrainConfig, dataset: TactileDataset) -> TrainResult:
    """Train on the ``train`` split, select on ``val``; windows follow ``config.window``."""
    splits = {}
    for split in ("train", "val"):
        frames, labels, _, _ = dataset.windows(dataset.ids(split), config.window, config.n)
        if len(frames) == 0:
            raise ConfigurationError(f"{split} split is empty for n={config.n}, window={config.window}")
        splits[split] = (frames, labels)
    model_config = config.model_config(dataset.manifest.n_classes, dataset.manifest.frame_size)
    return fit_arrays(model_config, *splits["train"], *splits["val"], config)
