"""Fast scoring path: a linear softmax classifier over essay embeddings.

Trained from scratch with seeded mini-batch gradient descent on multinomial
cross-entropy. predict() returns the full per-class probability vector; the
max probability is treated as the confidence scalar that drives routing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import IntegrityError, FormatVersionError, TrainingDiverged

MODEL_MAGIC = b"DGFM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class FastTrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 42
    early_stop_patience: int = 5
    validation_fraction: float = 0.1
    class_weighting: bool = False

    def __post_init__(self):
        positive = {"learning_rate": self.learning_rate, "epochs": self.epochs,
                    "batch_size": self.batch_size,
                    "early_stop_patience": self.early_stop_patience,
                    "validation_fraction": self.validation_fraction}
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.validation_fraction >= 1:
            raise ValueError("validation_fraction must be < 1")


@dataclass(frozen=True)
class TrainingMeta:
    epochs_run: int
    learning_rate: float
    seed: int
    final_loss: float
    loss_history: tuple[float, ...] = ()
    val_loss_history: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {"epochs_run": self.epochs_run, "learning_rate": self.learning_rate,
                "seed": self.seed, "final_loss": self.final_loss,
                "loss_history": list(self.loss_history),
                "val_loss_history": list(self.val_loss_history)}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingMeta":
        return cls(epochs_run=obj["epochs_run"], learning_rate=obj["learning_rate"],
                   seed=obj["seed"], final_loss=obj["final_loss"],
                   loss_history=tuple(obj.get("loss_history", ())),
                   val_loss_history=tuple(obj.get("val_loss_history", ())))


@dataclass(frozen=True)
class ScoreDistribution:
    probabilities: tuple[float, ...]
    predicted_class: int
    predicted_score: int
    confidence: float


@dataclass(frozen=True)
class FastModel:
    weights: np.ndarray  # (classes, embedding_dim)
    bias: np.ndarray  # (classes,)
    score_range: tuple[int, int]
    training_meta: Optional[TrainingMeta] = None

    def __post_init__(self):
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("model parameters must be finite")
        if self.weights.shape[0] != self.class_count:
            raise ValueError(
                f"weights have {self.weights.shape[0]} rows, range implies "
                f"{self.class_count} classes")
        self.weights.setflags(write=False)
        self.bias.setflags(write=False)

    @property
    def class_count(self) -> int:
        return self.score_range[1] - self.score_range[0] + 1

    @property
    def embedding_dim(self) -> int:
        return self.weights.shape[1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def predict(model: FastModel, embedding: Sequence[float]) -> ScoreDistribution:
    x = np.asarray(embedding, dtype=float)
    if x.shape != (model.embedding_dim,):
        raise ValueError(f"embedding has shape {x.shape}, model expects "
                         f"({model.embedding_dim},)")
    probs = _softmax(model.weights @ x + model.bias)
    cls = int(np.argmax(probs))
    return ScoreDistribution(
        probabilities=tuple(float(p) for p in probs),
        predicted_class=cls,
        predicted_score=cls + model.score_range[0],
        confidence=float(probs[cls]),
    )


def predict_batch(model: FastModel, embeddings: np.ndarray) -> list[ScoreDistribution]:
    return [predict(model, row) for row in np.asarray(embeddings, dtype=float)]


def _cross_entropy(weights: np.ndarray, bias: np.ndarray, x: np.ndarray,
                   y: np.ndarray, sample_weights: Optional[np.ndarray] = None) -> float:
    probs = _softmax(x @ weights.T + bias)
    picked = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    losses = -np.log(picked)
    if sample_weights is not None:
        return float((losses * sample_weights).sum() / sample_weights.sum())
    return float(losses.mean())


def train(embeddings: Sequence[Sequence[float]], labels: Sequence[int],
          score_range: tuple[int, int],
          config: FastTrainConfig = FastTrainConfig()) -> FastModel:
    """Seeded mini-batch gradient descent on softmax cross-entropy.

    Early-stops when validation loss has not improved for
    ``early_stop_patience`` epochs, restoring the best parameters seen.
    With too little data for a validation split, training loss is monitored
    instead.
    """
    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels, dtype=int)
    if x.ndim != 2 or len(x) == 0 or len(x) != len(y):
        raise ValueError("embeddings and labels must be aligned and nonempty")
    n_classes = score_range[1] - score_range[0] + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0,{n_classes}), got "
                         f"[{y.min()},{y.max()}]")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = int(len(x) * config.validation_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx, val_idx = order, order[:0]
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]

    sample_weights = None
    if config.class_weighting:
        counts = np.bincount(y_train, minlength=n_classes).astype(float)
        inverse = np.where(counts > 0, 1.0 / np.clip(counts, 1, None), 0.0)
        sample_weights = inverse[y_train]

    dim = x.shape[1]
    weights = np.zeros((n_classes, dim))
    bias = np.zeros(n_classes)
    best = (weights.copy(), bias.copy())
    best_monitor = np.inf
    stale = 0
    loss_history: list[float] = []
    val_loss_history: list[float] = []
    epochs_run = 0

    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        perm = rng.permutation(len(x_train))
        for start in range(0, len(x_train), config.batch_size):
            batch = perm[start:start + config.batch_size]
            xb, yb = x_train[batch], y_train[batch]
            probs = _softmax(xb @ weights.T + bias)
            grad_logits = probs
            grad_logits[np.arange(len(yb)), yb] -= 1.0
            if sample_weights is not None:
                w = sample_weights[batch][:, None]
                grad_logits = grad_logits * w / w.mean()
            grad_w = grad_logits.T @ xb / len(yb)
            grad_b = grad_logits.mean(axis=0)
            weights -= config.learning_rate * grad_w
            bias -= config.learning_rate * grad_b
        train_loss = _cross_entropy(weights, bias, x_train, y_train, sample_weights)
        if not np.isfinite(train_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch=epoch)
        loss_history.append(train_loss)
        if len(x_val):
            val_loss = _cross_entropy(weights, bias, x_val, y_val)
            val_loss_history.append(val_loss)
            monitor = val_loss
        else:
            monitor = train_loss
        if monitor < best_monitor - 1e-12:
            best_monitor = monitor
            best = (weights.copy(), bias.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    weights, bias = best
    final_loss = _cross_entropy(weights, bias, x_train, y_train, sample_weights)
    meta = TrainingMeta(epochs_run=epochs_run, learning_rate=config.learning_rate,
                        seed=config.seed, final_loss=final_loss,
                        loss_history=tuple(loss_history),
                        val_loss_history=tuple(val_loss_history))
    return FastModel(weights=weights, bias=bias, score_range=score_range,
                     training_meta=meta)


def gradient_check(model: FastModel, sample: tuple[Sequence[float], int],
                   step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of the single-sample cross-entropy over all parameters."""
    x = np.asarray(sample[0], dtype=float).reshape(1, -1)
    y = np.asarray([sample[1]], dtype=int)
    weights = np.array(model.weights, dtype=float)
    bias = np.array(model.bias, dtype=float)

    probs = _softmax(x @ weights.T + bias)
    grad_logits = probs.copy()
    grad_logits[0, y[0]] -= 1.0
    analytic_w = grad_logits.T @ x
    analytic_b = grad_logits[0]

    worst = 0.0

    def rel_err(analytic: float, numeric: float) -> float:
        return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)

    for i in range(weights.shape[0]):
        for j in range(weights.shape[1]):
            original = weights[i, j]
            weights[i, j] = original + step
            up = _cross_entropy(weights, bias, x, y)
            weights[i, j] = original - step
            down = _cross_entropy(weights, bias, x, y)
            weights[i, j] = original
            numeric = (up - down) / (2 * step)
            worst = max(worst, rel_err(analytic_w[i, j], numeric))
    for i in range(bias.shape[0]):
        original = bias[i]
        bias[i] = original + step
        up = _cross_entropy(weights, bias, x, y)
        bias[i] = original - step
        down = _cross_entropy(weights, bias, x, y)
        bias[i] = original
        numeric = (up - down) / (2 * step)
        worst = max(worst, rel_err(analytic_b[i], numeric))
    return worst


def save(model: FastModel, path: Union[str, Path]) -> None:
    """Versioned binary layout: magic, version, dims, range, meta JSON,
    little-endian float64 weights then bias, trailing sha256."""
    meta = json.dumps(model.training_meta.to_json()
                      if model.training_meta else None).encode("utf-8")
    header = struct.pack(
        "<4sIIIiiI", MODEL_MAGIC, MODEL_VERSION, model.class_count,
        model.embedding_dim, model.score_range[0], model.score_range[1], len(meta))
    payload = (header + meta
               + np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
               + np.ascontiguousarray(model.bias, dtype="<f8").tobytes())
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(payload + digest)


def load(path: Union[str, Path]) -> FastModel:
    blob = Path(path).read_bytes()
    header_size = struct.calcsize("<4sIIIiiI")
    if len(blob) < header_size + 32:
        raise IntegrityError(f"{path}: file truncated")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    magic, version, n_classes, dim, lo, hi, meta_len = struct.unpack(
        "<4sIIIiiI", payload[:header_size])
    if magic != MODEL_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatVersionError(
            f"{path}: file version {version}, supported version {MODEL_VERSION}")
    offset = header_size
    meta_obj = json.loads(payload[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    w_bytes = n_classes * dim * 8
    weights = np.frombuffer(payload[offset:offset + w_bytes],
                            dtype="<f8").reshape(n_classes, dim).copy()
    offset += w_bytes
    bias = np.frombuffer(payload[offset:offset + n_classes * 8], dtype="<f8").copy()
    meta = TrainingMeta.from_json(meta_obj) if meta_obj else None
    return FastModel(weights=weights, bias=bias, score_range=(lo, hi),
                     training_meta=meta)
