"""Loss, SGD with step-decayed learning rate, epoch loop and OA/AA/Kappa."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .autograd import backward
from .data import encode_direct
from .errors import DataError, TrainingError
from .network import NetworkSpec, forward_record, init_params, predict_logits
from .neuron import SurrogateSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    The rate starts at ``learning_rate`` and is multiplied by
    ``lr_decay_factor`` every ``lr_decay_every`` epochs.
    """

    learning_rate: float = 0.085
    lr_decay_every: int = 25
    lr_decay_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    loss: str = "cross_entropy"
    validation_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.surrogate, dict):
            object.__setattr__(self, "surrogate", SurrogateSpec(**self.surrogate))
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be non-negative")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise TrainingError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1 or self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("lr_decay_every, epochs and batch_size must be >= 1")
        if self.loss not in ("cross_entropy", "mse"):
            raise TrainingError(f"unknown loss {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def _softmax(logits):
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, true_class):
    """Softmax cross-entropy. ``true_class`` is a 0-based index (or array of them
    for a batch, in which case the loss is the batch mean).

    Returns ``(loss, d_logits)``.
    """
    logits = np.asarray(logits, np.float64)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(true_class))
    p = _softmax(z)
    n = len(z)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def mse_loss(logits, true_class):
    """Mean squared error between the readout and a one-hot target."""
    logits = np.asarray(logits, np.float64)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(true_class))
    target = np.zeros_like(z)
    target[np.arange(len(z)), y] = 1.0
    diff = z - target
    loss = float(np.mean(np.sum(diff ** 2, axis=1)))
    grad = 2.0 * diff / len(z)
    return loss, (grad[0] if single else grad)


LOSSES = {"cross_entropy": cross_entropy_loss, "mse": mse_loss}


def sgd_step(params, grads, velocity, cfg: TrainConfig, epoch: int):
    """Classical momentum: ``v <- m v + g``, ``p <- p - lr v``. Updates in place.

    Raises TrainingError naming the parameter on a non-finite gradient or an
    update that overflows the storage dtype.
    """
    lr = cfg.lr_at(epoch)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape}", name)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", name)
        v = velocity.get(name)
        v = g.astype(np.float64) if v is None else cfg.momentum * v + g
        velocity[name] = v
        with np.errstate(over="ignore"):
            p -= (lr * v).astype(p.dtype)
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"parameter {name} overflowed after the update", name)
    return params, velocity


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class_accuracy: np.ndarray


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    oa = np.trace(c) / total
    support = c.sum(axis=1)
    recall = np.divide(np.diag(c), support, out=np.zeros(len(c)), where=support > 0)
    aa = float(recall[support > 0].mean())
    pe = float(np.sum(support * c.sum(axis=0))) / total ** 2
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return Metrics(float(oa), aa, float(kappa), recall)


def evaluate(predictions, truths, num_classes: int):
    """Confusion matrix and OA/AA/Kappa for 1-based class labels."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(truths, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise DataError("predictions and truths differ in length")
    for arr in (pred, true):
        if arr.size and (arr.min() < 1 or arr.max() > num_classes):
            raise DataError(f"labels must lie in 1..{num_classes}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true - 1, pred - 1), 1)
    cm = ConfusionMatrix(counts)
    return cm, metrics_from_confusion(cm)


def classify(net: NetworkSpec, params, patches, batch_size=64) -> np.ndarray:
    """1-based class predictions for a stack of patches."""
    return np.argmax(predict_logits(net, params, patches, batch_size), axis=1) + 1


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    oa: float
    aa: float
    kappa: float

    FIELDS = ("epoch", "lr", "loss", "oa", "aa", "kappa")

    def row(self):
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TrainResult:
    params: dict
    history: list
    best_epoch: int
    init_params: dict


def train(net: NetworkSpec, train_patches, train_labels, cfg: TrainConfig,
          val_patches=None, val_labels=None, on_epoch=None) -> TrainResult:
    """Mini-batch BPTT training; returns the parameters of the best validation epoch.

    Labels are 1-based. Without an explicit validation set, the final
    ``validation_fraction`` of the training samples is held out. All
    randomness (init, hold-out, shuffling) derives from ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(train_patches, np.float32)
    y = np.asarray(train_labels, np.int64)
    if val_patches is None:
        n_val = int(round(cfg.validation_fraction * len(x)))
        if n_val >= 1 and len(x) - n_val >= 1:
            x, val_patches = x[:-n_val], x[-n_val:]
            y, val_labels = y[:-n_val], y[-n_val:]
        else:
            val_patches, val_labels = x, y
    loss_fn = LOSSES[cfg.loss]

    params = init_params(net, rng)
    initial = {k: v.copy() for k, v in params.items()}
    velocity = {}
    history = []
    best = (-1.0, -1, {k: v.copy() for k, v in params.items()})
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, tape = forward_record(net, params, encode_direct(x[idx], net.time_steps))
            loss, d_logits = loss_fn(logits, y[idx] - 1)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            grads = backward(tape, d_logits, cfg.surrogate)
            sgd_step(params, grads, velocity, cfg, epoch)
            losses.append(loss * len(idx))
        mean_loss = float(np.sum(losses) / len(x))
        _, m = evaluate(classify(net, params, val_patches), val_labels, net.num_classes)
        rec = EpochRecord(epoch, cfg.lr_at(epoch), mean_loss, m.oa, m.aa, m.kappa)
        history.append(rec)
        log.info("epoch %d lr %.4g loss %.4f val OA %.4f", epoch, rec.lr, mean_loss, m.oa)
        if on_epoch is not None:
            on_epoch(rec)
        if m.oa > best[0]:
            best = (m.oa, epoch, {k: v.copy() for k, v in params.items()})
    return TrainResult(best[2], history, best[1], initial)
