"""Cross-entropy objective, Adam, and the epoch loop.

The loss is computed from logits with a max-shifted log-sum-exp; explicit
probabilities never enter it. The optimizer is plain bias-corrected Adam
with no schedule, no weight decay and no clipping. Batches come from a
seeded shuffler and the final ragged batch is trained on. Validation runs
with frozen parameters after every epoch; the parameters with the lowest
validation loss so far are kept as the best checkpoint.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backend
from . import tensor as tt
from .metrics import ConfusionMatrix, summarize
from .model import ModelConfig, ModelParams, forward
from .tensor import Tensor


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries epoch/batch diagnostics."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 65
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    x = logits.data
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValueError(
            f"logits {logits.shape} and labels {labels.shape} do not line up")
    k = x.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    n = x.shape[0]
    rows = np.arange(n)
    lse = backend.logsumexp_rows(x)
    losses = lse.astype(np.float64) - x[rows, labels].astype(np.float64)
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def backward_fn(g):
        dx = backend.softmax_rows(x).astype(np.float64)
        dx[rows, labels] -= 1.0
        dx *= float(g) / n
        return (dx.astype(logits.dtype).reshape(logits.shape),)

    return tt.record_op(out, (logits,), backward_fn)


class Adam:
    """Bias-corrected Adam over a ModelParams; state shapes mirror the params."""

    def __init__(self, params: ModelParams, learning_rate=0.001, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg: TrainConfig):
        return cls(params, learning_rate=cfg.learning_rate, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.adam_eps)

    def step(self, params: ModelParams):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"no gradient for parameter {name!r}")
            backend.adam_update(p.data.reshape(-1), p.grad.reshape(-1),
                                self.m[name].reshape(-1), self.v[name].reshape(-1),
                                self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)


def batch_indices(n, batch_size, rng):
    """Seeded shuffle split into batches; the last one may be ragged."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(params: ModelParams, model_cfg: ModelConfig, x, y,
                optimizer: Adam, batch_size, rng, epoch=0) -> float:
    """One pass of shuffled mini-batch updates; returns per-sample mean loss."""
    total = 0.0
    for b, idx in enumerate(batch_indices(len(x), batch_size, rng)):
        xb = Tensor(x[idx])
        params.zero_grad()
        with tt.tape() as tp:
            res = forward(xb, params, model_cfg)
            loss = cross_entropy(res.logits, y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b}")
            tp.backward(loss)
        optimizer.step(params)
        total += value * len(idx)
    return total / len(x)


def _eval_chunk(params, model_cfg, x, y, idx):
    res = forward(Tensor(x[idx]), params, model_cfg)
    loss = cross_entropy(res.logits, y[idx]).item()
    preds = np.argmax(res.logits.data, axis=1)  # ties resolve to the lowest id
    return loss * len(idx), y[idx], preds


def evaluate(params: ModelParams, model_cfg: ModelConfig, x, y,
             batch_size=256, workers=1):
    """Frozen-parameter pass; returns (mean loss, ConfusionMatrix)."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    chunks = [np.arange(i, min(i + batch_size, len(x)))
              for i in range(0, len(x), batch_size)]
    cm = ConfusionMatrix(model_cfg.num_classes)
    total = 0.0
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda idx: _eval_chunk(params, model_cfg, x, y, idx), chunks))
    else:
        results = [_eval_chunk(params, model_cfg, x, y, idx) for idx in chunks]
    # merge in chunk order so the reduction is deterministic
    for loss_sum, truths, preds in results:
        total += loss_sum
        cm.update_batch(truths, preds)
    return total / len(x), cm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_macro_precision: float
    val_macro_recall: float
    val_macro_f1: float

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "val_macro_precision": self.val_macro_precision,
            "val_macro_recall": self.val_macro_recall,
            "val_macro_f1": self.val_macro_f1,
        }


@dataclass
class FitResult:
    records: list
    best_params: ModelParams
    best_epoch: int
    final_confusion: ConfusionMatrix


def fit(params: ModelParams, model_cfg: ModelConfig, train_cfg: TrainConfig,
        x_train, y_train, x_val, y_val, workers=1, on_epoch=None) -> FitResult:
    """Full training run; one EpochRecord per epoch, best-val params kept."""
    optimizer = Adam.from_config(params, train_cfg)
    rng = np.random.default_rng([train_cfg.seed, 1])
    records = []
    best_loss = np.inf
    best_params = params.copy()
    best_epoch = 0
    cm = None
    for epoch in range(train_cfg.epochs):
        train_loss = train_epoch(params, model_cfg, x_train, y_train, optimizer,
                                 train_cfg.batch_size, rng, epoch=epoch)
        val_loss, cm = evaluate(params, model_cfg, x_val, y_val, workers=workers)
        s = summarize(cm)
        rec = EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                          val_accuracy=s.accuracy,
                          val_macro_precision=s.macro_precision,
                          val_macro_recall=s.macro_recall,
                          val_macro_f1=s.macro_f1)
        records.append(rec)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
            best_epoch = epoch
        if on_epoch is not None:
            on_epoch(rec)
    return FitResult(records=records, best_params=best_params,
                     best_epoch=best_epoch, final_confusion=cm)
