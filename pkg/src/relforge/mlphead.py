"""Single-hidden-layer MLP head on last-token embeddings, trained with Adam.

Pure numpy, float64, hand-written backward pass.  Classification heads
output a logit and train with binary cross-entropy; regression heads are
linear, train with mean absolute error on z-scored targets and un-scale
their predictions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import auroc, mae

logger = logging.getLogger(__name__)

MODES = ("logit", "linear")


@dataclass
class MlpHead:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    output_mode: str = "logit"
    normalization: tuple[float, float] | None = None

    def __post_init__(self):
        if self.output_mode not in MODES:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h,):
            raise ValueError("inconsistent head shapes")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "MlpHead":
        return replace(self, w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": np.array(self.b2)}


def init_head(input_dim: int, hidden: int = 10, output_mode: str = "logit", seed: int = 0) -> MlpHead:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    if input_dim < 1 or hidden < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    a1 = math.sqrt(6.0 / (input_dim + hidden))
    a2 = math.sqrt(6.0 / (hidden + 1))
    w1 = rng.uniform(-a1, a1, size=(hidden, input_dim))
    w2 = rng.uniform(-a2, a2, size=hidden)
    return MlpHead(w1, np.zeros(hidden), w2, 0.0, output_mode)


def _as_batch(head: MlpHead, x) -> np.ndarray:
    X = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != head.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != head input dim {head.input_dim}")
    return X


def raw_output(head: MlpHead, X: np.ndarray) -> np.ndarray:
    X = _as_batch(head, X)
    hid = np.maximum(X @ head.w1.T + head.b1, 0.0)
    return hid @ head.w2 + head.b2


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def forward(head: MlpHead, x) -> float:
    """Score for one embedding: a probability (logit mode) or the raw output."""
    y = raw_output(head, x)[0]
    return float(_sigmoid(np.array(y))) if head.output_mode == "logit" else float(y)


def predict(head: MlpHead, X) -> np.ndarray:
    """Batch scores; linear heads are mapped back to the original target scale."""
    y = raw_output(head, X)
    if head.output_mode == "logit":
        return _sigmoid(y)
    if head.normalization is not None:
        mean, std = head.normalization
        y = y * std + mean
    return y


def loss_and_grad(head: MlpHead, X, t) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its gradient for every parameter.

    Logit mode uses binary cross-entropy written as softplus(z) - t*z;
    linear mode uses mean absolute error with subgradient 0 at zero error.
    Weight decay is not part of the loss.
    """
    X = _as_batch(head, X)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n == 0 or t.shape[0] != n:
        raise ValueError("batch must be non-empty with one target per input")
    pre = X @ head.w1.T + head.b1
    hid = np.maximum(pre, 0.0)
    z = hid @ head.w2 + head.b2
    if head.output_mode == "logit":
        loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
        dz = (_sigmoid(z) - t) / n
    else:
        loss = float(np.mean(np.abs(z - t)))
        dz = np.sign(z - t) / n
    dh = np.outer(dz, head.w2) * (pre > 0)
    grads = {
        "w1": dh.T @ X,
        "b1": dh.sum(axis=0),
        "w2": hid.T @ dz,
        "b2": np.array(dz.sum()),
    }
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 100
    weight_decay: float = 1e-3
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_train: int = 100_000
    max_val: int = 10_000
    normalize_targets: bool = True


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear decay from ``lr0`` at epoch 0 to 0 at ``cfg.epochs``."""
    return cfg.lr0 * (1.0 - epoch / cfg.epochs)


@dataclass
class HeadDataset:
    inputs: np.ndarray
    targets: np.ndarray
    normalization: tuple[float, float] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(
            [getattr(e, "values", e) for e in self.inputs] if not isinstance(self.inputs, np.ndarray) else self.inputs,
            dtype=np.float64,
        )
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs must be (n, dim) with one target per row")

    def __len__(self) -> int:
        return self.targets.shape[0]

    def subsample(self, cap: int, seed: int) -> "HeadDataset":
        if len(self) <= cap:
            return self
        idx = np.sort(np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF).choice(len(self), cap, replace=False))
        return HeadDataset(self.inputs[idx], self.targets[idx], self.normalization)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _val_metric(head: MlpHead, val: HeadDataset) -> float:
    preds = predict(head, val.inputs)
    if head.output_mode == "logit":
        labels = val.targets.astype(int)
        if labels.min() == labels.max():
            # one class only: rank is meaningless, fall back to negative BCE
            p = np.clip(preds, 1e-12, 1 - 1e-12)
            return float(np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))
        return auroc(preds, labels)
    return mae(preds, val.targets)


def _better(a: float, b: float, mode: str) -> bool:
    return a > b if mode == "logit" else a < b


def train(
    head: MlpHead,
    data: HeadDataset,
    cfg: TrainConfig = TrainConfig(),
    val: HeadDataset | None = None,
) -> tuple[MlpHead, TrainHistory]:
    """Adam with decoupled weight decay and a linearly decaying learning rate.

    Returns the parameters of the epoch with the best validation metric
    (AUROC up, MAE down; the earliest epoch wins ties), or of the last epoch
    when no validation data is given.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if len(data) > cfg.max_train:
        raise ValueError(f"training set has {len(data)} rows, cap is {cfg.max_train}")
    if val is not None:
        val = val.subsample(cfg.max_val, cfg.seed + 1)

    head = head.copy()
    targets = data.targets
    if head.output_mode == "linear" and cfg.normalize_targets:
        mean = float(targets.mean())
        std = float(targets.std()) or 1.0
        head.normalization = (mean, std)
        targets = (targets - mean) / std
    else:
        head.normalization = None

    rng = np.random.default_rng(int(cfg.seed) & 0xFFFF_FFFF_FFFF_FFFF)
    names = ("w1", "b1", "w2", "b2")
    params = {k: np.array(v, dtype=np.float64) for k, v in head.arrays().items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    step = 0

    def current() -> MlpHead:
        return MlpHead(params["w1"].copy(), params["b1"].copy(), params["w2"].copy(),
                       float(params["b2"]), head.output_mode, head.normalization)

    hist = TrainHistory()
    best: MlpHead | None = None
    best_score = None
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            probe = MlpHead(params["w1"], params["b1"], params["w2"], float(params["b2"]), head.output_mode)
            loss, grads = loss_and_grad(probe, data.inputs[idx], targets[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            losses.append(loss * len(idx))
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for k in names:
                g = grads[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v2[k] = b2 * v2[k] + (1 - b2) * g * g
                params[k] = params[k] * (1.0 - lr * cfg.weight_decay)
                params[k] = params[k] - lr * (m[k] / c1) / (np.sqrt(v2[k] / c2) + eps)
        hist.train_loss.append(math.fsum(losses) / n)
        hist.lr.append(lr)
        if val is not None and len(val):
            score = _val_metric(current(), val)
            hist.val_metric.append(score)
            if best_score is None or _better(score, best_score, head.output_mode):
                best_score, best, hist.best_epoch = score, current(), epoch
    if best is None:
        best, hist.best_epoch = current(), cfg.epochs - 1
    return best, hist


def save_head(head: MlpHead, path: str | Path) -> None:
    doc = {
        "input_dim": head.input_dim,
        "hidden": head.hidden,
        "output_mode": head.output_mode,
        "normalization": list(head.normalization) if head.normalization is not None else None,
        "w1": head.w1.reshape(-1).tolist(),
        "b1": head.b1.tolist(),
        "w2": head.w2.tolist(),
        "b2": float(head.b2),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_head(path: str | Path) -> MlpHead:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    d, h = int(doc["input_dim"]), int(doc["hidden"])
    norm = doc.get("normalization")
    return MlpHead(
        np.asarray(doc["w1"], dtype=np.float64).reshape(h, d),
        np.asarray(doc["b1"], dtype=np.float64),
        np.asarray(doc["w2"], dtype=np.float64),
        float(doc["b2"]),
        doc["output_mode"],
        tuple(norm) if norm is not None else None,
    )


def embeddings_dataset(embeddings: Sequence, targets: Sequence[float]) -> HeadDataset:
    return HeadDataset(np.stack([np.asarray(getattr(e, "values", e), dtype=np.float64) for e in embeddings]), targets)
