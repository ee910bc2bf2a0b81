"""Cross-entropy training with step-decayed learning rate, validation-based
model selection, and confusion-matrix evaluation metrics (Micro/Macro-F1,
per-class fault diagnosis rate and false positive rate)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import WindowedDataset
from .model import AMTFNetParams, forward, fused_features
from .tensor import Tensor, no_grad

__all__ = [
    "NumericError",
    "TrainConfig",
    "ConfusionMatrix",
    "EvalReport",
    "TrainReport",
    "cross_entropy",
    "lr_schedule",
    "AdamOptimizer",
    "SgdMomentumOptimizer",
    "make_optimizer",
    "train",
    "evaluate",
    "export_features",
]

LOG_CLAMP = 1e-12


class NumericError(RuntimeError):
    """Training ran into non-finite losses or gradients."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters. Defaults: 30 epochs, batch 512, initial
    lr 0.01 decayed by 0.3 every 3 epochs, Adam, best model selected by
    validation micro-F1."""

    epochs: int = 30
    batch_size: int = 512
    initial_lr: float = 0.01
    decay_factor: float = 0.3
    decay_every: int = 3
    optimizer: str = "adam"
    seed: int = 0
    selection_metric: str = "micro_f1"

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.decay_every) < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")
        if self.initial_lr <= 0 or self.decay_factor <= 0:
            raise ValueError("initial_lr and decay_factor must be positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.selection_metric != "micro_f1":
            raise ValueError(f"unsupported selection metric {self.selection_metric!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epochs", "batch_size", "initial_lr", "decay_factor", "decay_every",
            "optimizer", "seed", "selection_metric")}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """lr = initial_lr * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.initial_lr * config.decay_factor ** (epoch // config.decay_every)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Summed negative log-likelihood of the true classes (sum over the
    batch, not the mean). The log argument is clamped at 1e-12; the gradient
    uses the clamped probability, capping its magnitude.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    p2 = probs.data.reshape(-1, probs.shape[-1]) if probs.data.ndim > 1 \
        else probs.data.reshape(1, -1)
    n, num_classes = p2.shape
    if labels.shape != (n,):
        raise ValueError(f"got {labels.shape[0]} labels for {n} probability rows")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label out of range [0, {num_classes}): {labels[(labels < 0) | (labels >= num_classes)][0]}")
    picked = np.maximum(p2[np.arange(n), labels], LOG_CLAMP)
    loss = -np.log(picked).sum()

    def rule(g, probs=probs, labels=labels, picked=picked, shape=p2.shape):
        gp = np.zeros(shape)
        gp[np.arange(shape[0]), labels] = -float(g) / picked
        probs._accumulate(gp.reshape(probs.data.shape))

    return Tensor._make(np.asarray(loss), (probs,), rule)


# -- metrics ------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """L x L counts; rows are real classes, columns inferred classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_predictions(cls, real, inferred, num_classes: int) -> "ConfusionMatrix":
        cm = cls.empty(num_classes)
        cm.add(real, inferred)
        return cm

    def add(self, real, inferred) -> None:
        real = np.asarray(real, dtype=np.int64)
        inferred = np.asarray(inferred, dtype=np.int64)
        np.add.at(self.counts, (real, inferred), 1)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self, l: int) -> int:
        return int(self.counts[l, l])

    def fn(self, l: int) -> int:
        return int(self.counts[l].sum() - self.counts[l, l])

    def fp(self, l: int) -> int:
        return int(self.counts[:, l].sum() - self.counts[l, l])

    def tn(self, l: int) -> int:
        return self.total - self.tp(l) - self.fn(l) - self.fp(l)


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def micro_f1(cm: ConfusionMatrix) -> float:
    tp = sum(cm.tp(l) for l in range(cm.num_classes))
    fp = sum(cm.fp(l) for l in range(cm.num_classes))
    fn = sum(cm.fn(l) for l in range(cm.num_classes))
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return _safe_div(2 * precision * recall, precision + recall)


def class_f1(cm: ConfusionMatrix, l: int) -> float:
    precision = _safe_div(cm.tp(l), cm.tp(l) + cm.fp(l))
    recall = _safe_div(cm.tp(l), cm.tp(l) + cm.fn(l))
    return _safe_div(2 * precision * recall, precision + recall)


def macro_f1(cm: ConfusionMatrix) -> float:
    # classes with no predicted and no actual positives count as F1 = 0
    return sum(class_f1(cm, l) for l in range(cm.num_classes)) / cm.num_classes


def fdr(cm: ConfusionMatrix, l: int) -> float:
    """Fault diagnosis rate: fraction of real class-l samples inferred as l."""
    return _safe_div(cm.tp(l), cm.tp(l) + cm.fn(l))


def fpr(cm: ConfusionMatrix, l: int) -> float:
    """False positive rate: fraction of non-l samples inferred as l."""
    return _safe_div(cm.fp(l), cm.fp(l) + cm.tn(l))


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    micro_f1: float
    macro_f1: float
    per_class: list[dict]
    avg_fdr: float
    avg_fpr: float
    n_samples: int

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "EvalReport":
        per_class = [
            {"class": l, "fdr": fdr(cm, l), "fpr": fpr(cm, l), "f1": class_f1(cm, l)}
            for l in range(cm.num_classes)
        ]
        return cls(
            confusion=cm,
            micro_f1=micro_f1(cm),
            macro_f1=macro_f1(cm),
            per_class=per_class,
            avg_fdr=sum(r["fdr"] for r in per_class) / cm.num_classes,
            avg_fpr=sum(r["fpr"] for r in per_class) / cm.num_classes,
            n_samples=cm.total,
        )

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "avg_fdr": self.avg_fdr,
            "avg_fpr": self.avg_fpr,
            "per_class": self.per_class,
            "confusion_matrix": self.confusion.counts.tolist(),
        }

    def write_per_class_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("class,fdr,fpr,f1\n")
            for row in self.per_class:
                fh.write(f"{row['class']},{row['fdr']!r},{row['fpr']!r},{row['f1']!r}\n")


# -- optimizers ------------------------------------------------------------------------


class AdamOptimizer:
    """Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        for name, p in tensors.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.isfinite(p.data).all():
                raise NumericError(f"parameter {name!r} diverged to non-finite values")


class SgdMomentumOptimizer:
    """Heavy-ball update: v <- mu*v - lr*g; p <- p + v."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, Tensor], lr: float) -> None:
        for name, p in tensors.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            vel = self.velocity.setdefault(name, np.zeros_like(p.data))
            vel *= self.momentum
            vel -= lr * g
            p.data += vel
            if not np.isfinite(p.data).all():
                raise NumericError(f"parameter {name!r} diverged to non-finite values")


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return AdamOptimizer()
    return SgdMomentumOptimizer()


# -- training loop -----------------------------------------------------------------------


@dataclass
class TrainReport:
    epoch_losses: list[float]
    val_scores: list[float]
    lrs: list[float]
    best_epoch: int
    best_val_score: float
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "val_micro_f1": self.val_scores,
            "learning_rates": self.lrs,
            "best_epoch": self.best_epoch,
            "best_val_micro_f1": self.best_val_score,
        }


def _batch_tensor(ds: WindowedDataset, indices: np.ndarray) -> Tensor:
    return Tensor(np.stack([ds.windows[i] for i in indices]))


def train(params: AMTFNetParams, train_ds: WindowedDataset,
          val_ds: WindowedDataset, config: TrainConfig) -> TrainReport:
    """Optimize ``params`` in place; returns the trajectory and a snapshot of
    the epoch with the best validation micro-F1.

    Mini-batches are drawn without replacement (last partial batch kept);
    batch order and dropout both derive from ``config.seed``, so two runs
    with identical inputs produce bitwise-identical results.
    """
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    if len(val_ds) == 0:
        raise ValueError("validation set is empty")
    model_cfg = params.config
    shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    optimizer = make_optimizer(config)

    n = len(train_ds)
    report = TrainReport(epoch_losses=[], val_scores=[], lrs=[],
                         best_epoch=-1, best_val_score=-1.0)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = _batch_tensor(train_ds, idx)
            try:
                probs = forward(x, params, model_cfg, training=True, rng=dropout_rng)
            except ValueError as exc:
                # NaN reaching the softmax mid-training is divergence, not
                # an input error
                if "NaN" in str(exc):
                    raise NumericError(
                        f"non-finite forward pass at epoch {epoch}: {exc}") from exc
                raise
            loss = cross_entropy(probs, train_ds.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            total_loss += value
            params.zero_grad()
            loss.backward()
            optimizer.step(params.tensors, lr)
        params.zero_grad()

        val_score = evaluate(params, val_ds, batch_size=config.batch_size).micro_f1
        report.epoch_losses.append(total_loss / n)
        report.val_scores.append(val_score)
        report.lrs.append(lr)
        if val_score > report.best_val_score:
            report.best_val_score = val_score
            report.best_epoch = epoch
            report.best_state = params.copy_values()
    return report


def _predict_batches(params: AMTFNetParams, ds: WindowedDataset,
                     batch_size: int, workers: int):
    """Argmax predictions per batch, in dataset order."""
    model_cfg = params.config
    starts = list(range(0, len(ds), batch_size))

    def run(start: int) -> np.ndarray:
        idx = np.arange(start, min(start + batch_size, len(ds)))
        with no_grad():
            probs = forward(_batch_tensor(ds, idx), params, model_cfg)
        return probs.data.argmax(axis=-1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, starts))
    return [run(s) for s in starts]


def evaluate(params: AMTFNetParams, ds: WindowedDataset,
             batch_size: int = 512, workers: int = 1) -> EvalReport:
    """Eval-mode argmax classification of every window."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    preds = np.concatenate(_predict_batches(params, ds, batch_size, workers))
    cm = ConfusionMatrix.from_predictions(ds.labels, preds,
                                          params.config.num_classes)
    return EvalReport.from_confusion(cm)


def export_features(params: AMTFNetParams, ds: WindowedDataset, path: str,
                    batch_size: int = 512) -> None:
    """Write one CSV row per window: the fused feature vector, the label, and
    the mode tag when present. Floats use round-trip formatting."""
    model_cfg = params.config
    width = model_cfg.feature_height
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = [f"f{i + 1}" for i in range(width)] + ["label"]
        if ds.mode_tags is not None:
            header.append("mode")
        fh.write(",".join(header) + "\n")
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            with no_grad():
                feats = fused_features(_batch_tensor(ds, idx), params, model_cfg)
            for j, i in enumerate(idx):
                cells = [repr(float(x)) for x in feats.data[j]]
                cells.append(str(int(ds.labels[i])))
                if ds.mode_tags is not None:
                    cells.append(str(int(ds.mode_tags[i])))
                fh.write(",".join(cells) + "\n")
