"""Training, missing-modality adaptation, evaluation and imputation baselines."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import tensor as T
from .data import Dataset, Split
from .errors import (ConfigError, DegenerateFeatureError, NonFiniteError, NumericError,
                     ProtocolError)
from .gram import mean_off_diagonal
from .lora import build_freeze_plan, trainable_fraction
from .model import GramMambaModel, forward_full, forward_partial, total_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

IMPUTE_METHODS = ("zero", "mean", "linear", "pchip")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta: Optional[float] = None  # None: use the model's beta
    grad_clip: float = 5.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate must be >= 0 and grad_clip > 0")
        if self.beta is not None and self.beta < 0:
            raise ConfigError("beta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    mode: str = "classification"
    overall_accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    per_class_f1: Optional[list] = None
    median_error: Optional[float] = None
    mean_error: Optional[float] = None
    mean_gram_offdiag: Optional[float] = None
    loss_history: list = field(default_factory=list)
    trainable_fraction: Optional[float] = None
    skipped_steps: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def score(self) -> float:
        """Larger is better: macro-F1, or negated mean error."""
        if self.mode == "classification":
            return float(self.macro_f1)
        return -float(self.mean_error)


# ---------------------------------------------------------------- metrics


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def classification_metrics(y_true, y_pred, n_classes: int) -> tuple[float, float, list]:
    """Overall accuracy, macro-F1 over all declared classes, per-class F1.

    A class with no true and no predicted samples scores F1 = 0.
    """
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    oa = float(tp.sum() / max(cm.sum(), 1))
    return oa, float(f1.mean()), f1.tolist()


def regression_metrics(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Median and mean Euclidean error."""
    err = np.linalg.norm(np.asarray(pred) - np.asarray(target), axis=-1)
    return float(np.median(err)), float(np.mean(err))


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------- batching


def _batch(split: Split, idx: np.ndarray, names: Iterable[str]) -> dict:
    return {n: split.arrays[n][idx] for n in names}


def _labels(split: Split, idx: np.ndarray, mode: str) -> np.ndarray:
    y = split.labels[idx]
    return y.astype(np.int64) if mode == "classification" else y.astype(np.float64)


def _forward(model: GramMambaModel, batch: dict, available: Sequence[str]):
    if list(available) == model.modality_names:
        return forward_full(model, batch)
    return forward_partial(model, batch, available)


def _check_available(model: GramMambaModel, available: Optional[Iterable[str]]) -> list[str]:
    if available is None:
        return model.modality_names
    avail = set(available)
    unknown = avail - set(model.modality_names)
    if unknown:
        raise ProtocolError(f"unknown modalities {sorted(unknown)}")
    if not avail:
        raise ProtocolError("no modality available")
    return [n for n in model.modality_names if n in avail]


# ---------------------------------------------------------------- evaluation


def evaluate(model: GramMambaModel, split: Split, available: Optional[Iterable[str]] = None,
             batch_size: int = 256) -> MetricsReport:
    """Metrics on ``split`` using only ``available`` modalities (default: all)."""
    names = _check_available(model, available)
    n = split.num_windows
    preds, offdiag = [], []
    with T.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            out = _forward(model, _batch(split, idx, names), names)
            preds.append(out.prediction.data)
            if out.gram is not None:
                offdiag.append(mean_off_diagonal(out.gram.values.data) * idx.size)
    pred = np.concatenate(preds)
    rep = MetricsReport(mode=model.mode)
    if offdiag:
        rep.mean_gram_offdiag = float(sum(offdiag) / n)
    if model.mode == "classification":
        rep.overall_accuracy, rep.macro_f1, rep.per_class_f1 = classification_metrics(
            split.labels, pred.argmax(axis=-1), model.config.n_outputs)
    else:
        rep.median_error, rep.mean_error = regression_metrics(pred, split.labels)
    return rep


def evaluate_classification(model, split, available=None, batch_size=256) -> MetricsReport:
    if model.mode != "classification":
        raise ProtocolError("evaluate_classification on a regression model")
    return evaluate(model, split, available, batch_size)


def evaluate_regression(model, split, available=None, batch_size=256) -> MetricsReport:
    if model.mode != "regression":
        raise ProtocolError("evaluate_regression on a classification model")
    return evaluate(model, split, available, batch_size)


# ---------------------------------------------------------------- training loops


def _run_epochs(model: GramMambaModel, ds: Dataset, cfg: TrainConfig, names: list[str],
                beta: float, params: list[Tensor], on_epoch: Optional[Callable],
                after_epoch: Optional[Callable] = None) -> MetricsReport:
    """Shared loop: shuffled minibatches, Adam, clipping, best-validation retention."""
    train_split, val_split = ds.splits["train"], ds.splits["val"]
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.learning_rate, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    n = train_split.num_windows
    history, skipped = [], 0
    # only optimized tensors are snapshotted, so restoring the best state
    # can never mask a change to a frozen tensor
    live = {id(p) for p in params}
    live_names = [n for n, p in model.named_parameters().items() if id(p) in live]

    def snapshot():
        named = model.named_parameters()
        return {n: named[n].data.copy() for n in live_names}

    best_score, best_state, best_rep = -math.inf, snapshot(), None
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            T.get_tape().clear()
            opt.zero_grad()
            try:
                out = _forward(model, _batch(train_split, idx, names), names)
                loss = total_loss(out, _labels(train_split, idx, ds.mode), beta, ds.mode)
            except DegenerateFeatureError as exc:
                T.get_tape().clear()
                skipped += 1
                log.warning("epoch %d step %d skipped: %s", epoch, step, exc)
                continue
            value = loss.item()
            if not math.isfinite(value):
                T.get_tape().clear()
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch} step {step}")
            T.backward(loss)
            gnorm = clip_grad_norm(params, cfg.grad_clip)
            if not math.isfinite(gnorm):
                raise NonFiniteError(f"non-finite gradient norm at epoch {epoch} step {step}")
            opt.step()
            total += value * idx.size
            seen += idx.size
        if after_epoch is not None:
            after_epoch(epoch)
        epoch_loss = total / seen if seen else float("nan")
        history.append(epoch_loss)
        rep = evaluate(model, val_split, names)
        if rep.score() > best_score:
            best_score, best_state, best_rep = rep.score(), snapshot(), rep
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "train_loss": epoch_loss, **{
                k: v for k, v in rep.to_dict().items()
                if k in ("overall_accuracy", "macro_f1", "mean_error", "median_error", "mean_gram_offdiag")
                and v is not None}})
    model.load_state_dict(best_state, strict=False)
    final = best_rep if best_rep is not None else evaluate(model, val_split, names)
    final.loss_history = history
    final.skipped_steps = skipped
    return final


def train(model: GramMambaModel, ds: Dataset, cfg: TrainConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> MetricsReport:
    """Full-modality training on task loss plus the Gram alignment term.

    Adapters stay frozen no-ops. The model ends holding the weights with the
    best validation score; the returned report describes that state.
    """
    if ds.mode != model.mode:
        raise ProtocolError(f"dataset mode {ds.mode} vs model mode {model.mode}")
    beta = model.config.beta if cfg.beta is None else cfg.beta
    adapter_names = {n for k in model.adapters for n in model.adapter_param_names(k)}
    model.set_trainable(n for n in model.named_parameters() if n not in adapter_names)
    params = [p for p in model.named_parameters().values() if p.requires_grad]
    return _run_epochs(model, ds, cfg, model.modality_names, beta, params, on_epoch)


def checksums(model: GramMambaModel, names: Iterable[str]) -> dict[str, str]:
    params = model.named_parameters()
    return {n: hashlib.sha256(params[n].data.tobytes()).hexdigest() for n in names}


@dataclass
class AdaptResult:
    before: MetricsReport
    after: MetricsReport
    validation: MetricsReport
    trainable_fraction: float
    trainable_params: int
    available: list

    def to_dict(self) -> dict:
        return {"before": self.before.to_dict(), "after": self.after.to_dict(),
                "validation": self.validation.to_dict(), "trainable_fraction": self.trainable_fraction,
                "trainable_params": self.trainable_params, "available": list(self.available)}


def adapt(model: GramMambaModel, ds: Dataset, available: Iterable[str], cfg: TrainConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> AdaptResult:
    """Fit the low-rank adapters of the available modalities and the fusion layer.

    Everything else is frozen and verified bitwise unchanged after each epoch.
    Before/after metrics are measured on the test split with the same
    modalities.
    """
    if ds.mode != model.mode:
        raise ProtocolError(f"dataset mode {ds.mode} vs model mode {model.mode}")
    names = _check_available(model, available)
    for split_name, split in ds.splits.items():
        absent = set(names) - set(split.available)
        if absent:
            raise ProtocolError(f"{split_name} split has no data for {sorted(absent)}")
    plan = build_freeze_plan(model, names)
    plan.apply(model.named_parameters())
    frozen = sorted(plan.frozen_names)
    reference = checksums(model, frozen)

    def sweep(epoch: int) -> None:
        now = checksums(model, frozen)
        changed = [n for n in frozen if now[n] != reference[n]]
        if changed:
            raise ProtocolError(f"frozen tensors changed during adaptation (epoch {epoch}): {changed}")

    before = evaluate(model, ds.splits["test"], names)
    params = [model.named_parameters()[n] for n in sorted(plan.trainable_names)]
    val = _run_epochs(model, ds, cfg, names, 0.0, params, on_epoch, after_epoch=sweep)
    sweep(cfg.epochs)
    after = evaluate(model, ds.splits["test"], names)
    frac = trainable_fraction(model, plan)
    after.trainable_fraction = frac
    count = sum(model.named_parameters()[n].size for n in plan.trainable_names)
    return AdaptResult(before, after, val, frac, count, names)


# ---------------------------------------------------------------- missing data


def simulate_missing(ds: Dataset, missing: Iterable[str], policy: str = "drop") -> Dataset:
    """Copy of ``ds`` with ``missing`` modalities marked unavailable in every split.

    The stored arrays are kept so that imputers can be fitted on the training
    history; models only see modalities listed as available.
    """
    if policy != "drop":
        raise ConfigError(f"unknown missing-data policy {policy!r}")
    missing = set(missing)
    unknown = missing - set(ds.modality_names)
    if unknown:
        raise ProtocolError(f"unknown modalities {sorted(unknown)}")
    if missing >= set(ds.modality_names):
        raise ProtocolError("cannot drop every modality")
    out = ds.copy()
    for split in out.splits.values():
        split.available = [n for n in split.available if n not in missing]
    return out


def _fit_channel_regression(train: Split, avail: list[str], target: str) -> np.ndarray:
    X = np.concatenate([train.arrays[n].reshape(-1, train.arrays[n].shape[-1]) for n in avail], axis=1)
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    Y = train.arrays[target].reshape(-1, train.arrays[target].shape[-1])
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return coef


def impute_baseline(ds: Dataset, method: str, knot_stride: int = 4) -> Dataset:
    """Fill every unavailable modality so the full model can run.

    ``zero`` and ``mean`` use constants (the mean is per channel over the
    training history). ``linear`` and ``pchip`` regress each missing channel
    on the available channels (least squares on the training history),
    evaluate that estimate at knots every ``knot_stride`` steps and
    interpolate between knots.
    """
    if method not in IMPUTE_METHODS:
        raise ConfigError(f"unknown imputation method {method!r}; choose from {IMPUTE_METHODS}")
    if knot_stride < 1:
        raise ConfigError("knot_stride must be >= 1")
    out = ds.copy()
    train = ds.splits["train"]
    for sname, split in out.splits.items():
        avail = list(split.available)
        absent = [n for n in ds.modality_names if n not in avail]
        for name in absent:
            arr = split.arrays[name]
            W, L, C = arr.shape
            if method == "zero":
                filled = np.zeros_like(arr)
            elif method == "mean":
                filled = np.broadcast_to(train.arrays[name].mean(axis=(0, 1)), arr.shape).copy()
            else:
                coef = _fit_channel_regression(train, avail, name)
                X = np.concatenate([split.arrays[n] for n in avail], axis=-1)
                knots = np.unique(np.r_[np.arange(0, L, knot_stride), L - 1])
                Xk = np.concatenate([X[:, knots], np.ones((W, knots.size, 1))], axis=-1)
                est = Xk @ coef  # [W, K, C]
                grid = np.arange(L)
                if method == "linear":
                    filled = np.empty_like(arr)
                    for w in range(W):
                        for c in range(C):
                            filled[w, :, c] = np.interp(grid, knots, est[w, :, c])
                else:
                    filled = PchipInterpolator(knots, est, axis=1)(grid)
            split.arrays[name] = filled
        split.available = list(ds.modality_names)
    return out
