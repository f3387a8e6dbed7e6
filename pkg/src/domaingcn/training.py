"""Adam, early stopping and stratified cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import HyperParams, TrainConfig
from .errors import DataError, TrainingError
from .graph import WsiGraph
from .metrics import auc, f1_scores
from .model import ModelParams, init_params, loss_and_grads, loss_value, predict_proba

log = logging.getLogger(__name__)

METRICS = ("auc", "f1_macro", "f1_binary", "acc")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update from the ``.grad`` of each parameter."""
    for name, t in params.items():
        if t.grad is None or not np.all(np.isfinite(t.grad)):
            raise TrainingError(f"non-finite or missing gradient for parameter {name}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


class EarlyStopping:
    """Tracks the best validation loss; a step counts as progress only if it
    is strictly lower than every earlier one."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; return True if it is a new best."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def stratified_kfold(labels: Sequence[int], folds: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded stratified split into ``folds`` (train_idx, val_idx) pairs.

    Each class is shuffled and dealt round-robin, continuing the deal from
    where the previous class stopped, so fold sizes differ by at most one
    overall and per class.
    """
    y = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng(seed)
    assign = np.empty(y.shape[0], dtype=np.int64)
    offset = 0
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        if idx.shape[0] < folds:
            raise DataError(f"class {c} has {idx.shape[0]} samples, fewer than {folds} folds")
        idx = rng.permutation(idx)
        assign[idx] = (np.arange(idx.shape[0]) + offset) % folds
        offset = (offset + idx.shape[0]) % folds
    if np.setdiff1d(np.unique(y), [0, 1]).size:
        raise DataError("labels must be 0 or 1")
    all_idx = np.arange(y.shape[0])
    return [(all_idx[assign != f], all_idx[assign == f]) for f in range(folds)]


@dataclass
class Prediction:
    wsi_id: str
    label: int
    prob: float  # P(ulcer)
    pred: int


@dataclass
class FoldResult:
    fold: int
    auc: float
    f1_macro: float
    f1_binary: float
    acc: float
    best_epoch: int
    epochs_run: int
    train_loss: list[float]
    val_loss: list[float]
    predictions: list[Prediction]

    def metric(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class FoldReport:
    folds: list[FoldResult]
    mean: dict[str, float]
    std: dict[str, float]

    @classmethod
    def from_folds(cls, folds: list[FoldResult]) -> "FoldReport":
        mean, std = {}, {}
        for m in METRICS:
            vals = np.array([f.metric(m) for f in folds])
            mean[m] = float(vals.mean())
            std[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return cls(list(folds), mean, std)


def evaluate(graphs: Sequence[WsiGraph], params: ModelParams, hyper: HyperParams):
    """Mean loss, per-graph P(ulcer) and attention scores."""
    losses, probs, attention = [], [], []
    for g in graphs:
        p, scores = predict_proba(g, params, hyper)
        losses.append(float(-np.log(max(p[g.label], 1e-300))))
        probs.append(float(p[1]))
        attention.append(scores)
    return float(np.mean(losses)), np.array(probs), attention


def train_one_fold(
    train: Sequence[WsiGraph],
    val: Sequence[WsiGraph],
    config: TrainConfig,
    hyper: HyperParams,
    fold: int = 0,
    val_loss_fn: Callable[[ModelParams], float] | None = None,
) -> tuple[ModelParams, FoldResult]:
    """Batch-size-1 Adam with early stopping on mean validation loss.

    Returns the parameters from the epoch with the lowest validation loss.
    ``val_loss_fn`` overrides the validation loss computation (testing hook).
    """
    if not train or not val:
        raise DataError(f"empty split (train: {len(train)}, val: {len(val)})")
    params = init_params(hyper, seed=int(np.random.SeedSequence([hyper.seed, fold]).generate_state(1)[0]))
    rng = np.random.default_rng([config.seed, fold])
    state = AdamState()
    stopper = EarlyStopping(config.patience)
    best = params.copy()
    train_curve, val_curve = [], []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for i in rng.permutation(len(train)):
            loss, _ = loss_and_grads(train[i], params, hyper)
            adam_step(params, state, config)
            total += loss
        train_curve.append(total / len(train))
        if val_loss_fn is not None:
            vloss = float(val_loss_fn(params))
        else:
            vloss = float(np.mean([loss_value(g, params, hyper) for g in val]))
        val_curve.append(vloss)
        if not np.isfinite(vloss):
            raise TrainingError(f"fold {fold}: validation loss became {vloss} at epoch {epoch}")
        if stopper.update(epoch, vloss):
            best = params.copy()
        log.debug("fold %d epoch %d train %.5f val %.5f", fold, epoch, train_curve[-1], vloss)
        if stopper.should_stop:
            break

    _, probs, _ = evaluate(val, best, hyper)
    labels = np.array([g.label for g in val])
    preds = (probs > 0.5).astype(np.int64)
    m = f1_scores(preds, labels)
    result = FoldResult(
        fold=fold,
        auc=auc(probs, labels),
        f1_macro=m["f1_macro"],
        f1_binary=m["f1_binary"],
        acc=m["acc"],
        best_epoch=stopper.best_epoch,
        epochs_run=epoch,
        train_loss=train_curve,
        val_loss=val_curve,
        predictions=[Prediction(g.wsi_id, int(g.label), float(p), int(q)) for g, p, q in zip(val, probs, preds)],
    )
    return best, result


def run_cv(
    graphs: Sequence[WsiGraph],
    config: TrainConfig,
    hyper: HyperParams,
    on_fold: Callable[[int, ModelParams, list[WsiGraph]], None] | None = None,
) -> FoldReport:
    """Stratified k-fold training and validation over ``graphs``.

    ``on_fold(fold, best_params, val_graphs)`` is called after each fold.
    """
    labels = [g.label for g in graphs]
    if len(set(labels)) < 2:
        raise DataError(f"cross-validation needs both labels; dataset has only {sorted(set(labels))}")
    results = []
    for fold, (tr, va) in enumerate(stratified_kfold(labels, config.folds, config.seed)):
        train = [graphs[i] for i in tr]
        val = [graphs[i] for i in va]
        best, res = train_one_fold(train, val, config, hyper, fold)
        log.info(
            "fold %d: auc %.4f acc %.4f best epoch %d of %d",
            fold, res.auc, res.acc, res.best_epoch, res.epochs_run,
        )
        results.append(res)
        if on_fold is not None:
            on_fold(fold, best, val)
    return FoldReport.from_folds(results)
