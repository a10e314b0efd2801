"""AdamW training of probe heads on frozen embeddings.

Protocol: train one head per learning rate in the grid, pick the rate with
the best validation macro metric (ties go to the smaller rate), then train a
freshly initialised head on train+val with that rate.
"""

from __future__ import annotations

import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .embeddings import EmbeddingSet
from .head import make_head
from .stats import macro_average, per_finding

logger = logging.getLogger(__name__)

LR_GRID = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_grid: tuple[float, ...] = LR_GRID
    epochs: int = 10
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    selection_metric: str = "macro_auroc"

    def __post_init__(self):
        self.lr_grid = tuple(float(x) for x in self.lr_grid)
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.selection_metric not in ("macro_auroc", "macro_auprc"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(params, grads, state: OptimizerState, config: TrainConfig, lr: float | None = None) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    lr = config.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise T.NumericError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def batch_loss(head, data: EmbeddingSet, labels: np.ndarray, idx) -> tuple[T.Tensor, T.GradTape]:
    with T.GradTape() as tape:
        logits = head.forward(data.cls[idx], data.patches[idx])
        loss = T.bce_with_logits(logits, labels[idx])
    return loss, tape


def mean_loss(head, data: EmbeddingSet, labels: np.ndarray) -> float:
    logits = head.predict(data)
    return T.bce_with_logits(T.Tensor(logits), labels).item()


def selection_score(metric: str, scores, labels) -> float:
    name = "auroc" if metric == "macro_auroc" else "auprc"
    return macro_average(per_finding(name, scores, labels))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_metric: float | None

    def line(self) -> str:
        val = "nan" if self.val_metric is None else f"{self.val_metric:.6f}"
        return f"epoch={self.epoch} train_loss={self.train_loss:.6f} val_metric={val}"


@dataclass
class TrainResult:
    head: object
    history: list[EpochLog] = field(default_factory=list)

    @property
    def val_metric_history(self) -> list[float | None]:
        return [h.val_metric for h in self.history]


def _check_split(data: EmbeddingSet, labels, n_findings: int, name: str) -> None:
    if data is None or len(data) == 0:
        raise ValueError(f"{name} split is empty")
    labels = np.asarray(labels)
    if labels.shape != (len(data), n_findings):
        raise ValueError(
            f"{name} labels have shape {labels.shape}, expected ({len(data)}, {n_findings})"
        )


def train(
    head_config,
    train_set: tuple[EmbeddingSet, np.ndarray],
    val_set: tuple[EmbeddingSet, np.ndarray] | None,
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train a freshly initialised head; returns the final-epoch head and per-epoch log.

    Shuffling draws from one generator seeded by ``config.seed``; the last
    partial batch is kept.
    """
    tr_data, tr_labels = train_set
    M = head_config.n_findings
    _check_split(tr_data, tr_labels, M, "train")
    if val_set is not None:
        _check_split(val_set[0], val_set[1], M, "val")
        if len(np.intersect1d(tr_data.ids, val_set[0].ids)):
            raise ValueError("train and val splits share image ids")
    head = make_head(head_config)
    state = OptimizerState.zeros_like(head.params)
    rng = np.random.default_rng(config.seed)
    labels = np.asarray(tr_labels, dtype=np.float64)
    n = len(tr_data)
    result = TrainResult(head)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            loss, tape = batch_loss(head, tr_data, labels, idx)
            T.backward(tape, loss)
            grads = {k: p.grad for k, p in head.params.items() if p.grad is not None}
            adamw_step(head.params, grads, state, config)
            total += loss.item() * len(idx)
        val = None
        if val_set is not None:
            val = selection_score(config.selection_metric, head.predict(val_set[0]), val_set[1])
        entry = EpochLog(epoch, total / n, val)
        result.history.append(entry)
        if log is not None:
            log(entry.line())
        logger.debug(entry.line())
    return result


# fork workers inherit the arrays instead of pickling ~100s of MB per task
_GRID_JOB = None


def _grid_point(lr: float) -> float:
    head_config, train_set, val_set, config = _GRID_JOB
    return train(head_config, train_set, val_set, replace(config, lr=lr)).history[-1].val_metric


def lr_grid_search(head_config, train_set, val_set, config: TrainConfig, log=None, jobs: int = 1):
    """Return ``(best_lr, {lr: final val metric})`` over ``config.lr_grid``.

    Each grid point is an independent, fully seeded run, so ``jobs > 1``
    gives the same result as a serial search.
    """
    global _GRID_JOB
    if val_set is None:
        raise ValueError("lr_grid_search needs a validation split")
    grid = sorted(config.lr_grid)
    _GRID_JOB = (head_config, train_set, val_set, config)
    try:
        if jobs > 1 and "fork" in mp.get_all_start_methods():
            with ProcessPoolExecutor(min(jobs, len(grid)), mp_context=mp.get_context("fork")) as pool:
                values = list(pool.map(_grid_point, grid))
        else:
            values = [_grid_point(lr) for lr in grid]
    finally:
        _GRID_JOB = None
    scores = {}
    for lr, val in zip(grid, values):
        scores[lr] = val
        if log is not None:
            log(f"grid lr={lr:g} val_metric={scores[lr]:.6f}")
    best = None
    for lr in sorted(scores):
        if best is None or scores[lr] > scores[best]:
            best = lr
    if log is not None:
        log(f"selected lr={best:g}")
    return best, scores


def retrain_on_train_plus_val(head_config, train_set, val_set, best_lr: float, config: TrainConfig, log=None):
    """Second round: fresh init with the same seed, trained on the union of both splits."""
    if best_lr not in config.lr_grid:
        raise ValueError(f"lr {best_lr} is not in the grid")
    data = EmbeddingSet.union(train_set[0], val_set[0])
    labels = np.concatenate([np.asarray(train_set[1]), np.asarray(val_set[1])])
    return train(head_config, (data, labels), None, replace(config, lr=best_lr), log=log)
