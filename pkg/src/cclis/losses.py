"""Sample-NCE, prototype-instance relation distillation and their sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import FrozenModel, ModelState, encode, prototype_scores
from .numerics import Tensor


@dataclass
class BatchView:
    """A mini-batch B = B_t + B_M.

    Current-task rows come first. ``buffer_g`` holds the stored full-buffer
    proposal probability g_k of each buffered row.
    """

    current_x: np.ndarray
    current_y: np.ndarray
    buffer_x: np.ndarray | None = None
    buffer_y: np.ndarray | None = None
    buffer_g: np.ndarray | None = None
    current_classes: tuple[int, ...] = ()
    past_classes: tuple[int, ...] = ()
    current_ids: np.ndarray | None = None
    buffer_ids: np.ndarray | None = None

    def __post_init__(self):
        self.current_x = np.atleast_2d(np.asarray(self.current_x, dtype=np.float64))
        self.current_y = np.asarray(self.current_y, dtype=np.intp).reshape(-1)
        if self.buffer_x is None or len(self.buffer_x) == 0:
            self.buffer_x = np.zeros((0, self.current_x.shape[1]))
            self.buffer_y = np.zeros(0, dtype=np.intp)
            self.buffer_g = np.zeros(0)
        else:
            self.buffer_x = np.atleast_2d(np.asarray(self.buffer_x, dtype=np.float64))
            self.buffer_y = np.asarray(self.buffer_y, dtype=np.intp).reshape(-1)
            self.buffer_g = np.asarray(self.buffer_g, dtype=np.float64).reshape(-1)
        if not self.current_classes:
            self.current_classes = tuple(sorted(set(self.current_y.tolist())))
        if not self.past_classes:
            self.past_classes = tuple(sorted(set(self.buffer_y.tolist())))

    @property
    def inputs(self) -> np.ndarray:
        return np.vstack([self.current_x, self.buffer_x])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.current_y, self.buffer_y])

    @property
    def n_current(self) -> int:
        return len(self.current_y)

    @property
    def n_buffered(self) -> int:
        return len(self.buffer_y)

    def __len__(self) -> int:
        return self.n_current + self.n_buffered

    def class_counts(self) -> dict[int, int]:
        """|J_m in batch| for each buffered class m."""
        classes, counts = np.unique(self.buffer_y, return_counts=True)
        return dict(zip(classes.tolist(), counts.tolist()))


@dataclass
class LossBreakdown:
    sample_nce: float
    prd: float
    total: float
    lam: float
    objective: Tensor = field(repr=False)
    per_anchor: dict[int, float] = field(default_factory=dict)
    w_hat: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def _reduce(loss: Tensor, n: int, reduction: str) -> Tensor:
    if reduction == "sum":
        return loss
    if reduction == "mean":
        return nx.scale(loss, 1.0 / n)
    raise ValueError(f"unknown reduction {reduction!r}")


def log_weight_offsets(batch: BatchView, importance_weights: bool = True) -> np.ndarray:
    """Additive log-offsets O[r, k] applied to anchor row r, column k.

    Zero for current-task columns and for buffered columns of the anchor's own
    class; ``-log(g_k |J_m|)`` for buffered columns of any other class m.
    """
    labels = batch.labels
    n, nc = len(labels), batch.n_current
    offsets = np.zeros((n, n))
    if batch.n_buffered == 0 or not importance_weights:
        return offsets
    counts = batch.class_counts()
    jm = np.array([counts[m] for m in batch.buffer_y], dtype=np.float64)
    col = -np.log(batch.buffer_g * jm)
    same_class = labels[:, None] == batch.buffer_y[None, :]
    offsets[:, nc:] = np.where(same_class, 0.0, col[None, :])
    return offsets


def sample_nce(
    state: ModelState,
    batch: BatchView,
    *,
    importance_weights: bool = True,
    reduction: str = "sum",
    embeddings: Tensor | None = None,
) -> tuple[Tensor, dict]:
    """Prototype-anchored NCE with an importance-sampled partition function.

    Every batch sample j with label i is an anchor contributing
    ``-log(exp(s_ij) / W_hat_i)`` where ``W_hat_i`` sums ``exp(s_ik)`` over the
    current rows and class-i buffered rows, plus ``exp(s_ik) / (g_k |J_m|)``
    over buffered rows of every other class m. With ``importance_weights=False``
    all buffered rows enter unweighted.

    Returns the loss tensor and diagnostics (``per_anchor`` loss by class,
    ``w_hat`` per anchor row).
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if batch.n_buffered and np.any(batch.buffer_g <= 0):
        raise ValueError("degenerate proposal weight: buffered sample with g_k <= 0")
    labels = batch.labels
    if labels.max() >= state.num_prototypes or labels.min() < 0:
        raise ValueError(f"batch label outside the {state.num_prototypes} known prototypes")

    z = encode(state, batch.inputs, safe=True) if embeddings is None else embeddings
    scores = prototype_scores(state, z)
    anchor_rows = nx.take_rows(scores, labels)
    offsets = log_weight_offsets(batch, importance_weights)
    logp = nx.log_softmax(nx.add(anchor_rows, offsets))
    loss = nx.nll_gather(logp, np.arange(n))

    logits = anchor_rows.data + offsets
    top = logits.max(axis=1)
    w_hat = np.exp(top) * np.exp(logits - top[:, None]).sum(axis=1)
    per_row = -logp.data[np.arange(n), np.arange(n)]
    per_anchor = {int(c): float(per_row[labels == c].sum()) for c in np.unique(labels)}
    return _reduce(loss, n, reduction), {"per_anchor": per_anchor, "w_hat": w_hat}


def relation_distributions(model, inputs, kappa: float) -> Tensor:
    """q(x_j) as rows: softmax over prototypes of s_ij computed at ``kappa``."""
    z = encode(model, inputs, safe=True)
    return nx.softmax(nx.transpose(prototype_scores(model, z, kappa)))


def prd(
    state: ModelState,
    frozen: FrozenModel,
    inputs,
    kappa_cur: float = 0.2,
    kappa_past: float = 0.1,
    *,
    reduction: str = "sum",
    embeddings: Tensor | None = None,
) -> Tensor:
    """Cross-entropy between frozen-model and current-model relation rows.

    ``sum_j -q(x_j; prev) . log q(x_j; cur)``; only the current model is
    differentiated.
    """
    if kappa_cur <= 0 or kappa_past <= 0:
        raise ValueError("distillation temperatures must be positive")
    if frozen.num_prototypes != state.num_prototypes:
        raise ValueError(
            f"prototype count mismatch: frozen has {frozen.num_prototypes}, current has {state.num_prototypes}"
        )
    inputs = np.asarray(inputs, dtype=np.float64)
    q_prev = relation_distributions(frozen, inputs, kappa_past).data
    z = encode(state, inputs, safe=True) if embeddings is None else embeddings
    log_q = nx.log_softmax(nx.transpose(prototype_scores(state, z, kappa_cur)))
    loss = nx.neg(nx.reduce_sum(nx.mul(q_prev, log_q)))
    return _reduce(loss, len(inputs), reduction)


def total_objective(
    state: ModelState,
    frozen: FrozenModel | None,
    batch: BatchView,
    lam: float = 0.6,
    *,
    kappa_cur: float = 0.2,
    kappa_past: float = 0.1,
    importance_weights: bool = True,
    reduction: str = "sum",
) -> LossBreakdown:
    """Sample-NCE plus ``lam`` times PRD (PRD only when ``frozen`` is given)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    z = encode(state, batch.inputs, safe=True)
    nce, diag = sample_nce(
        state, batch, importance_weights=importance_weights, reduction=reduction, embeddings=z
    )
    if frozen is None:
        objective, prd_value = nce, 0.0
    else:
        distill = prd(state, frozen, batch.inputs, kappa_cur, kappa_past, reduction=reduction, embeddings=z)
        prd_value = distill.item()
        objective = nx.add(nce, nx.scale(distill, lam)) if lam else nce
    return LossBreakdown(
        sample_nce=nce.item(),
        prd=prd_value,
        total=objective.item(),
        lam=lam,
        objective=objective,
        per_anchor=diag["per_anchor"],
        w_hat=diag["w_hat"],
    )
