"""Linear-probe evaluation, Class-IL / Task-IL accuracy and forgetting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import FrozenModel, ModelState, checksum, features
from .tasks import TaskStream

SCENARIOS = ("class-il", "task-il")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    milestones: tuple[int, ...] = (60, 75, 90)
    decay: float = 0.2
    batch_size: int = 32
    features: str = "projection"
    # "pool" trains on R_t = M_{t-1} ∪ D_t, "buffer" on the selected M_t only
    train_on: str = "pool"

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs for m in ms):
            raise ValueError("milestones must be strictly increasing and below epochs")
        if self.features not in ("projection", "backbone"):
            raise ValueError(f"unknown feature source {self.features!r}")
        if self.train_on not in ("pool", "buffer"):
            raise ValueError(f"unknown probe training set {self.train_on!r}")


# per-dataset probe learning rates
PROBE_LR_PRESETS = {"seq-cifar-10": 0.5, "seq-cifar-100": 0.1, "seq-tiny-imagenet": 0.5}


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    feature_source: str = "projection"

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weight + self.bias


@dataclass
class AccuracyMatrix:
    """``values[l, t]``: accuracy on task t after training task l (0-based)."""

    values: np.ndarray
    scenario: str

    @classmethod
    def empty(cls, T: int, scenario: str) -> "AccuracyMatrix":
        return cls(np.full((T, T), np.nan), scenario)

    def set_row(self, l: int, accs) -> None:
        self.values[l, : len(accs)] = accs

    @property
    def average_accuracy(self) -> float:
        return float(np.nanmean(self.values[-1]))


def balanced_draws(y: np.ndarray, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices: pick a class (cycling over shuffled class orders) then a
    member uniformly. Per-class counts differ by at most one."""
    classes = np.unique(y)
    rounds = -(-n_draws // classes.size)
    order = np.concatenate([rng.permutation(classes) for _ in range(rounds)])[:n_draws]
    members = {c: np.flatnonzero(y == c) for c in classes.tolist()}
    return np.array([members[c][rng.integers(members[c].size)] for c in order.tolist()], dtype=np.intp)


def train_linear_probe(
    model: ModelState | FrozenModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: ProbeConfig,
    rng: np.random.Generator,
    classes=None,
) -> LinearProbe:
    """Softmax-regression head on frozen features, SGD with momentum.

    ``classes`` fixes the output columns (defaults to the labels in ``y``);
    every listed class needs at least one sample.
    """
    if len(y) == 0:
        raise ValueError("probe training set is empty")
    before = checksum(model)
    classes = np.unique(y) if classes is None else np.asarray(sorted(classes))
    for c in classes:
        if not np.any(y == c):
            raise ValueError(f"class {int(c)} has no samples in the probe training set")
    feats = features(model, x, cfg.features)
    col = {int(c): k for k, c in enumerate(classes)}
    targets = np.array([col[int(v)] for v in y], dtype=np.intp)

    d, k = feats.shape[1], classes.size
    w, b = np.zeros((d, k)), np.zeros(k)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.milestones:
            lr *= cfg.decay
        draws = balanced_draws(targets, len(y), rng)
        for start in range(0, draws.size, cfg.batch_size):
            idx = draws[start : start + cfg.batch_size]
            logits = feats[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(idx.size), targets[idx]] -= 1.0
            p /= idx.size
            vw = cfg.momentum * vw + feats[idx].T @ p
            vb = cfg.momentum * vb + p.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    if checksum(model) != before:
        raise RuntimeError("encoder parameters changed during probe training")
    return LinearProbe(w, b, classes, cfg.features)


def probe_logits(probe: LinearProbe, model, x: np.ndarray) -> np.ndarray:
    return probe.logits(features(model, x, probe.feature_source))


def predict(logits: np.ndarray, classes: np.ndarray, allowed=None) -> np.ndarray:
    """argmax over columns, optionally restricted to ``allowed`` class ids."""
    if allowed is None:
        return classes[np.argmax(logits, axis=1)]
    mask = np.isin(classes, list(allowed))
    masked = np.where(mask[None, :], logits, -np.inf)
    return classes[np.argmax(masked, axis=1)]


def evaluate(
    probe: LinearProbe,
    model,
    stream: TaskStream,
    after_task: int,
    scenarios=SCENARIOS,
) -> dict[str, list[float]]:
    """Accuracy on the test sets of tasks 1..after_task.

    Both scenarios use the same logits: Class-IL takes the argmax over every
    probe class, Task-IL only over the classes of the sample's own task.
    """
    out: dict[str, list[float]] = {s: [] for s in scenarios}
    for task in stream.tasks[:after_task]:
        logits = probe_logits(probe, model, task.test_x)
        for s in scenarios:
            if s == "class-il":
                pred = predict(logits, probe.classes)
            elif s == "task-il":
                pred = predict(logits, probe.classes, task.classes)
            else:
                raise ValueError(f"unknown scenario {s!r}")
            out[s].append(float(np.mean(pred == task.test_y)))
    return out


def average_forgetting(matrix) -> float:
    """mean over t < T of max_{l in t..T} a[l, t] - a[T, t] (1-based tasks).

    The running maximum includes the final row, so a task that ends at its
    best accuracy contributes zero rather than a negative drop.
    """
    a = np.asarray(matrix.values if isinstance(matrix, AccuracyMatrix) else matrix, dtype=np.float64)
    T = a.shape[0]
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    drops = [a[t:T, t].max() - a[T - 1, t] for t in range(T - 1)]
    return float(np.mean(drops))


@dataclass
class RunMetrics:
    matrices: dict[str, AccuracyMatrix]
    loss_trace: list[float] = field(default_factory=list)
    artifacts: dict = field(default_factory=dict, repr=False)

    def average_accuracy(self, scenario: str) -> float:
        return self.matrices[scenario].average_accuracy

    def average_forgetting(self, scenario: str) -> float:
        m = self.matrices[scenario]
        return average_forgetting(m) if m.values.shape[0] > 1 else 0.0
