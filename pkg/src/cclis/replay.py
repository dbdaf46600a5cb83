"""Replay buffer selection from a variance-minimizing proposal.

For each class m the proposal g^(m) is the mean over the other prototypes i
of the within-class target distributions p_i^(m) ∝ exp(s_ij), j in class m.
Samples are then kept by weighted sampling without replacement.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import FrozenModel, encode, prototype_scores
from .tasks import AugmentorConfig, augment

SNAPSHOT_HEADER = (
    "# cclis replay buffer snapshot v1\n"
    "# one entry per line, tab separated: sample_id class_id g task_of_origin\n"
    "# g is the proposal probability stored at selection time (17 significant digits)\n"
)


@dataclass
class ProposalTable:
    """Per class m: pool indices and their proposal probabilities g_k^(m)."""

    classes: dict[int, tuple[np.ndarray, np.ndarray]]
    checksum: str = ""
    aug_passes: int = 1

    def probabilities(self, pool_size: int) -> np.ndarray:
        """g for every pool row (rows of classes outside the table get nan)."""
        g = np.full(pool_size, np.nan)
        for index, probs in self.classes.values():
            g[index] = probs
        return g


@dataclass
class ReplayBuffer:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    g: np.ndarray
    task: np.ndarray
    capacity: int

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, input_dim: int, capacity: int) -> "ReplayBuffer":
        return cls(
            np.zeros((0, input_dim)),
            np.zeros(0, dtype=np.intp),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
            np.zeros(0, dtype=np.intp),
            capacity,
        )

    @property
    def per_class_counts(self) -> dict[int, int]:
        classes, counts = np.unique(self.y, return_counts=True)
        return dict(zip(classes.tolist(), counts.tolist()))


@dataclass
class Pool:
    """Candidate samples M ∪ D_t."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    task: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def combine(cls, buffer: ReplayBuffer, x, y, ids, task) -> "Pool":
        return cls(
            np.vstack([buffer.x, x]),
            np.concatenate([buffer.y, np.asarray(y, dtype=np.intp)]),
            np.concatenate([buffer.ids, np.asarray(ids, dtype=np.int64)]),
            np.concatenate([buffer.task, np.asarray(task, dtype=np.intp)]),
        )


def averaged_exp_scores(
    frozen: FrozenModel,
    x: np.ndarray,
    aug_passes: int = 5,
    rng: np.random.Generator | None = None,
    aug: AugmentorConfig | None = None,
) -> np.ndarray:
    """exp(s_ij) under the frozen model, averaged over augmentation passes; (K, n)."""
    if aug_passes < 1:
        raise ValueError("aug_passes must be >= 1")
    aug = aug or AugmentorConfig()
    rng = rng or np.random.default_rng(0)
    # one child stream per pass; reduction runs in pass order
    streams = rng.spawn(aug_passes)
    total = np.zeros((frozen.num_prototypes, len(x)))
    for stream in streams:
        view = augment(x, aug, stream)
        total += np.exp(prototype_scores(frozen, encode(frozen, view, safe=True)).data)
    return total / aug_passes


def compute_target_dists(
    frozen: FrozenModel,
    x: np.ndarray,
    y: np.ndarray,
    aug_passes: int = 5,
    rng: np.random.Generator | None = None,
    aug: AugmentorConfig | None = None,
) -> dict[int, dict[int, np.ndarray]]:
    """``targets[m][i]``: p_i^(m) over the class-m rows of ``y`` (in row order),
    for every prototype i != m."""
    y = np.asarray(y)
    scores = averaged_exp_scores(frozen, x, aug_passes, rng, aug)
    targets: dict[int, dict[int, np.ndarray]] = {}
    for m in range(frozen.num_prototypes):
        members = np.flatnonzero(y == m)
        if members.size == 0:
            raise ValueError(f"class {m} has no samples in the pool")
        targets[m] = {}
        for i in range(frozen.num_prototypes):
            if i == m:
                continue
            w = scores[i, members]
            targets[m][i] = w / w.sum()
    extra = set(np.unique(y).tolist()) - set(range(frozen.num_prototypes))
    if extra:
        raise ValueError(f"pool labels {sorted(extra)} have no prototype")
    return targets


def compute_proposal(targets: Sequence[np.ndarray], size: int | None = None) -> np.ndarray:
    """Arithmetic mean of the target distributions.

    With no targets (a single known class) falls back to uniform over ``size``.
    """
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    if not targets:
        if size is None:
            raise ValueError("size is required when there are no targets")
        warnings.warn("no target distributions for this class; using a uniform proposal", stacklevel=2)
        return np.full(size, 1.0 / size)
    g = np.mean(targets, axis=0)
    return g / g.sum()


def build_proposal_table(
    frozen: FrozenModel,
    pool: Pool,
    aug_passes: int = 5,
    rng: np.random.Generator | None = None,
    aug: AugmentorConfig | None = None,
) -> ProposalTable:
    targets = compute_target_dists(frozen, pool.x, pool.y, aug_passes, rng, aug)
    table = {}
    for m, per_proto in targets.items():
        members = np.flatnonzero(pool.y == m)
        keys = sorted(per_proto)
        table[m] = (members, compute_proposal([per_proto[i] for i in keys], size=members.size))
    return ProposalTable(table, frozen.checksum, aug_passes)


def uniform_proposal(pool: Pool) -> ProposalTable:
    table = {}
    for m in np.unique(pool.y).tolist():
        members = np.flatnonzero(pool.y == m)
        table[m] = (members, np.full(members.size, 1.0 / members.size))
    return ProposalTable(table, "uniform", 0)


def allocate(capacity: int, class_sizes: dict[int, int]) -> dict[int, int]:
    """Equal split over classes, remainder to the earliest classes; a class
    smaller than its share keeps everything and its surplus goes round-robin
    to classes that still have room."""
    classes = sorted(class_sizes)
    if capacity < len(classes):
        raise ValueError(f"capacity {capacity} is smaller than the {len(classes)} seen classes")
    base, extra = divmod(capacity, len(classes))
    wanted = {c: base + (1 if k < extra else 0) for k, c in enumerate(classes)}
    alloc = {c: min(wanted[c], class_sizes[c]) for c in classes}
    surplus = sum(wanted.values()) - sum(alloc.values())
    while surplus > 0:
        open_classes = [c for c in classes if alloc[c] < class_sizes[c]]
        if not open_classes:
            break
        for c in open_classes:
            if surplus == 0:
                break
            alloc[c] += 1
            surplus -= 1
    return alloc


def weighted_sample_without_replacement(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` items drawn successively ∝ ``weights`` without replacement.

    Exponential keys: key = -ln(u) / w, keep the ``k`` smallest.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    u = rng.random(weights.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        keys = np.where(weights > 0, -np.log1p(-u) / weights, np.inf)
    # stable tie-break keeps the draw deterministic per seed
    return np.sort(np.argsort(keys, kind="stable")[:k])


def select_buffer(pool: Pool, proposal: ProposalTable, capacity: int, rng: np.random.Generator) -> ReplayBuffer:
    sizes = {m: idx.size for m, (idx, _) in proposal.classes.items()}
    missing = set(np.unique(pool.y).tolist()) - set(sizes)
    if missing:
        raise ValueError(f"proposal table has no entries for classes {sorted(missing)}")
    alloc = allocate(capacity, sizes)
    chosen, stored_g = [], []
    for m in sorted(proposal.classes):
        members, g = proposal.classes[m]
        pick = weighted_sample_without_replacement(g, alloc[m], rng)
        chosen.append(members[pick])
        stored_g.append(g[pick])
    keep = np.concatenate(chosen)
    return ReplayBuffer(
        pool.x[keep].copy(),
        pool.y[keep].copy(),
        pool.ids[keep].copy(),
        np.concatenate(stored_g),
        pool.task[keep].copy(),
        capacity,
    )


def write_buffer_snapshot(buffer: ReplayBuffer, path: str | Path) -> None:
    lines = [SNAPSHOT_HEADER]
    for sid, cls, g, task in zip(buffer.ids, buffer.y, buffer.g, buffer.task):
        lines.append(f"{int(sid)}\t{int(cls)}\t{float(g):.17g}\t{int(task)}\n")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(lines))
    tmp.replace(path)


def read_buffer_snapshot(path: str | Path) -> list[tuple[int, int, float, int]]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        sid, cls, g, task = line.split("\t")
        entries.append((int(sid), int(cls), float(g), int(task)))
    return entries
