"""Sequential training: mixed batches, warmup+cosine SGD, buffer reselection."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .evaluation import SCENARIOS, AccuracyMatrix, ProbeConfig, RunMetrics, evaluate, train_linear_probe
from .losses import BatchView, total_objective
from .model import FrozenModel, ModelState, gradients, grow_prototypes, init_model, snapshot, track
from .replay import (
    Pool,
    ProposalTable,
    ReplayBuffer,
    build_proposal_table,
    select_buffer,
    uniform_proposal,
    write_buffer_snapshot,
)
from .tasks import AugmentorConfig, Task, TaskStream, augment

# selection: how end_task scores the pool; importance_weights: IS offsets in
# the loss; distill: keep the configured lam (else PRD is switched off)
PRESETS: dict[str, dict] = {
    "full": {"selection": "proposal", "importance_weights": True, "distill": True},
    "no_is": {"selection": "uniform", "importance_weights": False, "distill": True},
    "no_prd": {"selection": "proposal", "importance_weights": True, "distill": False},
    "no_is_no_prd": {"selection": "uniform", "importance_weights": False, "distill": False},
    "rbs_only": {"selection": "proposal", "importance_weights": False, "distill": False},
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    eta_proto: float = 0.01
    batch_size: int = 64
    tau: float = 0.5
    kappa_past: float = 0.1
    kappa_cur: float = 0.2
    lam: float = 0.6
    epochs_first: int = 50
    epochs_later: int = 20
    warmup_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffer_capacity: int = 20
    # gaussian-noise: std as a fraction of the stream's feature std;
    # crop-flip: pad width in pixels
    aug_kind: str = "gaussian-noise"
    aug_strength: float = 0.05
    aug_passes: int = 5
    selection: str = "proposal"
    importance_weights: bool = True
    reduction: str = "mean"
    # "uniform": buffered half drawn with replacement; "full": whole buffer each step
    buffer_sampling: str = "uniform"
    hidden: tuple[int, ...] = (128, 128)
    proj_hidden: int = 128
    embed_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("eta", "eta_proto", "tau", "kappa_past", "kappa_cur"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.epochs_first < 1 or self.epochs_later < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0 or self.warmup_epochs > min(self.epochs_first, self.epochs_later):
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.selection not in ("proposal", "uniform"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.buffer_sampling not in ("uniform", "full"):
            raise ValueError(f"unknown buffer_sampling {self.buffer_sampling!r}")
        if self.aug_passes < 1:
            raise ValueError("aug_passes must be >= 1")

    def with_preset(self, name: str) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        spec = PRESETS[name]
        return dataclasses.replace(
            self,
            selection=spec["selection"],
            importance_weights=spec["importance_weights"],
            lam=self.lam if spec["distill"] else 0.0,
        )

    def augmentor(self, stream: TaskStream) -> AugmentorConfig:
        if self.aug_kind == "gaussian-noise":
            return AugmentorConfig("gaussian-noise", self.aug_strength * stream.feature_std)
        if self.aug_kind == "crop-flip":
            return AugmentorConfig("crop-flip", self.aug_strength, stream.image_shape)
        return AugmentorConfig(self.aug_kind)


@dataclass
class RunState:
    model: ModelState
    buffer: ReplayBuffer
    frozen: FrozenModel | None = None
    completed_tasks: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    seen_classes: tuple[int, ...] = ()
    last_proposal: ProposalTable | None = None
    last_step: dict = field(default_factory=dict, repr=False)

    @classmethod
    def start(cls, input_dim: int, cfg: TrainConfig) -> "RunState":
        root = np.random.default_rng(cfg.seed)
        names = ("init", "batches", "augment", "select", "probe", "prototypes")
        rngs = dict(zip(names, root.spawn(len(names))))
        model = init_model(
            input_dim,
            rngs["init"],
            hidden=cfg.hidden,
            proj_hidden=cfg.proj_hidden,
            embed_dim=cfg.embed_dim,
            tau=cfg.tau,
        )
        return cls(model, ReplayBuffer.empty(input_dim, cfg.buffer_capacity), rngs=rngs)


def steps_per_epoch(n_current: int, batch_size: int, has_buffer: bool) -> int:
    chunk = batch_size // 2 if has_buffer else batch_size
    return -(-n_current // chunk)


def make_batches(
    task: Task,
    buffer: ReplayBuffer,
    batch_size: int,
    rng: np.random.Generator,
    *,
    buffer_sampling: str = "uniform",
    max_redraws: int = 10,
) -> list[BatchView]:
    """One epoch of batches over the current task.

    With a nonempty buffer each batch is batch_size/2 current rows plus as
    many buffered rows drawn uniformly with replacement (or the whole buffer
    with ``buffer_sampling="full"``). A batch with a single class is redrawn
    up to ``max_redraws`` times.
    """
    n = len(task.train_y)
    if n == 0:
        raise ValueError(f"task {task.task_id} has no training samples")
    has_buffer = len(buffer) > 0
    if has_buffer and batch_size % 2:
        raise ValueError("batch_size must be even when the buffer is nonempty")
    chunk = batch_size // 2 if has_buffer else batch_size
    order = rng.permutation(n)
    past = tuple(sorted(set(buffer.y.tolist())))
    batches = []
    for start in range(0, n, chunk):
        cur = order[start : start + chunk]
        if not has_buffer:
            batches.append(
                BatchView(
                    task.train_x[cur],
                    task.train_y[cur],
                    current_classes=task.classes,
                    current_ids=task.train_ids[cur],
                )
            )
            continue
        for _ in range(max_redraws):
            if buffer_sampling == "full":
                picked = np.arange(len(buffer))
            else:
                picked = rng.integers(len(buffer), size=cur.size)
            labels = np.concatenate([task.train_y[cur], buffer.y[picked]])
            if np.unique(labels).size >= 2:
                break
        batches.append(
            BatchView(
                task.train_x[cur],
                task.train_y[cur],
                buffer.x[picked],
                buffer.y[picked],
                buffer.g[picked],
                current_classes=task.classes,
                past_classes=past,
                current_ids=task.train_ids[cur],
                buffer_ids=buffer.ids[picked],
            )
        )
    return batches


def lr_at(epoch: int, step: int, cfg: TrainConfig, n_steps: int, epochs: int, base: float | None = None) -> float:
    """Linear warmup to ``base`` over the warmup epochs, then cosine decay to 0.

    ``n_steps`` is the number of steps per epoch; ``base`` defaults to eta.
    """
    base = cfg.eta if base is None else base
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    g = epoch * n_steps + step
    warm = cfg.warmup_epochs * n_steps
    total = epochs * n_steps
    if g < warm:
        return base * (g + 1) / warm
    if total == warm:
        return base
    return base * (1.0 + math.cos(math.pi * (g - warm) / (total - warm))) / 2.0


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    lr_proto: float,
    momentum: float,
    weight_decay: float,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Heavy-ball SGD: d = grad + wd*p (network only), v = mu*v + d, p -= lr*v."""
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        is_proto = name == "prototypes"
        d = grads[name] if is_proto else grads[name] + weight_decay * p
        v = momentum * velocity[name] + d if name in velocity else d
        new_velocity[name] = v
        new_params[name] = p - (lr_proto if is_proto else lr) * v
    return new_params, new_velocity


Objective = Callable[[ModelState, "FrozenModel | None", BatchView, TrainConfig], nx.Tensor]


def default_objective(state: ModelState, frozen: FrozenModel | None, batch: BatchView, cfg: TrainConfig) -> nx.Tensor:
    return total_objective(
        state,
        frozen,
        batch,
        cfg.lam,
        kappa_cur=cfg.kappa_cur,
        kappa_past=cfg.kappa_past,
        importance_weights=cfg.importance_weights,
        reduction=cfg.reduction,
    ).objective


def _augment_batch(batch: BatchView, aug: AugmentorConfig, rng: np.random.Generator) -> BatchView:
    if aug.kind == "identity":
        return batch
    return dataclasses.replace(
        batch,
        current_x=augment(batch.current_x, aug, rng),
        buffer_x=augment(batch.buffer_x, aug, rng) if batch.n_buffered else None,
    )


def train_task(
    run: RunState,
    task: Task,
    cfg: TrainConfig,
    aug: AugmentorConfig | None = None,
    objective: Objective = default_objective,
) -> RunState:
    """Grow prototypes for the task's classes and run its SGD epochs in place."""
    overlap = set(task.classes) & set(run.seen_classes)
    if overlap:
        raise ValueError(f"task {task.task_id} repeats seen classes {sorted(overlap)}")
    expected = tuple(range(run.model.num_prototypes, run.model.num_prototypes + len(task.classes)))
    if tuple(task.classes) != expected:
        raise ValueError(f"task classes {task.classes} must extend the prototype rows as {expected}")
    aug = aug or AugmentorConfig()
    run.model = grow_prototypes(run.model, len(task.classes), run.rngs["prototypes"])
    run.seen_classes = run.seen_classes + tuple(task.classes)
    # the model has not moved since the last snapshot, so this is theta_prev
    # with rows for the new classes; PRD needs matching prototype counts
    frozen = snapshot(run.model) if run.completed_tasks else None

    epochs = cfg.epochs_first if run.completed_tasks == 0 else cfg.epochs_later
    n_steps = steps_per_epoch(len(task.train_y), cfg.batch_size, len(run.buffer) > 0)
    velocity: dict[str, np.ndarray] = {}
    global_step = 0
    for epoch in range(epochs):
        batches = make_batches(
            task, run.buffer, cfg.batch_size, run.rngs["batches"], buffer_sampling=cfg.buffer_sampling
        )
        for step, batch in enumerate(batches):
            batch = _augment_batch(batch, aug, run.rngs["augment"])
            lr = lr_at(epoch, step, cfg, n_steps, epochs)
            lr_proto = lr_at(epoch, step, cfg, n_steps, epochs, base=cfg.eta_proto)
            tape = nx.Tape()
            tracked = track(run.model, tape)
            try:
                loss = objective(tracked, frozen, batch, cfg)
                grads = gradients(tracked, nx.backward(loss))
            except nx.NumericsError as err:
                raise TrainingError(
                    f"task {task.task_id} step {global_step} (epoch {epoch}): non-finite loss or gradient: {err}"
                ) from err
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"task {task.task_id} step {global_step}: loss is {value}")
            params = {k: np.asarray(v) for k, v in run.model.parameters().items()}
            new_params, velocity = sgd_step(
                params, grads, velocity, lr, lr_proto, cfg.momentum, cfg.weight_decay
            )
            run.last_step = {
                "params": params,
                "grads": grads,
                "velocity": velocity,
                "lr": lr,
                "lr_proto": lr_proto,
                "new_params": new_params,
            }
            run.model = ModelState.from_parameters(new_params, run.model.tau)
            run.loss_trace.append(value)
            global_step += 1
    return run


def end_task(run: RunState, task: Task, cfg: TrainConfig, aug: AugmentorConfig | None = None) -> Pool:
    """Snapshot the model, score M ∪ D_t and reselect the buffer in place.

    Returns the scored pool (the probe's training set R_t).
    """
    run.frozen = snapshot(run.model)
    pool = Pool.combine(run.buffer, task.train_x, task.train_y, task.train_ids, task.task_of)
    if cfg.selection == "proposal":
        table = build_proposal_table(run.frozen, pool, cfg.aug_passes, run.rngs["select"], aug)
    else:
        table = uniform_proposal(pool)
    run.last_proposal = table
    run.buffer = select_buffer(pool, table, cfg.buffer_capacity, run.rngs["select"])
    run.completed_tasks += 1
    return pool


def run_experiment(
    stream: TaskStream,
    cfg: TrainConfig,
    probe_cfg: ProbeConfig | None = None,
    *,
    out_dir: str | Path | None = None,
    objective: Objective = default_objective,
    scenarios=SCENARIOS,
) -> RunMetrics:
    """Train on every task in order, probing after each one.

    With ``out_dir`` a buffer snapshot is written after every task.
    """
    probe_cfg = probe_cfg or ProbeConfig()
    aug = cfg.augmentor(stream)
    run = RunState.start(stream.input_dim, cfg)
    T = len(stream)
    matrices = {s: AccuracyMatrix.empty(T, s) for s in scenarios}
    buffers = []
    for l, task in enumerate(stream.tasks):
        train_task(run, task, cfg, aug, objective)
        pool = end_task(run, task, cfg, aug)
        buffers.append(run.buffer)
        if out_dir is not None:
            write_buffer_snapshot(run.buffer, Path(out_dir) / f"buffer_task{task.task_id}.tsv")
        if probe_cfg.train_on == "pool":
            px, py = pool.x, pool.y
        else:
            px, py = run.buffer.x, run.buffer.y
        probe = train_linear_probe(run.frozen, px, py, probe_cfg, run.rngs["probe"], classes=run.seen_classes)
        for s, accs in evaluate(probe, run.frozen, stream, l + 1, scenarios).items():
            matrices[s].set_row(l, accs)
    return RunMetrics(matrices, list(run.loss_trace), {"run": run, "buffers": buffers})
