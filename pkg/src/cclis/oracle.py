"""Brute-force references: full-data loss, importance sampling, simplex KL, MSE study."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import numerics as nx
from .model import ModelState, backbone, encode, gradients, init_model, prototype_scores, track
from .numerics import Tape, Tensor
from .replay import compute_proposal

log = logging.getLogger(__name__)

STUDY_COLUMNS = (
    "proposal_kind",
    "jm",
    "replications",
    "mse",
    "var_weight",
    "theorem1_bound",
    "m_bound",
    "seed",
    "theorem1_bound_batch",
)


class ConvergenceError(RuntimeError):
    pass


@dataclass
class ISInstance:
    """Discrete target ``pi`` (normalized, or unnormalized when ``Z`` is
    unknown), proposal ``q`` and integrand ``f`` over the same support."""

    pi: np.ndarray
    q: np.ndarray
    f: np.ndarray
    Z: float | None = None

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.pi.ndim != 1 or self.pi.shape != self.q.shape or self.f.shape[:1] != self.pi.shape:
            raise ValueError("pi, q and f must share the support size")
        if np.any(self.pi < 0) or np.any(self.q < 0):
            raise ValueError("pi and q must be non-negative")
        if np.any((self.pi > 0) & (self.q <= 0)):
            raise ValueError("support violation: q = 0 where pi > 0")
        if not np.isclose(self.q.sum(), 1.0, atol=1e-12):
            raise ValueError("q must sum to 1")

    def exact(self) -> np.ndarray:
        """E_pi f by direct summation."""
        w = self.pi / self.pi.sum()
        return np.tensordot(w, self.f, axes=1)


def full_loss(state: ModelState, x, y, reduction: str = "sum") -> Tensor:
    """Prototype InfoNCE over every sample, grouped by class:

    sum_i [ |S_i| log sum_k exp(s_ik) - sum_{j in S_i} s_ij ].
    """
    y = np.asarray(y, dtype=np.intp)
    scores = prototype_scores(state, encode(state, x, safe=True))
    total = None
    for i in np.unique(y).tolist():
        row = nx.take_rows(scores, np.array([i]))
        members = (y == i).astype(np.float64)[None, :]
        lse = nx.log(nx.reduce_sum(nx.exp(row)))
        term = nx.sub(nx.scale(lse, float(members.sum())), nx.reduce_sum(nx.mul(row, members)))
        total = term if total is None else nx.add(total, term)
    if reduction == "mean":
        return nx.scale(total, 1.0 / len(y))
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def full_gradient(state: ModelState, x, y) -> dict[str, np.ndarray]:
    tape = Tape()
    tracked = track(state, tape)
    return gradients(tracked, nx.backward(full_loss(tracked, x, y)))


def classical_is(inst: ISInstance, L: int, rng: np.random.Generator) -> np.ndarray:
    """(1/L) sum pi(z)/q(z) f(z), z ~ q; needs a normalized pi."""
    if not np.isclose(inst.pi.sum(), 1.0, atol=1e-12):
        raise ValueError("classical IS needs a normalized target")
    z = rng.choice(inst.q.size, size=L, p=inst.q)
    w = inst.pi[z] / inst.q[z]
    return np.tensordot(w, inst.f[z], axes=1) / L


def biased_is(inst: ISInstance, L: int, rng: np.random.Generator) -> np.ndarray:
    """Self-normalized estimate sum (pi/q) f / sum (pi/q), z ~ q."""
    z = rng.choice(inst.q.size, size=L, p=inst.q)
    w = inst.pi[z] / inst.q[z]
    if w.sum() <= 0:
        raise ValueError("all importance weights are zero")
    return np.tensordot(w, inst.f[z], axes=1) / w.sum()


def simplex_projection(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def kl_objective(targets, g: np.ndarray) -> float:
    """(1/n) sum_i KL(p_i || g), with 0 log 0 = 0."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    g = np.asarray(g, dtype=np.float64)
    pos = targets > 0
    if np.any(pos & (g[None, :] <= 0)):
        return np.inf
    ratio = np.where(pos, targets / np.where(g > 0, g, 1.0)[None, :], 1.0)
    return float(np.mean(np.sum(np.where(pos, targets * np.log(ratio), 0.0), axis=1)))


@dataclass
class SimplexResult:
    g: np.ndarray
    objective: float
    iterations: int
    grad_norm: float


def simplex_minimize_kl(
    targets, step: float = 0.1, max_iter: int = 10_000, tol: float = 1e-6
) -> SimplexResult:
    """Projected gradient descent for argmin_g (1/n) sum KL(p_i || g) on the simplex.

    Each iteration starts from ``step`` and halves it until the objective
    decreases enough (Armijo). Convergence is measured by the norm of the
    projected-gradient map ``g - P(g - grad)``; iteration also stops once
    that norm has not improved for 200 steps.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n, d = targets.shape
    if d < 2:
        raise ValueError("support size must be >= 2")
    if np.any(targets < 0) or not np.allclose(targets.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("targets must be probability vectors")
    p_bar = targets.mean(axis=0)

    def grad(g):
        return np.where(p_bar > 0, -p_bar / np.where(g > 0, g, 1.0), 0.0)

    def gap(g):
        return float(np.linalg.norm(g - simplex_projection(g - grad(g))))

    g = np.full(d, 1.0 / d)
    obj = kl_objective(targets, g)
    it, best, best_it = 0, np.inf, 0
    for it in range(1, max_iter + 1):
        current = gap(g)
        if current < 1e-13:
            break
        if current < 0.999 * best:
            best, best_it = current, it
        elif it - best_it > 200:
            # stalled at roundoff; the tolerance check below decides
            break
        dg = grad(g)
        eta = step
        while True:
            cand = simplex_projection(g - eta * dg)
            cand_obj = kl_objective(targets, cand)
            # slack for roundoff: near the optimum the required decrease drops
            # below float resolution of the objective
            slack = 8 * np.finfo(float).eps * max(1.0, abs(obj))
            if cand_obj <= obj + dg @ (cand - g) + np.sum((cand - g) ** 2) / (2 * eta) + slack:
                break
            eta /= 2
            if eta < 1e-20:
                raise ConvergenceError("line search failed")
        g, obj = cand, cand_obj
    norm = gap(g)
    if norm > tol:
        raise ConvergenceError(f"projected gradient norm {norm:.3e} > {tol:g} after {it} iterations")
    return SimplexResult(g, obj, it, norm)


@dataclass(frozen=True)
class MseStudyConfig:
    """Instances: one negative class m of ``class_size`` samples scored by
    ``n_anchors`` other prototypes of a small random model. ``skew`` scales
    the scores (lower temperature) so the target distributions are peaked."""

    class_size: int = 16
    n_anchors: int = 3
    input_dim: int = 6
    hidden: tuple[int, ...] = (16,)
    embed_dim: int = 4
    tau: float = 0.5
    skew: float = 4.0
    jm_grid: tuple[int, ...] = (2, 4, 8, 16)
    replications: int = 200
    n_instances: int = 100
    batch_size: int = 1
    proposals: tuple[str, ...] = ("uniform", "eq12", "adversarial")
    # "iid": |J_m| draws from g; "full": every sample retained exactly once
    retention: str = "iid"
    seed: int = 0

    def __post_init__(self):
        if self.replications < 1 or self.n_instances < 1:
            raise ValueError("replications and n_instances must be >= 1")
        if self.retention not in ("iid", "full"):
            raise ValueError(f"unknown retention {self.retention!r}")


@dataclass
class GradientInstance:
    """Per-sample score gradients h[i, k] = d s_ik / d theta (flattened) for
    anchors i and class-m samples k, plus the positive gradient h_pos[i]."""

    scores: np.ndarray
    h: np.ndarray
    h_pos: np.ndarray

    @property
    def targets(self) -> np.ndarray:
        e = np.exp(self.scores - self.scores.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def exact(self) -> np.ndarray:
        """mu_i = -h_pos + sum_k p_ik h_ik, shape (anchors, params)."""
        return -self.h_pos + np.einsum("ik,ikp->ip", self.targets, self.h)

    @property
    def m_bound(self) -> float:
        return float(np.linalg.norm(self.h, axis=2).max())


def _flat(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads.values()])


def _projection_norms(state: ModelState, x: np.ndarray) -> np.ndarray:
    h = backbone(state, x).data
    (w1, b1), (w2, b2) = state.projection
    return np.linalg.norm(np.maximum(h @ w1 + b1, 0.0) @ w2 + b2, axis=1)


def build_gradient_instance(
    cfg: MseStudyConfig, rng: np.random.Generator, min_norm: float = 0.1, max_tries: int = 100
) -> GradientInstance:
    """Random small model and inputs. Draws whose pre-normalization
    embeddings come near zero are rejected; their score gradients blow up."""
    for _ in range(max_tries):
        state = init_model(
            cfg.input_dim,
            rng,
            hidden=cfg.hidden,
            proj_hidden=cfg.embed_dim * 2,
            embed_dim=cfg.embed_dim,
            num_prototypes=cfg.n_anchors,
            tau=cfg.tau / cfg.skew,
            proto_scale=1.0,
        )
        x = rng.normal(size=(cfg.class_size, cfg.input_dim))
        x_pos = rng.normal(size=(cfg.n_anchors, cfg.input_dim))
        if min(_projection_norms(state, x).min(), _projection_norms(state, x_pos).min()) > min_norm:
            break
    else:
        raise RuntimeError("could not draw a well-conditioned instance")

    def score_grad(inputs, i, k):
        tape = Tape()
        tracked = track(state, tape)
        s = prototype_scores(tracked, encode(tracked, inputs, safe=True))
        picked = nx.take_rows(s, np.array([i]))
        onehot = np.zeros((1, len(inputs)))
        onehot[0, k] = 1.0
        return _flat(gradients(tracked, nx.backward(nx.reduce_sum(nx.mul(picked, onehot)))))

    scores = prototype_scores(state, encode(state, x, safe=True)).data
    h = np.stack([np.stack([score_grad(x, i, k) for k in range(cfg.class_size)]) for i in range(cfg.n_anchors)])
    h_pos = np.stack([score_grad(x_pos, i, i) for i in range(cfg.n_anchors)])
    return GradientInstance(scores, h, h_pos)


def proposal_for(kind: str, inst: GradientInstance) -> np.ndarray:
    p = inst.targets
    if kind == "uniform":
        return np.full(p.shape[1], 1.0 / p.shape[1])
    if kind == "eq12":
        return compute_proposal(list(p))
    if kind == "adversarial":
        g = 1.0 - p.mean(axis=0)
        return g / g.sum()
    raise ValueError(f"unknown proposal kind {kind!r}")


def estimate_mse(
    inst: GradientInstance, g: np.ndarray, jm: int, replications: int, rng: np.random.Generator, retention: str = "iid"
) -> float:
    """Mean over anchors of E ||mu_hat_i - mu_i||^2 with self-normalized weights."""
    mu = inst.exact()
    e = np.exp(inst.scores)
    if retention == "full":
        draws = np.tile(np.arange(g.size), (replications, 1))
    else:
        draws = rng.choice(g.size, size=(replications, jm), p=g)
    w = e[:, draws] / (g[draws] * draws.shape[1])[None]  # (anchors, R, jm)
    w = w / w.sum(axis=2, keepdims=True)
    mu_hat = -inst.h_pos[:, None, :] + np.einsum("irj,irjp->irp", w, inst.h[:, draws])
    return float(np.mean(np.sum((mu_hat - mu[:, None, :]) ** 2, axis=2)))


def weight_variance(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """var_g(p_i / g) for each anchor row of ``p``."""
    return np.sum(p**2 / g[None, :], axis=1) - 1.0


@dataclass
class StudyReport:
    rows: list[dict]
    paired: dict[tuple[str, int], np.ndarray] = field(repr=False, default_factory=dict)
    bound_violations: list[dict] = field(default_factory=list)
    loose_rows: list[dict] = field(default_factory=list)

    def sign_test(self, better: str = "eq12", worse: str = "uniform", jm: int | None = None):
        """One-sided paired sign test that ``better`` has MSE <= ``worse``.

        Pooled over the jm grid unless ``jm`` is given. Returns
        (wins, trials, p-value).
        """
        jms = sorted({k for (_, k) in self.paired}) if jm is None else [jm]
        a = np.concatenate([self.paired[(better, k)] for k in jms])
        b = np.concatenate([self.paired[(worse, k)] for k in jms])
        wins = int(np.sum(a <= b))
        return wins, a.size, float(binomtest(wins, a.size, 0.5, alternative="greater").pvalue)


def mse_study(cfg: MseStudyConfig) -> StudyReport:
    """Monte-Carlo MSE of the self-normalized IS gradient for each proposal
    and |J_m|, next to the variance-based bound (M^2/|J_m|)(1 + var_g(p_i/g)).

    Every instance seed gets its own generator; aggregation runs in a fixed
    order.
    """
    root = np.random.default_rng(cfg.seed)
    children = root.spawn(cfg.n_instances)
    per = {(k, j): [] for k in cfg.proposals for j in cfg.jm_grid}
    var_w = {(k, j): [] for k in cfg.proposals for j in cfg.jm_grid}
    bound = {(k, j): [] for k in cfg.proposals for j in cfg.jm_grid}
    m_max = 0.0
    for child in children:
        build_rng, draw_rng = child.spawn(2)
        inst = build_gradient_instance(cfg, build_rng)
        m = inst.m_bound
        m_max = max(m_max, m)
        draw_streams = draw_rng.spawn(len(cfg.proposals) * len(cfg.jm_grid))
        s = 0
        for kind in cfg.proposals:
            g = proposal_for(kind, inst)
            vw = weight_variance(inst.targets, g)
            for jm in cfg.jm_grid:
                per[(kind, jm)].append(estimate_mse(inst, g, jm, cfg.replications, draw_streams[s], cfg.retention))
                var_w[(kind, jm)].append(float(vw.mean()))
                bound[(kind, jm)].append(float(np.mean(m**2 / jm * (1.0 + vw))))
                s += 1

    report = StudyReport(rows=[], paired={key: np.array(v) for key, v in per.items()})
    for kind in cfg.proposals:
        for jm in cfg.jm_grid:
            vals = np.array(per[(kind, jm)])
            mse = float(vals.mean())
            b = float(np.mean(bound[(kind, jm)]))
            row = {
                "proposal_kind": kind,
                "jm": jm,
                "replications": cfg.replications * cfg.n_instances,
                "mse": mse,
                "var_weight": float(np.mean(var_w[(kind, jm)])),
                "theorem1_bound": b,
                "m_bound": m_max,
                "seed": cfg.seed,
                "theorem1_bound_batch": b * cfg.batch_size**2,
            }
            report.rows.append(row)
            ci = 1.96 * vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0.0
            if mse - ci > b:
                log.warning("MSE %.3g exceeds bound %.3g for %s, jm=%d", mse, b, kind, jm)
                report.bound_violations.append(row)
            if mse > 0 and b > 10 * mse:
                report.loose_rows.append(row)
    return report


def write_study_csv(report: StudyReport, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STUDY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
    tmp.replace(path)
