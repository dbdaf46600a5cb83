"""MLP encoder, two-layer projection head and the trainable prototype layer."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import numerics as nx
from .numerics import Tape, Tensor

Array = Union[np.ndarray, Tensor]

CHECKPOINT_SCHEMA = 1


@dataclass
class ModelState:
    """Parameters of encoder f, projection g and prototypes c_i.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    Fields hold numpy arrays, or tape leaves after :func:`track`.
    """

    encoder: list[tuple[Array, Array]]
    projection: list[tuple[Array, Array]]
    prototypes: Array
    tau: float = 0.5

    @property
    def num_prototypes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.encoder[0][0].shape[0])

    @property
    def embed_dim(self) -> int:
        return int(self.projection[-1][0].shape[1])

    def parameters(self) -> dict[str, Array]:
        params: dict[str, Array] = {}
        for prefix, layers in (("encoder", self.encoder), ("projection", self.projection)):
            for k, (w, b) in enumerate(layers):
                params[f"{prefix}.{k}.weight"] = w
                params[f"{prefix}.{k}.bias"] = b
        params["prototypes"] = self.prototypes
        return params

    @classmethod
    def from_parameters(cls, params: dict[str, Array], tau: float) -> "ModelState":
        def layers(prefix):
            out, k = [], 0
            while f"{prefix}.{k}.weight" in params:
                out.append((params[f"{prefix}.{k}.weight"], params[f"{prefix}.{k}.bias"]))
                k += 1
            return out

        return cls(layers("encoder"), layers("projection"), params["prototypes"], tau)

    def copy(self) -> "ModelState":
        return ModelState.from_parameters(
            {k: np.array(_value(v), copy=True) for k, v in self.parameters().items()}, self.tau
        )


@dataclass(frozen=True)
class FrozenModel:
    """Read-only deep copy of a :class:`ModelState` (the previous model)."""

    state: ModelState = field(repr=False)
    checksum: str = ""

    @property
    def num_prototypes(self) -> int:
        return self.state.num_prototypes

    @property
    def tau(self) -> float:
        return self.state.tau


def _value(a: Array) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(
    input_dim: int,
    rng: np.random.Generator,
    *,
    hidden: tuple[int, ...] = (128, 128),
    proj_hidden: int = 128,
    embed_dim: int = 32,
    num_prototypes: int = 0,
    tau: float = 0.5,
    proto_scale: float = 0.1,
) -> ModelState:
    if tau <= 0:
        raise ValueError("tau must be positive")
    dims = (input_dim, *hidden)
    encoder = [(_glorot(rng, a, b), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
    proj_dims = (dims[-1], proj_hidden, embed_dim)
    projection = [(_glorot(rng, a, b), np.zeros(b)) for a, b in zip(proj_dims[:-1], proj_dims[1:])]
    prototypes = rng.normal(0.0, proto_scale, size=(num_prototypes, embed_dim))
    return ModelState(encoder, projection, prototypes, tau)


def _as_state(model: "ModelState | FrozenModel") -> ModelState:
    return model.state if isinstance(model, FrozenModel) else model


def backbone(model: "ModelState | FrozenModel", batch) -> Tensor:
    """Encoder output f(x): affine layers each followed by relu."""
    state = _as_state(model)
    h = nx.as_tensor(batch)
    if h.data.ndim != 2 or h.shape[1] != state.input_dim:
        raise nx.ShapeError(f"encode: expected (n, {state.input_dim}) input, got {h.shape}")
    for w, b in state.encoder:
        h = nx.relu(nx.add(nx.matmul(h, w), b))
    return h


def encode(model: "ModelState | FrozenModel", batch, *, safe: bool = False) -> Tensor:
    """Unit-norm embeddings z = normalize(g(f(x))).

    ``safe=True`` uses the epsilon-guarded normalization of training paths.
    """
    state = _as_state(model)
    h = backbone(state, batch)
    (w1, b1), (w2, b2) = state.projection
    h = nx.relu(nx.add(nx.matmul(h, w1), b1))
    h = nx.add(nx.matmul(h, w2), b2)
    return nx.l2_normalize(h, eps=nx.SAFE_EPS if safe else None)


def features(model: "ModelState | FrozenModel", batch, source: str = "projection") -> np.ndarray:
    """Untracked feature matrix for probing: ``projection`` or ``backbone``."""
    state = _as_state(model)
    x = np.asarray(batch, dtype=np.float64)
    if source == "projection":
        return encode(state, x, safe=True).data
    if source == "backbone":
        return backbone(state, x).data
    raise ValueError(f"unknown feature source {source!r}")


def prototype_scores(model: "ModelState | FrozenModel", z, kappa: float | None = None) -> Tensor:
    """Scores s_ij = normalize(c_i) . z_j / temperature, shape (K, n)."""
    state = _as_state(model)
    temperature = state.tau if kappa is None else kappa
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    c = nx.l2_normalize(state.prototypes)
    return nx.scale(nx.matmul(c, nx.transpose(z)), 1.0 / temperature)


def grow_prototypes(
    state: ModelState, new_classes: int, rng: np.random.Generator, scale: float = 0.1
) -> ModelState:
    """Append ``new_classes`` Gaussian(0, scale) prototype rows."""
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    old = _value(state.prototypes)
    rows = rng.normal(0.0, scale, size=(new_classes, old.shape[1]))
    grown = state.copy()
    grown.prototypes = np.vstack([old, rows])
    return grown


def checksum(model: "ModelState | FrozenModel") -> str:
    state = _as_state(model)
    digest = hashlib.sha256()
    for name, value in state.parameters().items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(_value(value), dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


def snapshot(model: "ModelState | FrozenModel") -> FrozenModel:
    state = _as_state(model).copy()
    for value in state.parameters().values():
        value.flags.writeable = False
    return FrozenModel(state, checksum(state))


def track(state: ModelState, tape: Tape) -> ModelState:
    """Copy of ``state`` whose parameters are leaves on ``tape``."""
    params = {k: tape.leaf(_value(v)) for k, v in state.parameters().items()}
    return ModelState.from_parameters(params, state.tau)


def gradients(tracked: ModelState, grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-parameter gradients by name; unreachable leaves get zeros."""
    return {
        name: grads.get(leaf, np.zeros(leaf.shape)) if isinstance(leaf, Tensor) else np.zeros(np.shape(leaf))
        for name, leaf in tracked.parameters().items()
    }


def save_checkpoint(model: "ModelState | FrozenModel", path: str | Path) -> None:
    state = _as_state(model)
    record = {
        "schema_version": CHECKPOINT_SCHEMA,
        "tau": state.tau,
        "dtype": "<f8",
        "parameters": [
            {
                "name": name,
                "shape": list(_value(v).shape),
                "data": base64.b64encode(np.ascontiguousarray(_value(v), dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, v in state.parameters().items()
        ],
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(record, indent=1))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> ModelState:
    record = json.loads(Path(path).read_text())
    if record.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {record.get('schema_version')!r}")
    params = {}
    for entry in record["parameters"]:
        raw = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        params[entry["name"]] = raw.reshape(entry["shape"]).astype(np.float64)
    return ModelState.from_parameters(params, float(record["tau"]))
