"""Dense 64-bit tensors with a reverse-mode differentiation tape.

Every op is a plain function that records ``(kind, input handles, cache)`` on
the tape shared by its inputs. Adjoints live in ``_ADJOINTS`` keyed by kind.
Inputs without a tape (plain arrays, untracked tensors) are constants.

    >>> tape = Tape()
    >>> x = tape.leaf([3.0])
    >>> grads = backward(reduce_sum(mul(x, x)))
    >>> grads[x]
    array([6.])
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "ShapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "log",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "dot",
    "reduce_sum",
    "reduce_mean",
    "nll_gather",
    "take_rows",
    "backward",
    "finite_diff_check",
]

# exp(709.78) is the largest finite float64
_EXP_LIMIT = 709.78
SAFE_EPS = 1e-12


class NumericsError(ArithmeticError):
    """Raised when a forward value would stop being finite."""


class ShapeError(NumericsError, ValueError):
    pass


class Node(NamedTuple):
    kind: str
    inputs: tuple  # tape handles, None for constants
    cache: tuple


class Tensor:
    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data, tape: "Tape | None" = None, tape_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f", tape_id={self.tape_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Append-only record of the ops applied to tracked tensors.

    A tape is consumed by :func:`backward`; recording onto or differentiating a
    consumed tape raises.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _check_open(self):
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")

    def leaf(self, value) -> Tensor:
        self._check_open()
        t = Tensor(np.array(value, dtype=np.float64), self, len(self.nodes))
        self.nodes.append(Node("leaf", (), (t,)))
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, cache: tuple = ()) -> Tensor:
        self._check_open()
        handles = tuple(x.tape_id if x.tape is self else None for x in inputs)
        out = Tensor(value, self, len(self.nodes))
        self.nodes.append(Node(kind, handles, cache))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(kind: str, inputs: Sequence[Tensor], value: np.ndarray, cache: tuple = ()) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericsError(f"{kind} produced non-finite values")
    tapes = {id(x.tape): x.tape for x in inputs if x.tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ValueError(f"{kind}: inputs are recorded on different tapes")
    (tape,) = tapes.values()
    return tape.record(kind, inputs, value, cache)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or a == () or b == ():
        return True
    # row-vector bias onto a 2-D batch
    return len(a) == 2 and len(b) == 1 and a[1] == b[0] or len(b) == 2 and len(a) == 1 and b[1] == a[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ---- forward ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _finish("add", (a, b), a.data + b.data, (a.shape, b.shape))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _finish("sub", (a, b), a.data - b.data, (a.shape, b.shape))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes (or with a scalar tensor)."""
    a, b = as_tensor(a), as_tensor(b)
    if not (a.shape == b.shape or a.shape == () or b.shape == ()):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _finish("mul", (a, b), a.data * b.data, (a.data, b.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _finish("scale", (a,), a.data * c, (float(c),))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _finish("matmul", (a, b), a.data @ b.data, (a.data, b.data))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
    return _finish("transpose", (a,), a.data.T.copy())


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finish("relu", (a,), np.where(mask, a.data, 0.0), (mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size and a.data.max() > _EXP_LIMIT:
        raise NumericsError(f"exp overflow: max input {a.data.max():.6g} exceeds {_EXP_LIMIT}")
    out = np.exp(a.data)
    return _finish("exp", (a,), out, (out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size and a.data.min() <= 0:
        raise NumericsError(f"log of non-positive value {a.data.min():.6g}")
    return _finish("log", (a,), np.log(a.data), (a.data,))


def l2_normalize(a, eps: float | None = None) -> Tensor:
    """Scale each row (last axis) to unit L2 norm.

    With ``eps=None`` a zero row raises; otherwise norms are clamped below at
    ``eps`` (the training-path variant).
    """
    a = as_tensor(a)
    norms = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    if eps is None:
        if np.any(norms == 0):
            raise NumericsError("l2_normalize: zero vector")
        clamped = np.zeros(norms.shape, dtype=bool)
    else:
        clamped = norms < eps
        norms = np.where(clamped, eps, norms)
    out = a.data / norms
    return _finish("l2_normalize", (a,), out, (out, norms, clamped))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _finish("softmax", (a,), out, (out,))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    return _finish("log_softmax", (a,), out, (np.exp(out),))


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal 1-D shapes, got {a.shape} and {b.shape}")
    return _finish("dot", (a, b), np.asarray(a.data @ b.data), (a.data, b.data))


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    return _finish("sum", (a,), np.asarray(a.data.sum()), (a.shape,))


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    return _finish("mean", (a,), np.asarray(a.data.mean()), (a.shape,))


def nll_gather(logp, targets) -> Tensor:
    """Negative sum of ``logp[r, targets[r]]`` over rows."""
    logp = as_tensor(logp)
    targets = np.asarray(targets, dtype=np.intp)
    if logp.data.ndim != 2 or targets.shape != (logp.shape[0],):
        raise ShapeError(f"nll_gather: log-probs {logp.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logp.shape[1]):
        raise ShapeError(f"nll_gather: target index out of range for {logp.shape}")
    rows = np.arange(targets.size)
    return _finish("nll_gather", (logp,), np.asarray(-logp.data[rows, targets].sum()), (logp.shape, targets))


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows: expected 2-D tensor and 1-D index, got {a.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape}")
    return _finish("take_rows", (a,), a.data[idx], (a.shape, idx))


# ---- adjoints --------------------------------------------------------------
# each maps (upstream grad, node cache) -> tuple of input grads


def _adj_add(g, cache):
    sa, sb = cache
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _adj_sub(g, cache):
    sa, sb = cache
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _adj_mul(g, cache):
    a, b = cache
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _adj_l2_normalize(g, cache):
    out, norms, clamped = cache
    radial = np.sum(g * out, axis=-1, keepdims=True)
    # clamped rows were divided by a constant
    radial = np.where(clamped, 0.0, radial)
    return ((g - out * radial) / norms,)


def _adj_softmax(g, cache):
    (out,) = cache
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def _adj_nll_gather(g, cache):
    shape, targets = cache
    grad = np.zeros(shape)
    grad[np.arange(targets.size), targets] = -g
    return (grad,)


def _adj_take_rows(g, cache):
    shape, idx = cache
    grad = np.zeros(shape)
    np.add.at(grad, idx, g)
    return (grad,)


_ADJOINTS: dict[str, Callable] = {
    "add": _adj_add,
    "sub": _adj_sub,
    "mul": _adj_mul,
    "scale": lambda g, c: (g * c[0],),
    "matmul": lambda g, c: (g @ c[1].T, c[0].T @ g),
    "transpose": lambda g, c: (g.T,),
    "relu": lambda g, c: (np.where(c[0], g, 0.0),),
    "exp": lambda g, c: (g * c[0],),
    "log": lambda g, c: (g / c[0],),
    "l2_normalize": _adj_l2_normalize,
    "softmax": _adj_softmax,
    "log_softmax": lambda g, c: (g - c[0] * np.sum(g, axis=-1, keepdims=True),),
    "dot": lambda g, c: (g * c[1], g * c[0]),
    "sum": lambda g, c: (np.broadcast_to(g, c[0]).copy(),),
    "mean": lambda g, c: (np.broadcast_to(g / max(1, int(np.prod(c[0]))), c[0]).copy(),),
    "nll_gather": _adj_nll_gather,
    "take_rows": _adj_take_rows,
}


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``root``; returns ``{leaf: gradient}``.

    Only leaves reachable from ``root`` appear in the result. The tape is
    consumed.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    if tape is None:
        raise ValueError("root is not recorded on a tape")
    tape._check_open()
    pending: dict[int, np.ndarray] = {root.tape_id: np.ones(root.shape)}
    result: dict[Tensor, np.ndarray] = {}
    for handle in range(root.tape_id, -1, -1):
        g = pending.pop(handle, None)
        if g is None:
            continue
        node = tape.nodes[handle]
        if node.kind == "leaf":
            result[node.cache[0]] = g
            continue
        for parent, pg in zip(node.inputs, _ADJOINTS[node.kind](g, node.cache)):
            if parent is None:
                continue
            if parent in pending:
                pending[parent] = pending[parent] + pg
            else:
                pending[parent] = pg
    tape.consumed = True
    tape.nodes = []
    return result


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of tensors (one per entry of ``params``) to a scalar
    tensor; it is called once on tracked leaves and then on untracked copies
    for every perturbed coordinate. With ``max_coords`` only a random subset
    of coordinates is perturbed.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    grads = backward(f(leaves))
    analytic = [grads.get(leaf, np.zeros(p.shape)) for leaf, p in zip(leaves, params)]

    coords = [(k, i) for k, p in enumerate(params) for i in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[c] for c in sorted(picked)]

    def evaluate(k: int, i: int, delta: float) -> float:
        shifted = [p.copy() for p in params]
        shifted[k].reshape(-1)[i] += delta
        value = f([Tensor(p) for p in shifted]).item()
        if not np.isfinite(value):
            raise NumericsError(f"f is non-finite at perturbed point (param {k}, coord {i})")
        return value

    worst = 0.0
    for k, i in coords:
        numeric = (evaluate(k, i, h) - evaluate(k, i, -h)) / (2 * h)
        exact = analytic[k].reshape(-1)[i]
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact)))
    return worst
