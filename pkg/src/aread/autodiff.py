"""Dense 2-D reverse-mode autodiff, parameter storage and Adam.

Every value is a float64 ``numpy`` array of rank 2.  Operations build a tape
implicitly through parent links; ``Tensor.backward`` walks it in reverse
topological order.  Gradients accumulate additively, so a value used twice
receives the sum of both contributions.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operands of a primitive have incompatible shapes."""


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool | None = None,
        name: str | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"Tensor: expected a 2-D array, got shape {value.shape}")
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node.  A 1x1 tensor defaults to upstream 1."""
        if grad is None:
            if self.shape != (1, 1):
                raise ShapeError(f"backward: implicit seed needs a 1x1 tensor, got {self.shape}")
            grad = np.ones((1, 1))
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior buffers are not needed after propagation
                node.grad = None


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _node(value, parents, backward) -> Tensor:
    return Tensor(value, parents, backward)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)

    def backward(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    return _node(a.value @ b.value, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    _check(bias.shape == (1, x.shape[1]), "add_bias", x.shape, bias.shape)

    def backward(g):
        x.accumulate(g)
        bias.accumulate(g.sum(axis=0, keepdims=True))

    return _node(x.value + bias.value, (x, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "add", a.shape, b.shape)

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _node(a.value + b.value, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x.accumulate(g * c)

    return _node(x.value * c, (x,), backward)


def mul_column(w: Tensor, x: Tensor) -> Tensor:
    """Scale row ``r`` of ``x`` by ``w[r, 0]``."""
    _check(w.shape == (x.shape[0], 1), "mul_column", w.shape, x.shape)

    def backward(g):
        w.accumulate((g * x.value).sum(axis=1, keepdims=True))
        x.accumulate(g * w.value)

    return _node(w.value * x.value, (w, x), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def backward(g):
        x.accumulate(g * mask)

    return _node(np.where(mask, x.value, 0.0), (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)

    def backward(g):
        x.accumulate(g * s * (1.0 - s))

    return _node(s, (x,), backward)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_columns(x: Tensor) -> Tensor:
    """Softmax down each column, so every column sums to one."""
    s = _softmax(x.value, axis=0)

    def backward(g):
        x.accumulate(s * (g - (g * s).sum(axis=0, keepdims=True)))

    return _node(s, (x,), backward)


def group_softmax(x: Tensor, group: int) -> Tensor:
    """Softmax over consecutive column blocks of width ``group``, per row.

    Row ``r`` block ``n`` holds one column of a sample's gate matrix, so this is
    ``softmax_columns`` applied to every sample's reshaped gate matrix at once.
    """
    rows, cols = x.shape
    _check(group >= 1 and cols % group == 0, "group_softmax", x.shape, (group,))
    s3 = _softmax(x.value.reshape(rows, cols // group, group), axis=2)

    def backward(g):
        g3 = g.reshape(s3.shape)
        gx = s3 * (g3 - (g3 * s3).sum(axis=2, keepdims=True))
        x.accumulate(gx.reshape(rows, cols))

    return _node(s3.reshape(rows, cols), (x,), backward)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along columns."""
    _check(len(xs) > 0 and len({t.shape[0] for t in xs}) == 1, "concat", *(t.shape for t in xs))
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            t.accumulate(g[:, lo:hi])

    return _node(np.concatenate([t.value for t in xs], axis=1), tuple(xs), backward)


def take_columns(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    _check(idx.size > 0 and idx.max() < x.shape[1] and idx.min() >= 0, "take_columns", x.shape, idx.shape)

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (slice(None), idx), g)
        x.accumulate(gx)

    return _node(x.value[:, idx], (x,), backward)


def take_rows(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        x.accumulate(gx)

    return _node(x.value[idx], (x,), backward)


def normalize_rows(x: Tensor) -> tuple[Tensor, int]:
    """Divide each row by its sum.

    Returns the result and the number of rows whose sum was zero; those rows are
    left at zero instead of producing NaN.
    """
    s = x.value.sum(axis=1, keepdims=True)
    zero = s == 0.0
    safe = np.where(zero, 1.0, s)
    y = x.value / safe

    def backward(g):
        x.accumulate((g - (g * y).sum(axis=1, keepdims=True)) / safe)

    return _node(y, (x,), backward), int(zero.sum())


def weighted_sum(w: Tensor, xs: Sequence[Tensor]) -> Tensor:
    """``sum_i w[:, i] * xs[i]`` with per-row weights."""
    _check(
        len(xs) == w.shape[1] and all(t.shape == xs[0].shape and t.shape[0] == w.shape[0] for t in xs),
        "weighted_sum",
        w.shape,
        *(t.shape for t in xs),
    )
    stacked = np.stack([t.value for t in xs])  # (m, B, h)
    out = np.einsum("bm,mbh->bh", w.value, stacked)

    def backward(g):
        w.accumulate(np.einsum("bh,mbh->bm", g, stacked))
        for i, t in enumerate(xs):
            t.accumulate(g * w.value[:, i : i + 1])

    return _node(out, (w, *xs), backward)


def row_mean(x: Tensor) -> Tensor:
    n = x.shape[1]

    def backward(g):
        x.accumulate(np.repeat(g / n, n, axis=1))

    return _node(x.value.mean(axis=1, keepdims=True), (x,), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for vocabulary of {table.shape[0]}")

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        table.accumulate(gt)

    return _node(table.value[ids], (table,), backward)


def bce_loss(p: Tensor, y: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over columns, averaged over rows.

    ``y`` is a column of labels broadcast across all columns of ``p``.
    Probabilities are clamped to [1e-7, 1-1e-7]; the gradient is evaluated at the
    clamped value and passed straight through.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    _check(y.shape[0] == p.shape[0], "bce_loss", p.shape, y.shape)
    rows = p.shape[0]
    pc = np.clip(p.value, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))

    def backward(g):
        p.accumulate(g[0, 0] * (pc - y) / (pc * (1.0 - pc)) / rows)

    return _node(np.array([[loss.sum() / rows]]), (p,), backward)


# ---------------------------------------------------------------- parameters


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass(frozen=True)
class ParamSnapshot:
    values: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int

    def layout(self) -> list[tuple[str, tuple[int, int]]]:
        return [(k, a.shape) for k, a in self.values.items()]


class ParameterStore:
    """Named trainable arrays with gradient buffers and Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.value)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.value)
        self.v[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def num_values(self, prefix: str = "") -> int:
        return sum(t.value.size for k, t in self._params.items() if k.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def layout(self) -> list[tuple[str, tuple[int, int]]]:
        return [(k, t.shape) for k, t in self._params.items()]

    def snapshot(self) -> ParamSnapshot:
        return ParamSnapshot(
            values={k: t.value.copy() for k, t in self._params.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step_count=self.step_count,
        )

    def restore(self, snap: ParamSnapshot) -> None:
        if snap.layout() != self.layout():
            raise ValueError("snapshot layout does not match parameter store")
        for k, t in self._params.items():
            t.value[...] = snap.values[k]
            t.grad[...] = 0.0
            self.m[k][...] = snap.m[k]
            self.v[k][...] = snap.v[k]
        self.step_count = snap.step_count

    def state_hash(self) -> str:
        """SHA-256 over names, values, moments and step count."""
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            for arr in (t.value, self.m[k], self.v[k]):
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(str(self.step_count).encode())
        return h.hexdigest()

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self._params.items()}

    def load_values(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint layout mismatch: {sorted(missing)}")
        for k, t in self._params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.value[...] = arrays[k]


def adam_step(store: ParameterStore, cfg: AdamConfig) -> None:
    """One Adam update with bias correction; L2 term is folded into the gradient."""
    for name, t in store.items():
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    store.step_count += 1
    step = store.step_count
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for name, t in store.items():
        g = t.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * t.value
        m, v = store.m[name], store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        t.value -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        t.grad[...] = 0.0


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"AREADCK1"


def save_checkpoint(path: str | Path, store: ParameterStore, meta: dict | None = None) -> None:
    """Write named arrays as little-endian float64 behind a JSON manifest."""
    entries = []
    offset = 0
    for name, shape in store.layout():
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        offset += int(np.prod(shape)) * 8
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    body = raw[16 + n :]
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, manifest["meta"]
