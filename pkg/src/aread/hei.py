"""Hierarchical expert integration: layered MLP experts joined by gates.

Layer ``l`` has ``N_l`` experts.  Expert ``n`` of layer ``l >= 2`` reads a
gate-weighted mix of the layer ``l-1`` outputs; its gate column is a softmax
over the ``N_{l-1}`` inputs computed from the shared base representation.
A per-domain ``HierMask`` switches individual gate positions off, and the
surviving weights of each column are renormalized.  Layer-1 experts read the
base output directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .base import init_linear, init_mlp, linear, mlp


@dataclass
class HEIConfig:
    experts: tuple[int, ...] = (3, 6, 12)
    hidden: tuple[tuple[int, ...], ...] = ((64, 32), (32, 16), (16, 8))

    def __post_init__(self):
        self.experts = tuple(int(n) for n in self.experts)
        self.hidden = tuple(tuple(int(h) for h in hs) for hs in self.hidden)
        if len(self.experts) < 2:
            raise ValueError("HEI needs at least two layers")
        if len(self.hidden) != len(self.experts):
            raise ValueError("one hidden-dim tuple per layer")
        if any(b < a for a, b in zip(self.experts, self.experts[1:])):
            raise ValueError("expert counts must be non-decreasing")
        if min(self.experts) < 1 or min(min(h) for h in self.hidden) < 1:
            raise ValueError("expert counts and widths must be positive")
        outs = [h[-1] for h in self.hidden]
        if any(b > a for a, b in zip(outs, outs[1:])):
            raise ValueError("expert widths must be non-increasing across layers")

    @property
    def num_layers(self) -> int:
        return len(self.experts)

    def mask_shapes(self) -> list[tuple[int, int]]:
        """Shapes of M^(l) for l = 2..L."""
        return [(a, b) for a, b in zip(self.experts[:-1], self.experts[1:])]

    @property
    def num_gates(self) -> int:
        return sum(a * b for a, b in self.mask_shapes())


class MaskError(ValueError):
    pass


@dataclass
class HierMask:
    """Binary gate masks ``M^(l)`` for ``l = 2..L`` (stored at index ``l-2``)."""

    layers: list[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(m, dtype=bool).copy() for m in self.layers]

    @classmethod
    def ones(cls, cfg: HEIConfig) -> "HierMask":
        return cls([np.ones(s, dtype=bool) for s in cfg.mask_shapes()])

    @classmethod
    def zeros(cls, cfg: HEIConfig) -> "HierMask":
        return cls([np.zeros(s, dtype=bool) for s in cfg.mask_shapes()])

    def copy(self) -> "HierMask":
        return HierMask([m.copy() for m in self.layers])

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [m.shape for m in self.layers]

    def kept(self) -> int:
        return int(sum(m.sum() for m in self.layers))

    def total(self) -> int:
        return int(sum(m.size for m in self.layers))

    def flat(self) -> np.ndarray:
        """All positions in (layer, row, col) order."""
        return np.concatenate([m.ravel() for m in self.layers])

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes: Sequence[tuple[int, int]]) -> "HierMask":
        out, pos = [], 0
        for r, c in shapes:
            out.append(np.asarray(flat[pos : pos + r * c]).reshape(r, c))
            pos += r * c
        return cls(out)

    def __eq__(self, other) -> bool:
        return isinstance(other, HierMask) and self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )

    def to_text(self, domain: int) -> str:
        lines = [f"domain {domain} " + " ".join(f"{r}x{c}" for r, c in self.shapes)]
        lines += ["".join("1" if v else "0" for v in m.ravel()) for m in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> tuple[int, "HierMask"]:
        head, *rows = [ln.strip() for ln in text.strip().splitlines()]
        parts = head.split()
        if len(parts) < 2 or parts[0] != "domain":
            raise MaskError("mask text must start with 'domain <id>'")
        shapes = [tuple(int(v) for v in s.split("x")) for s in parts[2:]]
        if len(rows) != len(shapes):
            raise MaskError(f"expected {len(shapes)} layer lines, got {len(rows)}")
        layers = []
        for (r, c), row in zip(shapes, rows):
            if len(row) != r * c or set(row) - {"0", "1"}:
                raise MaskError(f"bad layer line for shape {r}x{c}")
            layers.append(np.array([ch == "1" for ch in row]).reshape(r, c))
        return int(parts[1]), cls(layers)


def density(mask: HierMask) -> float:
    return mask.kept() / mask.total()


def active_set(mask: HierMask) -> list[int]:
    return [int(j) for j in np.flatnonzero(mask.layers[-1].any(axis=0))]


def best_path(gate_means: Sequence[np.ndarray]) -> list[int]:
    """Expert indices (one per layer) of the path with the largest mean gate."""
    # dynamic programming over sums; ties keep the lowest index
    score = np.zeros(gate_means[0].shape[0])
    back = []
    for g in gate_means:
        cand = score[:, None] + g  # (N_{l-1}, N_l)
        arg = cand.argmax(axis=0)
        back.append(arg)
        score = cand[arg, np.arange(g.shape[1])]
    path = [int(score.argmax())]
    for arg in reversed(back):
        path.append(int(arg[path[-1]]))
    return path[::-1]


def repair(mask: HierMask, gate_means: Sequence[np.ndarray] | None = None) -> tuple[HierMask, bool]:
    """Drop outgoing gates of experts that lost every incoming gate.

    If that empties the final layer, the single best full path under
    ``gate_means`` (uniform when absent) is switched on.  Returns the repaired
    copy and whether the fallback path was used.
    """
    out = mask.copy()
    for k in range(1, len(out.layers)):
        alive = out.layers[k - 1].any(axis=0)
        out.layers[k][~alive, :] = False
    if out.layers[-1].any():
        return out, False
    if gate_means is None:
        gate_means = [np.ones(s) for s in out.shapes]
    path = best_path(gate_means)
    for k, m in enumerate(out.layers):
        m[path[k], path[k + 1]] = True
    return out, True


def validate(mask: HierMask, cfg: HEIConfig | None = None) -> None:
    if cfg is not None and mask.shapes != cfg.mask_shapes():
        raise MaskError(f"mask shapes {mask.shapes} do not match topology {cfg.mask_shapes()}")
    if not active_set(mask):
        raise MaskError("mask has an empty active set")
    for k in range(1, len(mask.layers)):
        alive = mask.layers[k - 1].any(axis=0)
        if mask.layers[k][~alive].any():
            raise MaskError(f"layer {k + 2} uses an expert with no kept input")


def write_masks(directory: str | Path, masks: dict[int, HierMask]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for d, m in sorted(masks.items()):
        (directory / f"domain_{d}.mask").write_text(m.to_text(d), encoding="utf-8")


def read_masks(directory: str | Path) -> dict[int, HierMask]:
    out = {}
    for p in sorted(Path(directory).glob("domain_*.mask")):
        d, m = HierMask.from_text(p.read_text(encoding="utf-8"))
        out[d] = m
    return out


@dataclass
class ForwardTrace:
    """What one forward pass touched; used by tests and diagnostics."""

    evaluated: set = field(default_factory=set)
    zero_denominators: int = 0
    gates: list = field(default_factory=list)


class HEI:
    def __init__(self, store: ParameterStore, cfg: HEIConfig, input_dim: int, rng: np.random.Generator):
        self.store = store
        self.cfg = cfg
        self.input_dim = input_dim
        in_dim = input_dim
        for l, (n_l, hid) in enumerate(zip(cfg.experts, cfg.hidden), start=1):
            for n in range(n_l):
                init_mlp(store, f"hei.l{l}.e{n}", (in_dim, *hid), rng)
                if l == cfg.num_layers:
                    init_linear(store, f"hei.l{l}.e{n}.head", hid[-1], 1, rng)
            if l >= 2:
                init_linear(store, f"hei.gate{l}", input_dim, cfg.experts[l - 2] * n_l, rng)
            in_dim = hid[-1]
        self.trace = ForwardTrace()

    def gates(self, base: Tensor) -> list[Tensor]:
        """Gate tensors for layers 2..L, shape (B, N_l * N_{l-1}).

        Block ``n`` of a row holds column ``g_{l,n}`` of that sample's gate
        matrix.
        """
        out = []
        for l in range(2, self.cfg.num_layers + 1):
            logits = linear(self.store, f"hei.gate{l}", base)
            out.append(ad.group_softmax(logits, self.cfg.experts[l - 2]))
        return out

    @staticmethod
    def gate_matrices(g: Tensor, n_prev: int) -> np.ndarray:
        """(B, N_{l-1}, N_l) view of a gate tensor's values."""
        b = g.shape[0]
        return g.value.reshape(b, -1, n_prev).transpose(0, 2, 1)

    def _expert(self, l: int, n: int, x: Tensor) -> Tensor:
        out = mlp(self.store, f"hei.l{l}.e{n}", x, len(self.cfg.hidden[l - 1]))
        if l == self.cfg.num_layers:
            out = linear(self.store, f"hei.l{l}.e{n}.head", out)
        self.trace.evaluated.add((l, n))
        return out

    def needed(self, mask: HierMask) -> list[set[int]]:
        """Experts per layer lying on a kept path into the active set."""
        L = self.cfg.num_layers
        need = [set() for _ in range(L)]
        need[L - 1] = set(active_set(mask))
        for l in range(L - 1, 0, -1):
            m = mask.layers[l - 1]
            need[l - 1] = {int(i) for n in need[l] for i in np.flatnonzero(m[:, n])}
        return need

    def forward(self, base: Tensor, mask: HierMask | None = None) -> dict[int, Tensor]:
        """Final-layer logits keyed by expert index.

        Without a mask every expert runs (plain gated mixing).  With a mask only
        experts on kept paths run, and each column's kept gate weights are
        renormalized to sum to one.
        """
        if base.shape[1] != self.input_dim:
            raise ad.ShapeError(f"hei_forward: width {base.shape[1]} != {self.input_dim}")
        cfg = self.cfg
        L = cfg.num_layers
        self.trace = ForwardTrace()
        if mask is not None:
            validate(mask, cfg)
            need = self.needed(mask)
        else:
            need = [set(range(n)) for n in cfg.experts]
        gates = self.gates(base)
        self.trace.gates = [self.gate_matrices(g, cfg.experts[l]) for l, g in enumerate(gates)]

        prev = {n: self._expert(1, n, base) for n in sorted(need[0])}
        for l in range(2, L + 1):
            n_prev = cfg.experts[l - 2]
            g = gates[l - 2]
            cur = {}
            for n in sorted(need[l - 1]):
                if mask is None:
                    srcs = list(range(n_prev))
                    w = ad.take_columns(g, [n * n_prev + i for i in srcs])
                else:
                    srcs = [int(i) for i in np.flatnonzero(mask.layers[l - 2][:, n])]
                    w, zero = ad.normalize_rows(ad.take_columns(g, [n * n_prev + i for i in srcs]))
                    self.trace.zero_denominators += zero
                cur[n] = self._expert(l, n, ad.weighted_sum(w, [prev[i] for i in srcs]))
            prev = cur
        return prev


def mean_sigmoid(logits: Sequence[Tensor]) -> Tensor:
    return ad.row_mean(ad.sigmoid(ad.concat(list(logits))))


def loss_warmup(logits: Sequence[Tensor], y: np.ndarray) -> Tensor:
    """BCE of the averaged head probabilities."""
    return ad.bce_loss(mean_sigmoid(logits), y)


def loss_masked(logits: Sequence[Tensor], y: np.ndarray) -> Tensor:
    """Sum over active heads of per-head BCE (batch-averaged)."""
    if not logits:
        raise MaskError("loss_masked needs a nonempty active set")
    return ad.bce_loss(ad.sigmoid(ad.concat(list(logits))), y)


def predict(logits: Sequence[Tensor]) -> np.ndarray:
    if not logits:
        raise MaskError("predict needs a nonempty active set")
    return mean_sigmoid(logits).value[:, 0]

