"""Embedding tables and the shared MMoE layer under the expert hierarchy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class EmbeddingConfig:
    dim: int = 16
    # embed the domain id as one more categorical field
    domain_feature: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")


@dataclass
class MMoEConfig:
    num_experts: int = 4
    hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.num_experts < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("MMoE needs >= 1 expert and positive hidden dims")


def init_linear(store: ParameterStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    # He-uniform; the expert stacks are deep ReLU chains
    bound = np.sqrt(6.0 / fan_in)
    store.add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros((1, fan_out)))


def linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, store[f"{name}.W"]), store[f"{name}.b"])


def init_mlp(store, prefix: str, dims: Sequence[int], rng) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(store, f"{prefix}.{i}", a, b, rng)


def mlp(store, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """Stack of linear layers, each followed by ReLU."""
    for i in range(n_layers):
        x = ad.relu(linear(store, f"{prefix}.{i}", x))
    return x


class BaseRecommender:
    """Per-field embeddings concatenated, then a single-gate MMoE."""

    def __init__(
        self,
        store: ParameterStore,
        vocab_sizes: Sequence[int],
        num_domains: int,
        emb: EmbeddingConfig,
        mmoe: MMoEConfig,
        rng: np.random.Generator,
    ):
        self.store = store
        self.emb = emb
        self.mmoe = mmoe
        self.vocab_sizes = list(vocab_sizes)
        if emb.domain_feature:
            self.vocab_sizes.append(num_domains)
        for f, v in enumerate(self.vocab_sizes):
            store.add(f"emb.{f}", rng.normal(0.0, 0.05, size=(v, emb.dim)))
        self.input_dim = len(self.vocab_sizes) * emb.dim
        dims = (self.input_dim, *mmoe.hidden)
        for e in range(mmoe.num_experts):
            init_mlp(store, f"mmoe.expert{e}", dims, rng)
        init_linear(store, "mmoe.gate", self.input_dim, mmoe.num_experts, rng)

    @property
    def output_dim(self) -> int:
        return self.mmoe.hidden[-1]

    def embed(self, features: np.ndarray, domains: np.ndarray | None = None) -> Tensor:
        cols = [features[:, f] for f in range(features.shape[1])]
        if self.emb.domain_feature:
            cols.append(domains)
        if len(cols) != len(self.vocab_sizes):
            raise ad.ShapeError(f"embed: expected {len(self.vocab_sizes)} fields, got {len(cols)}")
        return ad.concat([ad.embedding_lookup(self.store[f"emb.{f}"], c) for f, c in enumerate(cols)])

    def gate(self, x_emb: Tensor) -> Tensor:
        # softmax over experts per row: the column-softmax of the transposed logits
        logits = linear(self.store, "mmoe.gate", x_emb)
        return ad.group_softmax(logits, self.mmoe.num_experts)

    def forward(self, x_emb: Tensor) -> Tensor:
        if x_emb.shape[1] != self.input_dim:
            raise ad.ShapeError(f"mmoe_forward: width {x_emb.shape[1]} != {self.input_dim}")
        depth = len(self.mmoe.hidden)
        experts = [mlp(self.store, f"mmoe.expert{e}", x_emb, depth) for e in range(self.mmoe.num_experts)]
        return ad.weighted_sum(self.gate(x_emb), experts)

    def __call__(self, features: np.ndarray, domains: np.ndarray) -> Tensor:
        return self.forward(self.embed(features, domains))
