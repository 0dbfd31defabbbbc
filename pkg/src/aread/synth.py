"""Synthetic multi-domain click logs with planted cluster structure.

Each cluster owns a bilinear preference matrix ``W_c``; a sample is clean
positive when ``user @ W_c @ item`` exceeds that cluster's median score.
Domains in one cluster share ``W_c`` exactly, so the cluster map is a ground
truth for which domains ought to be learned together.  Items are drawn with a
power-law popularity profile so the augmenter has a long tail to work with.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as _config
from .data import OOV_TOKEN, Dataset, Schema


@dataclass
class SynthConfig:
    num_domains: int = 8
    clusters: tuple[int, ...] = (0, 1, 0, 1, 0, 1, 0, 1)
    sizes: tuple[int, ...] = (4000, 3000, 2000, 1000, 400, 200, 100, 50)
    users: int = 300
    items: int = 500
    latent_dim: int = 4
    popularity_exponent: float = 1.2
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.clusters = tuple(int(c) for c in self.clusters)
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.num_domains < 2:
            raise ValueError("need at least two domains")
        if len(self.clusters) != self.num_domains or len(self.sizes) != self.num_domains:
            raise ValueError("clusters and sizes need one entry per domain")
        if min(self.sizes) < 1:
            raise ValueError("every domain needs at least one sample")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.users < 1 or self.items < 1 or self.latent_dim < 1:
            raise ValueError("users, items and latent_dim must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthConfig":
        return _config.coerce(cls, _config.read_flat(path))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlantedModel:
    """Ground truth behind a generated dataset."""

    user_vecs: np.ndarray
    item_vecs: np.ndarray
    cluster_mats: dict[int, np.ndarray]
    thresholds: dict[int, float]
    clusters: tuple[int, ...]
    clean_labels: np.ndarray = field(repr=False)

    def score(self, users: np.ndarray, items: np.ndarray, cluster: int) -> np.ndarray:
        """Bayes scorer of ``cluster`` for raw (0-based) user and item indices."""
        W = self.cluster_mats[cluster]
        return np.einsum("ij,jk,ik->i", self.user_vecs[users], W, self.item_vecs[items])


def popularity_weights(n_items: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n_items + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate_with_truth(cfg: SynthConfig) -> tuple[Dataset, PlantedModel]:
    rng = np.random.default_rng(cfg.seed)
    r = cfg.latent_dim
    user_vecs = rng.standard_normal((cfg.users, r))
    item_vecs = rng.standard_normal((cfg.items, r))
    cluster_ids = sorted(set(cfg.clusters))
    mats = {c: rng.standard_normal((r, r)) / np.sqrt(r) for c in cluster_ids}
    # rank -> item id; popular items are popular in every domain
    item_rank = rng.permutation(cfg.items)
    pop = popularity_weights(cfg.items, cfg.popularity_exponent)

    users, items, doms = [], [], []
    for d, n in enumerate(cfg.sizes):
        users.append(rng.integers(0, cfg.users, size=n))
        items.append(item_rank[rng.choice(cfg.items, size=n, p=pop)])
        doms.append(np.full(n, d))
    users = np.concatenate(users)
    items = np.concatenate(items)
    doms = np.concatenate(doms)
    dom_cluster = np.asarray(cfg.clusters)[doms]

    truth = PlantedModel(user_vecs, item_vecs, mats, {}, cfg.clusters, np.zeros(0))
    clean = np.zeros(len(doms), dtype=np.int64)
    for c in cluster_ids:
        rows = np.flatnonzero(dom_cluster == c)
        s = truth.score(users[rows], items[rows], c)
        truth.thresholds[c] = float(np.median(s))
        clean[rows] = (s > truth.thresholds[c]).astype(np.int64)
    flips = rng.random(len(clean)) < cfg.noise
    labels = np.where(flips, 1 - clean, clean)
    truth.clean_labels = clean

    schema = Schema(
        ["user", "item"],
        [[OOV_TOKEN] + [f"u{i}" for i in range(cfg.users)], [OOV_TOKEN] + [f"i{i}" for i in range(cfg.items)]],
        [f"d{d}" for d in range(cfg.num_domains)],
        "item",
    )
    feats = np.stack([users + 1, items + 1], axis=1)
    return Dataset(schema, feats, doms, labels), truth


def generate(cfg: SynthConfig) -> Dataset:
    return generate_with_truth(cfg)[0]
