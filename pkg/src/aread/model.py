"""The full recommender: base MMoE, optional expert hierarchy, heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .base import BaseRecommender, EmbeddingConfig, MMoEConfig, init_linear, linear
from .data import Dataset
from .hei import HEI, HEIConfig, HierMask, active_set, loss_masked, loss_warmup, mean_sigmoid

GateObserver = Callable[[np.ndarray, list], None]


@dataclass
class ModelConfig:
    emb: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    mmoe: MMoEConfig = field(default_factory=MMoEConfig)
    hei: HEIConfig = field(default_factory=HEIConfig)
    # False gives the base-only variant: MMoE plus one logistic head
    use_hei: bool = True


class AREADModel:
    def __init__(self, vocab_sizes, num_domains: int, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.num_domains = num_domains
        self.store = ParameterStore()
        self.base = BaseRecommender(self.store, vocab_sizes, num_domains, cfg.emb, cfg.mmoe, rng)
        if cfg.use_hei:
            self.hei = HEI(self.store, cfg.hei, self.base.output_dim, rng)
        else:
            self.hei = None
            init_linear(self.store, "head", self.base.output_dim, 1, rng)

    def base_repr(self, features: np.ndarray, domains: np.ndarray) -> Tensor:
        return self.base(features, domains)

    def head_logits(self, base: Tensor, mask: HierMask | None = None) -> list[Tensor]:
        if self.hei is None:
            return [linear(self.store, "head", base)]
        out = self.hei.forward(base, mask)
        return [out[j] for j in sorted(out)]

    def grouped(
        self,
        features: np.ndarray,
        domains: np.ndarray,
        masks: dict[int, HierMask] | None,
        observer: GateObserver | None = None,
    ):
        """Yield ``(row_idx, head_logits)`` per domain group of a batch.

        Without masks the whole batch is one group.  The base network runs once
        for the full batch.
        """
        base = self.base_repr(features, domains)
        if masks is None or self.hei is None:
            logits = self.head_logits(base)
            if observer is not None and self.hei is not None:
                observer(domains, self.hei.trace.gates)
            yield np.arange(len(domains)), logits
            return
        for d in np.unique(domains):
            idx = np.flatnonzero(domains == d)
            sub = ad.take_rows(base, idx)
            logits = self.head_logits(sub, masks[int(d)])
            if observer is not None:
                observer(domains[idx], self.hei.trace.gates)
            yield idx, logits

    def loss(
        self,
        features: np.ndarray,
        domains: np.ndarray,
        labels: np.ndarray,
        masks: dict[int, HierMask] | None = None,
        observer: GateObserver | None = None,
    ) -> Tensor:
        """Averaged-head BCE without masks; per-head summed BCE with masks.

        The masked loss is the batch mean of each sample's per-head sum, so
        domain groups are weighted by their share of the batch.
        """
        n = len(labels)
        total = None
        for idx, logits in self.grouped(features, domains, masks, observer):
            y = labels[idx]
            part = loss_warmup(logits, y) if masks is None else loss_masked(logits, y)
            part = ad.scale(part, len(idx) / n)
            total = part if total is None else ad.add(total, part)
        return total

    def predict(self, features: np.ndarray, domains: np.ndarray, masks: dict[int, HierMask] | None = None) -> np.ndarray:
        out = np.empty(len(domains))
        for idx, logits in self.grouped(features, domains, masks):
            out[idx] = mean_sigmoid(logits).value[:, 0]
        return out

    def predict_dataset(self, ds: Dataset, masks: dict[int, HierMask] | None = None, batch_size: int = 4096) -> np.ndarray:
        out = np.empty(len(ds))
        for lo in range(0, len(ds), batch_size):
            sl = slice(lo, lo + batch_size)
            out[sl] = self.predict(ds.features[sl], ds.domains[sl], masks)
        return out

    def active_heads(self, mask: HierMask | None) -> list[int]:
        if self.hei is None:
            return [0]
        return active_set(mask) if mask is not None else list(range(self.cfg.hei.experts[-1]))
