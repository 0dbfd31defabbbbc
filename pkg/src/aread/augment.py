"""Popularity-based counterfactual augmentation for minor domains.

A positive interaction with an unpopular item in a major domain is taken as
evidence of genuine interest, which should carry over to other domains.  Such
rows are copied into minor domains (domain id rewritten, label kept at 1) up
to a per-domain budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, DomainStats, concat_datasets

log = logging.getLogger(__name__)

RULES = ("user-history-first", "inverse-size-sampling")


@dataclass
class AugConfig:
    r_aug: float = 0.1
    rho_quantile: float = 0.2
    rule: str = "user-history-first"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r_aug <= 1.0:
            raise ValueError("r_aug must lie in [0, 1]")
        if not 0.0 < self.rho_quantile < 1.0:
            raise ValueError("rho_quantile must lie in (0, 1)")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}")


@dataclass
class PopularityTable:
    """Positive counts and normalized popularity per (domain, item).

    ``popularity[d]`` maps item id to ``count / max count in d``; ``rho[d]`` is the
    cutoff below which an item of domain ``d`` counts as unpopular.
    """

    counts: dict[int, dict[int, int]]
    popularity: dict[int, dict[int, float]]
    rho: dict[int, float]
    rho_quantile: float

    def is_unpopular(self, d: int, item: int) -> bool:
        p = self.popularity.get(d, {}).get(item)
        return p is not None and p < self.rho[d]


def compute_popularity(train: Dataset, rho_quantile: float = 0.2) -> PopularityTable:
    """Build the table from positives only.

    The cutoff is the ``rho_quantile`` quantile of the domain's popularity
    values, lifted to the next larger observed value so that items tied at the
    quantile fall below it.  When no larger value exists nothing is unpopular.
    """
    if len(train) == 0:
        raise ValueError("compute_popularity: empty dataset")
    pos = train.labels == 1
    counts, popularity, rho = {}, {}, {}
    for d in range(train.num_domains):
        items = train.items[pos & (train.domains == d)]
        if items.size == 0:
            log.info("domain %d has no positives; it cannot serve as an augmentation source", d)
            continue
        ids, cnt = np.unique(items, return_counts=True)
        p = cnt / cnt.max()
        counts[d] = {int(i): int(c) for i, c in zip(ids, cnt)}
        popularity[d] = {int(i): float(v) for i, v in zip(ids, p)}
        q = float(np.quantile(p, rho_quantile))
        above = p[p > q]
        rho[d] = float(above.min()) if above.size else q
    return PopularityTable(counts, popularity, rho, rho_quantile)


def eligible_sources(train: Dataset, stats: DomainStats, pop: PopularityTable) -> np.ndarray:
    """Row indices of positive, unpopular-item interactions in major domains."""
    rows = []
    for d in sorted(stats.major):
        if d not in pop.rho:
            continue
        idx = np.flatnonzero((train.domains == d) & (train.labels == 1))
        keep = [i for i in idx if pop.is_unpopular(d, int(train.items[i]))]
        rows.extend(keep)
    return np.asarray(sorted(rows), dtype=np.intp)


def _user_column(train: Dataset) -> int | None:
    fields = train.schema.fields
    return fields.index("user") if "user" in fields else None


def _pick(candidates: np.ndarray, preferred: np.ndarray, cap: int, rng) -> np.ndarray:
    first = rng.permutation(candidates[preferred])[:cap]
    rest = candidates[~preferred]
    need = cap - len(first)
    if need > 0 and rest.size:
        first = np.concatenate([first, rng.choice(rest, size=min(need, rest.size), replace=False)])
    return np.sort(first)


def build_augmented(train: Dataset, stats: DomainStats, pop: PopularityTable, cfg: AugConfig) -> dict[int, Dataset]:
    """Per-domain training sets; minor domains receive counterfactual copies.

    Each minor domain ``d`` gets at most ``ceil(r_aug * n_d)`` copies.  Sources
    whose user already interacted in ``d`` are preferred, the rest of the budget
    is filled uniformly at random.  Under ``inverse-size-sampling`` every source
    is first dealt to a single minor domain with probability proportional to
    ``1 / n_d``.
    """
    rng = np.random.default_rng(cfg.seed)
    out = {d: train.subset(train.domain_indices(d)) for d in range(train.num_domains)}
    if cfg.r_aug == 0 or not stats.minor:
        return out
    sources = eligible_sources(train, stats, pop)
    ucol = _user_column(train)
    minors = sorted(stats.minor)
    if cfg.rule == "inverse-size-sampling" and sources.size:
        w = np.array([1.0 / max(stats.counts[d], 1) for d in minors])
        dealt = rng.choice(len(minors), size=sources.size, p=w / w.sum())
        pools = {d: sources[dealt == k] for k, d in enumerate(minors)}
    else:
        pools = {d: sources for d in minors}

    for d in minors:
        pool = pools[d]
        n_d = int(stats.counts[d])
        cap = math.ceil(cfg.r_aug * n_d)
        if pool.size == 0:
            log.warning("no eligible augmentation sources for minor domain %d", d)
            continue
        if ucol is not None:
            seen = np.unique(train.features[train.domains == d, ucol])
            preferred = np.isin(train.features[pool, ucol], seen)
        else:
            preferred = np.zeros(pool.size, dtype=bool)
        chosen = _pick(pool, preferred, cap, rng)
        copies = Dataset(
            train.schema,
            train.features[chosen],
            np.full(chosen.size, d),
            np.ones(chosen.size, dtype=np.int64),
            "train",
            train.domains[chosen],
        )
        out[d] = concat_datasets([out[d], copies], "train")
    return out


def check_augmented(aug: dict[int, Dataset], train: Dataset, stats: DomainStats, pop: PopularityTable, r_aug: float) -> list[str]:
    """Scan every augmented row against the contract; returns violations."""
    problems = []
    for d, ds in aug.items():
        n_d = int(stats.counts[d])
        copies = np.flatnonzero(ds.source_domain >= 0)
        if len(ds) > n_d + math.ceil(r_aug * n_d):
            problems.append(f"domain {d}: size {len(ds)} exceeds cap")
        if copies.size > math.ceil(r_aug * n_d):
            problems.append(f"domain {d}: {copies.size} copies exceed cap")
        for i in copies:
            src = int(ds.source_domain[i])
            if ds.labels[i] != 1:
                problems.append(f"domain {d} row {i}: label {ds.labels[i]}")
            if src not in stats.major:
                problems.append(f"domain {d} row {i}: source {src} is not major")
            if d not in stats.minor:
                problems.append(f"domain {d} row {i}: target is not minor")
            if not pop.is_unpopular(src, int(ds.items[i])):
                problems.append(f"domain {d} row {i}: item {ds.items[i]} is not unpopular in {src}")
    return problems
