"""AUC, per-domain AUC aggregates and mask overlap."""

from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

from .data import DomainStats
from .hei import HierMask

log = logging.getLogger(__name__)


class UndefinedAUC(ValueError):
    """Raised when the labels contain only one class."""


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # tie groups share the mean of their 1-based ranks
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Rank-sum (Mann-Whitney) AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_domain_auc(scores, labels, domains) -> dict[int, tuple[float, int]]:
    """``{domain: (auc, n)}`` for every domain that has both classes."""
    scores, labels, domains = map(np.asarray, (scores, labels, domains))
    out = {}
    for d in np.unique(domains):
        sel = domains == d
        try:
            out[int(d)] = (auc(scores[sel], labels[sel]), int(sel.sum()))
        except UndefinedAUC:
            log.warning("domain %d is single-class in this split; excluded from DomainAUC", d)
    return out


def domain_auc(scores, labels, domains, restrict: Iterable[int] | None = None) -> float:
    """Sample-size weighted mean of per-domain AUCs.

    Single-class domains are dropped and the weights renormalized.
    """
    per = per_domain_auc(scores, labels, domains)
    if restrict is not None:
        keep = set(int(d) for d in restrict)
        per = {d: v for d, v in per.items() if d in keep}
    if not per:
        raise UndefinedAUC("no domain has both classes")
    n = sum(c for _, c in per.values())
    return float(sum(a * c for a, c in per.values()) / n)


def group_auc(scores, labels, domains, stats: DomainStats, k: int, largest: bool) -> float:
    """DomainAUC over the ``k`` largest (or smallest) domains by train count."""
    if k > stats.num_domains:
        raise ValueError(f"group size {k} exceeds domain count {stats.num_domains}")
    group = stats.largest(k) if largest else stats.smallest(k)
    return domain_auc(scores, labels, domains, restrict=group)


def metrics_report(
    scores,
    labels,
    domains,
    stats: DomainStats,
    extra_groups: Sequence[tuple[str, int]] = (),
) -> dict:
    """The standard report; group sizes beyond the domain count are clipped."""
    D = stats.num_domains
    per = per_domain_auc(scores, labels, domains)
    rep = {
        "auc": auc(scores, labels),
        "domain_auc": domain_auc(scores, labels, domains),
    }
    groups = [("major5", 5), ("minor10", 10), ("minor5", 5), *extra_groups]
    for name, k in groups:
        try:
            rep[name] = group_auc(scores, labels, domains, stats, min(k, D), name.startswith("major"))
        except UndefinedAUC:
            rep[name] = None
    rep["per_domain"] = {str(d): {"auc": a, "n": n} for d, (a, n) in sorted(per.items())}
    rep["excluded_domains"] = sorted(set(int(d) for d in np.unique(domains)) - set(per))
    return rep


def overlap_ratio(m1: HierMask, m2: HierMask, layer: int | None = None) -> float:
    """Intersection over union of kept positions.

    ``layer`` is the HEI layer index ``l >= 2``; ``None`` pools all layers.
    """
    if m1.shapes != m2.shapes:
        raise ValueError("masks have different shapes")
    if layer is None:
        a, b = m1.flat(), m2.flat()
    else:
        a, b = m1.layers[layer - 2].ravel(), m2.layers[layer - 2].ravel()
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        raise ValueError("both masks are empty")
    return int(np.logical_and(a, b).sum()) / union


def overlap_matrix(masks: dict[int, HierMask], layer: int | None = None) -> np.ndarray:
    ids = sorted(masks)
    out = np.ones((len(ids), len(ids)))
    for a, da in enumerate(ids):
        for b in range(a + 1, len(ids)):
            out[a, b] = out[b, a] = overlap_ratio(masks[da], masks[ids[b]], layer)
    return out
