"""Hierarchical expert mask pruning and the two-phase training driver.

Masks are searched per domain in lottery-ticket fashion: every candidate starts
from the same parameter snapshot, is fine-tuned on the domain's (augmented)
data while the weakest masked gates are pruned away, and the candidate that
scores best on a sample of the domain's training data becomes the domain mask.
Parameters are rolled back to the snapshot afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import AdamConfig, adam_step
from .data import Dataset
from .hei import HEIConfig, HierMask, active_set, density, repair
from .metrics import UndefinedAUC, auc, domain_auc
from .model import AREADModel

log = logging.getLogger(__name__)

ABLATIONS = ("base-only", "+hei", "+hemp", "full")


@dataclass
class HEMPConfig:
    z: int = 4
    k: int = 5
    s0: float = 0.7
    s: float = 0.4
    alpha: float = 0.05
    lr_u: float = 0.01
    update_interval: int = 500
    warmup_batches: int = 100
    flip_prob: float = 0.1
    max_prune_iters: int = 64
    candidate_batch_size: int = 128
    eval_sample_size: int = 512

    def __post_init__(self):
        if not 0 < self.s < self.s0 <= 1:
            raise ValueError("need 0 < s < s0 <= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.z < 1 or self.k < 1:
            raise ValueError("z and k must be >= 1")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")


class GateStatsAccumulator:
    """Running per-domain means of the gate matrices of layers 2..L."""

    def __init__(self, cfg: HEIConfig, num_domains: int):
        self.shapes = cfg.mask_shapes()
        self.num_domains = num_domains
        self.reset()

    def reset(self) -> None:
        self.sums = {d: [np.zeros(s) for s in self.shapes] for d in range(self.num_domains)}
        self.counts = np.zeros(self.num_domains, dtype=np.int64)

    def observe(self, domains: np.ndarray, gates: Sequence[np.ndarray]) -> None:
        """``gates[k]`` has shape (B, N_{l-1}, N_l) for layer ``l = k + 2``."""
        for d in np.unique(domains):
            sel = domains == d
            d = int(d)
            for acc, g in zip(self.sums[d], gates):
                acc += g[sel].sum(axis=0)
            self.counts[d] += int(sel.sum())

    def means(self, d: int) -> list[np.ndarray]:
        if self.counts[d] == 0:
            return [np.full(s, 1.0 / s[0]) for s in self.shapes]
        return [s / self.counts[d] for s in self.sums[d]]


def _floor(x: float) -> int:
    return int(math.floor(round(x, 9)))


def prune_count(kept: int, alpha: float) -> int:
    """Gates removed from ``kept``: ``alpha * kept`` rounded half up, at least one."""
    return max(1, _floor(alpha * kept + 0.5))


def candidate_bits(gate_means: Sequence[np.ndarray], cfg: HEMPConfig, rng: np.random.Generator) -> np.ndarray:
    """Flat kept-flags before repair: top ``s0`` by mean gate, then random flips."""
    vals = np.concatenate([g.ravel() for g in gate_means])
    keep = _floor(cfg.s0 * vals.size)
    order = np.argsort(-vals, kind="stable")
    flat = np.zeros(vals.size, dtype=bool)
    flat[order[:keep]] = True
    flat ^= rng.random(vals.size) < cfg.flip_prob
    return flat


def init_candidate(gate_means: Sequence[np.ndarray], cfg: HEMPConfig, rng: np.random.Generator) -> HierMask:
    """Top-``s0`` gates by domain-mean value, then random state flips, then repair."""
    flat = candidate_bits(gate_means, cfg, rng)
    mask, _ = repair(HierMask.from_flat(flat, [g.shape for g in gate_means]), gate_means)
    return mask


def _propagate(mask: HierMask) -> HierMask:
    out = mask.copy()
    for k in range(1, len(out.layers)):
        alive = out.layers[k - 1].any(axis=0)
        out.layers[k][~alive, :] = False
    return out


@dataclass
class PruneInfo:
    requested: int
    removed: int
    stopped_short: bool


def prune_step(mask: HierMask, gate_means: Sequence[np.ndarray], alpha: float) -> tuple[HierMask, PruneInfo]:
    """Remove the weakest ``prune_count`` kept gates by mean masked magnitude.

    Ties go to the earlier (layer, row, col) position.  Experts left without
    inputs lose their outgoing gates as well.  If a removal would leave no
    active head the step stops before it.
    """
    flat = mask.flat()
    mags = np.concatenate([g.ravel() for g in gate_means]) * flat
    kept_pos = np.flatnonzero(flat)
    order = kept_pos[np.argsort(mags[kept_pos], kind="stable")]
    n = prune_count(len(kept_pos), alpha)
    before = mask.kept()

    trial = flat.copy()
    trial[order[:n]] = False
    out = _propagate(HierMask.from_flat(trial, mask.shapes))
    if active_set(out):
        return out, PruneInfo(n, before - out.kept(), False)

    cur = flat.copy()
    out = _propagate(mask)
    for pos in order[:n]:
        cur[pos] = False
        nxt = _propagate(HierMask.from_flat(cur, mask.shapes))
        if not active_set(nxt):
            break
        out = nxt
    return out, PruneInfo(n, before - out.kept(), True)


@dataclass
class CandidateMask:
    mask: HierMask
    domain: int
    z: int
    score: float = float("-inf")
    densities: list = field(default_factory=list)
    prune_iters: int = 0
    batches: int = 0
    start_hash: str = ""
    train_losses: list = field(default_factory=list)


def score_candidate(model: AREADModel, cand: CandidateMask, eval_rows: Dataset | None) -> float:
    """AUC on the eval rows; negative mean BCE if single-class; training loss if empty."""
    if eval_rows is None or len(eval_rows) == 0:
        return -float(np.mean(cand.train_losses)) if cand.train_losses else float("-inf")
    masks = {cand.domain: cand.mask}
    p = model.predict(eval_rows.features, eval_rows.domains, masks)
    try:
        return auc(p, eval_rows.labels)
    except UndefinedAUC:
        y = eval_rows.labels
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        return float(np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))


def select_best(candidates: Sequence[CandidateMask]) -> CandidateMask:
    """Highest score wins; ties go to the lowest candidate index."""
    if not candidates:
        raise ValueError("select_best: no candidates")
    return max(candidates, key=lambda c: (c.score, -c.z))


class _Cycler:
    """Endless without-replacement batches over a dataset."""

    def __init__(self, ds: Dataset, size: int, rng: np.random.Generator):
        self.ds, self.size, self.rng = ds, min(size, len(ds)), rng
        self.perm = rng.permutation(len(ds))
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.size > len(self.perm):
            self.perm = self.rng.permutation(len(self.ds))
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.size]
        self.pos += self.size
        return idx


def train_candidate(
    model: AREADModel,
    cand: CandidateMask,
    data: Dataset,
    cfg: HEMPConfig,
    adam: AdamConfig,
    rng: np.random.Generator,
) -> CandidateMask:
    """Fine-tune under the candidate mask, pruning after every batch."""
    hei_cfg = model.cfg.hei
    stats = GateStatsAccumulator(hei_cfg, model.num_domains)
    d = cand.domain
    batches = _Cycler(data, cfg.candidate_batch_size, rng)
    opt = replace(adam, lr=cfg.lr_u)
    cand.densities.append(density(cand.mask))
    stalled = False
    while True:
        idx = batches.next()
        loss = model.loss(data.features[idx], data.domains[idx], data.labels[idx], {d: cand.mask}, stats.observe)
        loss.backward()
        adam_step(model.store, opt)
        cand.train_losses.append(float(loss.value[0, 0]))
        cand.batches += 1
        if density(cand.mask) > cfg.s and cand.prune_iters < cfg.max_prune_iters and not stalled:
            cand.mask, info = prune_step(cand.mask, stats.means(d), cfg.alpha)
            cand.prune_iters += 1
            cand.densities.append(density(cand.mask))
            stalled = info.stopped_short
        done = density(cand.mask) <= cfg.s or cand.prune_iters >= cfg.max_prune_iters or stalled
        if done and cand.batches >= cfg.k:
            return cand


@dataclass
class SearchResult:
    domain: int
    mask: HierMask
    chosen: int
    candidates: list
    fallback: bool = False

    def summary(self) -> dict:
        best = self.candidates[self.chosen] if self.candidates else None
        return {
            "domain": self.domain,
            "chosen": self.chosen,
            "score": None if best is None else best.score,
            "density": density(self.mask),
            "active": len(active_set(self.mask)),
            "prune_iters": None if best is None else best.prune_iters,
            "fallback": self.fallback,
        }


def search_domain_mask(
    model: AREADModel,
    d: int,
    snapshot,
    aug: Dataset,
    eval_rows: Dataset | None,
    gate_means: Sequence[np.ndarray],
    cfg: HEMPConfig,
    adam: AdamConfig,
    seed: Sequence[int],
    previous: HierMask | None = None,
) -> SearchResult:
    """Run ``z`` candidates for domain ``d`` from ``snapshot``; parameters end at it."""
    store = model.store
    cands = []
    for z in range(cfg.z):
        store.restore(snapshot)
        rng = np.random.default_rng([*seed, d, z])
        cand = CandidateMask(init_candidate(gate_means, cfg, rng), d, z)
        cand.start_hash = store.state_hash()
        if len(aug):
            train_candidate(model, cand, aug, cfg, adam, rng)
        cand.score = score_candidate(model, cand, eval_rows)
        cands.append(cand)
    store.restore(snapshot)
    valid = [c for c in cands if active_set(c.mask)]
    if not valid:
        log.warning("all candidates for domain %d degenerated; keeping previous mask", d)
        mask = previous if previous is not None else HierMask.ones(model.cfg.hei)
        return SearchResult(d, mask, -1, cands, fallback=True)
    best = select_best(valid)
    return SearchResult(d, best.mask, best.z, cands)


@dataclass
class TrainConfig:
    ablation: str = "full"
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 1e-5
    epochs: int = 10
    patience: int = 3

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")


@dataclass
class TrainResult:
    masks: dict | None
    history: list
    rounds: list
    best_epoch: int
    lineage: list


class Trainer:
    """Warm-up, then masked mixed-domain training with periodic mask search.

    ``aug`` holds the per-domain search datasets; it is only touched by the
    candidate searches.  Validation data is only used for early stopping.
    """

    def __init__(
        self,
        model: AREADModel,
        train: Dataset,
        valid: Dataset | None,
        aug: dict[int, Dataset] | None,
        train_cfg: TrainConfig,
        hemp_cfg: HEMPConfig,
        seed: int = 0,
    ):
        self.model = model
        self.train = train
        self.valid = valid
        self.aug = aug
        self.cfg = train_cfg
        self.hemp = hemp_cfg
        self.seed = seed
        self.adam = AdamConfig(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
        self.stats = GateStatsAccumulator(model.cfg.hei, model.num_domains) if model.hei is not None else None
        self.masks: dict[int, HierMask] | None = None
        self.rounds: list[dict] = []
        self.lineage: list[tuple[str, str]] = []
        self.batch_count = 0
        self.phase2_count = 0

    def _rng(self, name: str, *extra: int) -> np.random.Generator:
        import zlib

        return np.random.default_rng([self.seed, zlib.crc32(name.encode()), *extra])

    @property
    def searches(self) -> bool:
        return self.cfg.ablation in ("+hemp", "full")

    def _step(self, idx: np.ndarray, masks) -> float:
        tr = self.train
        observer = self.stats.observe if self.stats is not None else None
        loss = self.model.loss(tr.features[idx], tr.domains[idx], tr.labels[idx], masks, observer)
        loss.backward()
        adam_step(self.model.store, self.adam)
        return float(loss.value[0, 0])

    def eval_rows(self, d: int, round_no: int) -> Dataset:
        idx = self.train.domain_indices(d)
        rng = self._rng("eval-sample", round_no, d)
        if len(idx) > self.hemp.eval_sample_size:
            idx = np.sort(rng.choice(idx, size=self.hemp.eval_sample_size, replace=False))
        return self.train.subset(idx)

    def update_masks(self) -> dict:
        """One search round over all domains from a single snapshot."""
        model = self.model
        round_no = len(self.rounds)
        snap = model.store.snapshot()
        start = model.store.state_hash()
        self.lineage.append(("train", "mask-search"))
        new_masks, summaries, hashes = {}, [], set()
        for d in range(model.num_domains):
            aug = self.aug[d] if self.aug is not None else self.train.subset(self.train.domain_indices(d))
            res = search_domain_mask(
                model,
                d,
                snap,
                aug,
                self.eval_rows(d, round_no),
                self.stats.means(d),
                self.hemp,
                self.adam,
                (self.seed, round_no),
                None if self.masks is None else self.masks.get(d),
            )
            new_masks[d] = res.mask
            summaries.append(res.summary())
            hashes.update(c.start_hash for c in res.candidates)
        end = model.store.state_hash()
        self.masks = new_masks
        self.stats.reset()
        rec = {
            "round": round_no,
            "batch": self.batch_count,
            "snapshot_hash": start,
            "candidate_start_hashes": sorted(hashes),
            "restored": end == start,
            "domains": summaries,
        }
        self.rounds.append(rec)
        return rec

    def train_batch(self, idx: np.ndarray) -> float:
        cfg = self.cfg
        if cfg.ablation == "base-only" or self.batch_count < self.hemp.warmup_batches:
            loss = self._step(idx, None)
        else:
            if cfg.ablation == "+hei":
                if self.masks is None:
                    self.masks = {d: HierMask.ones(self.model.cfg.hei) for d in range(self.model.num_domains)}
            elif self.phase2_count % self.hemp.update_interval == 0:
                self.update_masks()
            loss = self._step(idx, self.masks)
            self.phase2_count += 1
        self.batch_count += 1
        return loss

    def validate(self) -> float | None:
        if self.valid is None or len(self.valid) == 0:
            return None
        self.lineage.append(("valid", "early-stop"))
        p = self.model.predict_dataset(self.valid, self.masks)
        try:
            return domain_auc(p, self.valid.labels, self.valid.domains)
        except UndefinedAUC:
            return None

    def fit(self) -> TrainResult:
        cfg = self.cfg
        self.lineage.append(("train", "fit"))
        rng = self._rng("batches")
        n = len(self.train)
        history = []
        best = (-np.inf, -1, self.model.store.snapshot(), None)
        bad = 0
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            losses = [self.train_batch(perm[lo : lo + cfg.batch_size]) for lo in range(0, n, cfg.batch_size)]
            v = self.validate()
            history.append({"epoch": epoch, "loss": float(np.mean(losses)), "valid_domain_auc": v})
            log.info("epoch %d loss %.4f valid DomainAUC %s", epoch, history[-1]["loss"], v)
            if v is None:
                best = (-np.inf, epoch, self.model.store.snapshot(), self._copy_masks())
                continue
            if v > best[0]:
                best = (v, epoch, self.model.store.snapshot(), self._copy_masks())
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
        _, best_epoch, snap, masks = best
        self.model.store.restore(snap)
        self.masks = masks
        return TrainResult(masks, history, self.rounds, best_epoch, self.lineage)

    def _copy_masks(self):
        return None if self.masks is None else {d: m.copy() for d, m in self.masks.items()}
