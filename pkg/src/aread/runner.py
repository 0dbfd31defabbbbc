"""End-to-end runs: data, training per ablation preset, artifacts.

A run directory holds

    config.cfg        flat key = value copy of the run configuration
    checkpoint.bin    parameters plus schema, config and train-split stats
    masks/            one ``domain_{d}.mask`` file per domain (masked presets)
    report.json       test metrics, training history and mask-search rounds
    scores.csv        per test sample: domain, label, score
    manifest.json     config, seed, build id and data fingerprints

Everything random is derived from ``RunConfig.seed``.  Test rows are scored
once, after training has finished.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import config as _config
from .augment import AugConfig, build_augmented, check_augmented, compute_popularity
from .autodiff import load_checkpoint, save_checkpoint
from .base import EmbeddingConfig, MMoEConfig
from .data import Dataset, DomainStats, Schema, compute_stats, load_csv, split
from .hei import HEIConfig, HierMask, read_masks, validate, write_masks
from .hemp import HEMPConfig, TrainConfig, Trainer
from .metrics import metrics_report, overlap_matrix
from .model import AREADModel, ModelConfig
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)

SECTIONS = {
    "synth": SynthConfig,
    "emb": EmbeddingConfig,
    "mmoe": MMoEConfig,
    "hei": HEIConfig,
    "hemp": HEMPConfig,
    "aug": AugConfig,
    "train": TrainConfig,
}


class RunError(RuntimeError):
    """A run could not complete; the message is meant for the user."""


@dataclass
class RunConfig:
    # CSV file (split by seed) or a directory with train/valid/test.csv; None means synthetic
    data: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    emb: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    mmoe: MMoEConfig = field(default_factory=MMoEConfig)
    hei: HEIConfig = field(default_factory=HEIConfig)
    hemp: HEMPConfig = field(default_factory=HEMPConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, epochs=20))
    seed: int = 0
    minor_threshold: float = 0.02

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.emb, self.mmoe, self.hei, use_hei=self.train.ablation != "base-only")

    def effective_aug(self) -> AugConfig:
        # only the full preset augments; the augmentation seed follows the run seed
        r = self.aug.r_aug if self.train.ablation == "full" else 0.0
        return dataclasses.replace(self.aug, r_aug=r, seed=self.seed)

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {"data": self.data, "seed": self.seed, "minor_threshold": self.minor_threshold}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "RunConfig":
        base = cls()
        top, nested = {}, {name: dataclasses.asdict(getattr(base, name)) for name in SECTIONS}
        for key, v in values.items():
            if "." in key:
                sec, k = key.split(".", 1)
                if sec not in SECTIONS or k not in nested[sec]:
                    raise KeyError(f"unknown config key {key!r}")
                nested[sec][k] = v
            elif key in ("data", "seed", "minor_threshold"):
                top[key] = v
            else:
                raise KeyError(f"unknown config key {key!r}")
        parts = {name: _config.coerce(SECTIONS[name], nested[name]) for name in SECTIONS}
        return cls(**top, **parts)


def build_id() -> str:
    """Digest of the package sources; stands in for a commit id."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class DataSource:
    """Train/valid splits up front; the test split only on request, once."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._test: Dataset | None = None
        self.test_reads = 0
        self._dir = None
        if cfg.data is None:
            self.train, self.valid, self._test = split(generate(cfg.synth), seed=cfg.seed)
        else:
            path = Path(cfg.data)
            if path.is_dir():
                self._dir = path
                self.train = load_csv(path / "train.csv")
                self.valid = load_csv(path / "valid.csv", schema=self.train.schema)
            else:
                self.train, self.valid, self._test = split(load_csv(path), seed=cfg.seed)

    @property
    def schema(self) -> Schema:
        return self.train.schema

    def test(self) -> Dataset:
        self.test_reads += 1
        if self.test_reads > 1:
            raise RunError("test data requested more than once")
        if self._dir is not None:
            return load_csv(self._dir / "test.csv", schema=self.schema)
        return self._test.subset(np.arange(len(self._test)), "test")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_scores(path: Path, ds: Dataset, scores: np.ndarray) -> None:
    lines = ["index,domain,label,score"]
    lines += [f"{i},{int(d)},{int(y)},{float(s)!r}" for i, (d, y, s) in enumerate(zip(ds.domains, ds.labels, scores))]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 1].astype(int), arr[:, 2].astype(int), arr[:, 3]


def extra_groups(num_domains: int) -> list[tuple[str, int]]:
    return [("minor4", min(4, num_domains))]


def evaluate(model: AREADModel, ds: Dataset, masks, stats: DomainStats) -> tuple[dict, np.ndarray]:
    scores = model.predict_dataset(ds, masks)
    return _jsonable(metrics_report(scores, ds.labels, ds.domains, stats, extra_groups(stats.num_domains))), scores


def run(cfg: RunConfig, out_dir: str | Path, dump_aug: bool = False) -> dict:
    """Train per the ablation preset and write every artifact; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = DataSource(cfg)
    train, valid = src.train, src.valid
    stats = compute_stats(train, cfg.minor_threshold)
    log.info("train %d valid %d domains %d minor %s", len(train), len(valid), stats.num_domains, sorted(stats.minor))

    aug_cfg = cfg.effective_aug()
    pop = compute_popularity(train, aug_cfg.rho_quantile)
    aug = build_augmented(train, stats, pop, aug_cfg)
    problems = check_augmented(aug, train, stats, pop, aug_cfg.r_aug)
    if problems:
        raise RunError("augmentation contract violated: " + "; ".join(problems[:5]))
    if dump_aug:
        (out / "aug").mkdir(exist_ok=True)
        for d, ds in aug.items():
            ds.to_csv(out / "aug" / f"domain_{d}.csv", provenance=True)

    mcfg = cfg.model_config()
    model = AREADModel(src.schema.vocab_sizes, src.schema.num_domains, mcfg, np.random.default_rng([cfg.seed, 1]))
    trainer = Trainer(model, train, valid, aug, cfg.train, cfg.hemp, cfg.seed)
    result = trainer.fit()
    masks = result.masks if cfg.train.ablation != "base-only" else None

    test = src.test()
    trainer.lineage.append(("test", "report"))
    test_report, scores = evaluate(model, test, masks, stats)

    _config.write_flat(out / "config.cfg", cfg.to_flat())
    meta = {
        "schema": src.schema.to_dict(),
        "config": _jsonable(cfg.to_flat()),
        "stats": stats.to_dict(),
        "build_id": build_id(),
    }
    save_checkpoint(out / "checkpoint.bin", model.store, meta)
    if masks is not None:
        write_masks(out / "masks", masks)
    write_scores(out / "scores.csv", test, scores)
    report = {
        "ablation": cfg.train.ablation,
        "seed": cfg.seed,
        "test": test_report,
        "best_epoch": result.best_epoch,
        "history": _jsonable(result.history),
        "hemp_rounds": _jsonable(result.rounds),
        "aug_copies": {str(d): int((ds.source_domain >= 0).sum()) for d, ds in aug.items()},
        "lineage": [list(e) for e in trainer.lineage],
    }
    _dump_json(out / "report.json", report)
    _dump_json(
        out / "manifest.json",
        {
            "config": _jsonable(cfg.to_flat()),
            "seed": cfg.seed,
            "build_id": build_id(),
            "data": {"train": train.fingerprint(), "valid": valid.fingerprint(), "test": test.fingerprint()},
        },
    )
    return report


def load_run(run_dir: str | Path, checkpoint: str | Path | None = None, mask_dir: str | Path | None = None):
    """Rebuild ``(cfg, model, masks, stats)`` from a run directory."""
    run_dir = Path(run_dir)
    arrays, meta = load_checkpoint(checkpoint or run_dir / "checkpoint.bin")
    cfg = RunConfig.from_flat(meta["config"])
    schema = Schema.from_dict(meta["schema"])
    model = AREADModel(schema.vocab_sizes, schema.num_domains, cfg.model_config(), np.random.default_rng(0))
    try:
        model.store.load_values(arrays)
    except (KeyError, ValueError) as e:
        raise RunError(f"checkpoint does not match the configured model: {e}") from e
    masks = None
    if cfg.train.ablation != "base-only":
        masks = read_masks(mask_dir or run_dir / "masks")
        if sorted(masks) != list(range(schema.num_domains)):
            raise RunError(f"expected masks for domains 0..{schema.num_domains - 1}, found {sorted(masks)}")
        for m in masks.values():
            try:
                validate(m, cfg.hei)
            except ValueError as e:
                raise RunError(f"mask does not fit the model: {e}") from e
    st = meta["stats"]
    counts = np.asarray(st["counts"])
    stats = DomainStats(counts, counts / counts.sum(), frozenset(st["major"]), frozenset(st["minor"]), st["minor_threshold"])
    return cfg, schema, model, masks, stats


def eval_run(run_dir, data: str | Path | None = None, checkpoint=None, mask_dir=None, all_ones: bool = False) -> dict:
    """Inference-only report.  Without ``data`` the run's own test split is rebuilt."""
    cfg, schema, model, masks, stats = load_run(run_dir, checkpoint, mask_dir)
    if data is None:
        ds = DataSource(cfg).test()
    else:
        ds = load_csv(data, schema=schema)
    if all_ones and masks is not None:
        masks = {d: HierMask.ones(cfg.hei) for d in masks}
    rep, _ = evaluate(model, ds, masks, stats)
    return rep


def analyze_masks(mask_dir: str | Path, out_csv: str | Path | None = None, layer: int | None = None) -> np.ndarray:
    """Pairwise overlap ratios of a mask dump, optionally written as CSV."""
    masks = read_masks(mask_dir)
    if not masks:
        raise RunError(f"no mask files in {mask_dir}")
    mat = overlap_matrix(masks, layer)
    if out_csv is not None:
        ids = sorted(masks)
        lines = ["domain," + ",".join(f"d{d}" for d in ids)]
        lines += [f"d{d}," + ",".join(f"{v:.6f}" for v in row) for d, row in zip(ids, mat)]
        Path(out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return mat
