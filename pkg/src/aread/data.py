"""Samples, datasets, domain statistics and CSV ingestion."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

OOV = 0
OOV_TOKEN = "<OOV>"
DOMAIN_COLUMN = "domain"
LABEL_COLUMN = "label"
SPLITS = ("train", "valid", "test")


class SchemaError(ValueError):
    pass


class CSVFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    features: tuple[int, ...]
    domain_id: int
    item_id: int
    label: int


@dataclass
class Schema:
    """Ordered categorical fields with their vocabularies.

    ``vocabs[f][0]`` is always the OOV token; real values are numbered from 1 in
    first-seen order.  ``domains`` maps domain id to its raw name.
    """

    fields: list[str]
    vocabs: list[list[str]]
    domains: list[str]
    item_field: str
    _index: list[dict[str, int]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if len(self.fields) != len(self.vocabs):
            raise SchemaError("one vocabulary per field required")
        if self.item_field not in self.fields:
            raise SchemaError(f"item field {self.item_field!r} is not a feature field")
        self._index = [{v: i for i, v in enumerate(voc)} for voc in self.vocabs]

    @property
    def vocab_sizes(self) -> list[int]:
        return [len(v) for v in self.vocabs]

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    @property
    def item_index(self) -> int:
        return self.fields.index(self.item_field)

    def encode(self, f: int, raw: str) -> int:
        return self._index[f].get(raw, OOV)

    def decode(self, f: int, idx: int) -> str:
        return self.vocabs[f][idx]

    def to_dict(self) -> dict:
        return {"fields": self.fields, "vocabs": self.vocabs, "domains": self.domains, "item_field": self.item_field}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(list(d["fields"]), [list(v) for v in d["vocabs"]], list(d["domains"]), d["item_field"])


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable column store of encoded samples.

    ``source_domain`` is -1 for original rows and holds the origin domain for
    counterfactual copies.
    """

    def __init__(self, schema: Schema, features, domains, labels, split_tag: str = "train", source_domain=None):
        features = np.asarray(features, dtype=np.int64).reshape(-1, len(schema.fields))
        n = features.shape[0]
        domains = np.asarray(domains, dtype=np.int64).reshape(n)
        labels = np.asarray(labels, dtype=np.int64).reshape(n)
        if source_domain is None:
            source_domain = np.full(n, -1, dtype=np.int64)
        if split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}")
        if n:
            if domains.min() < 0 or domains.max() >= schema.num_domains:
                raise SchemaError("domain id out of range")
            if not np.isin(labels, (0, 1)).all():
                raise SchemaError("label must be 0 or 1")
            sizes = np.asarray(schema.vocab_sizes)
            if features.min() < 0 or (features >= sizes).any():
                raise SchemaError("feature id outside its field vocabulary")
        self.schema = schema
        self.features = _frozen(features, np.int64)
        self.domains = _frozen(domains, np.int64)
        self.labels = _frozen(labels, np.int64)
        self.source_domain = _frozen(source_domain, np.int64)
        self.split_tag = split_tag

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            tuple(int(v) for v in self.features[i]),
            int(self.domains[i]),
            int(self.features[i, self.schema.item_index]),
            int(self.labels[i]),
        )

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def num_domains(self) -> int:
        return self.schema.num_domains

    @property
    def items(self) -> np.ndarray:
        return self.features[:, self.schema.item_index]

    def subset(self, idx, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.schema,
            self.features[idx],
            self.domains[idx],
            self.labels[idx],
            split_tag or self.split_tag,
            self.source_domain[idx],
        )

    def domain_indices(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.domains == d)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.schema.to_dict()).encode())
        for a in (self.features, self.domains, self.labels, self.source_domain):
            h.update(a.astype("<i8").tobytes())
        h.update(self.split_tag.encode())
        return h.hexdigest()

    def to_csv(self, path: str | Path, provenance: bool = False) -> None:
        sch = self.schema
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = [*sch.fields, DOMAIN_COLUMN, LABEL_COLUMN]
            if provenance:
                header.append("source_domain")
            w.writerow(header)
            for i in range(len(self)):
                row = [sch.decode(f, int(v)) for f, v in enumerate(self.features[i])]
                row += [sch.domains[self.domains[i]], str(int(self.labels[i]))]
                if provenance:
                    s = int(self.source_domain[i])
                    row.append(sch.domains[s] if s >= 0 else "")
                w.writerow(row)


def concat_datasets(parts: Sequence[Dataset], split_tag: str | None = None) -> Dataset:
    schema = parts[0].schema
    return Dataset(
        schema,
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.domains for p in parts]),
        np.concatenate([p.labels for p in parts]),
        split_tag or parts[0].split_tag,
        np.concatenate([p.source_domain for p in parts]),
    )


def load_csv(
    path: str | Path,
    fields: Sequence[str] | None = None,
    item_field: str | None = None,
    schema: Schema | None = None,
) -> Dataset:
    """Read a ``domain``/``label`` CSV with one column per categorical field.

    Without ``schema`` the vocabularies are built in first-seen order.  With a
    ``schema`` (e.g. one saved by a training run) values are encoded against it
    and unseen feature values map to the OOV index; unseen domains are an error.
    ``item_field`` defaults to a column named ``item``, else the last feature.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        for col in (DOMAIN_COLUMN, LABEL_COLUMN):
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        file_fields = [h for h in header if h not in (DOMAIN_COLUMN, LABEL_COLUMN, "source_domain")]
        if schema is not None:
            fields = schema.fields
        if fields is not None and list(fields) != file_fields:
            raise SchemaError(f"{path}: header fields {file_fields} do not match schema {list(fields)}")
        fields = file_fields
        if not fields:
            raise SchemaError(f"{path}: no feature columns")
        col_idx = [header.index(f) for f in fields]
        d_idx, y_idx = header.index(DOMAIN_COLUMN), header.index(LABEL_COLUMN)

        if schema is None:
            if item_field is None:
                item_field = "item" if "item" in fields else fields[-1]
            index = [{OOV_TOKEN: OOV} for _ in fields]
            dom_index: dict[str, int] = {}
            grow = True
        else:
            index = [dict(m) for m in schema._index]
            dom_index = {d: i for i, d in enumerate(schema.domains)}
            grow = False

        feats, doms, labels = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}: row {rowno}: expected {len(header)} columns, got {len(row)}")
            lab = row[y_idx].strip()
            if lab not in ("0", "1"):
                raise CSVFormatError(f"{path}: row {rowno}: label must be 0 or 1, got {lab!r}")
            enc = []
            for f, c in enumerate(col_idx):
                raw = row[c].strip()
                code = index[f].get(raw)
                if code is None:
                    if grow:
                        code = index[f][raw] = len(index[f])
                    else:
                        code = OOV
                enc.append(code)
            draw = row[d_idx].strip()
            d = dom_index.get(draw)
            if d is None:
                if not grow:
                    raise CSVFormatError(f"{path}: row {rowno}: unknown domain {draw!r}")
                d = dom_index[draw] = len(dom_index)
            feats.append(enc)
            doms.append(d)
            labels.append(int(lab))

    if schema is None:
        schema = Schema(
            list(fields),
            [list(ix) for ix in index],  # dicts preserve insertion order
            list(dom_index),
            item_field,
        )
    return Dataset(schema, np.asarray(feats, dtype=np.int64).reshape(-1, len(fields)), doms, labels)


@dataclass(frozen=True)
class DomainStats:
    counts: np.ndarray
    fractions: np.ndarray
    major: frozenset[int]
    minor: frozenset[int]
    minor_threshold: float

    @property
    def num_domains(self) -> int:
        return len(self.counts)

    def largest(self, k: int) -> list[int]:
        """Domain ids of the ``k`` largest domains (ties broken by lower id)."""
        order = sorted(range(len(self.counts)), key=lambda d: (-self.counts[d], d))
        return order[: min(k, len(order))]

    def smallest(self, k: int) -> list[int]:
        order = sorted(range(len(self.counts)), key=lambda d: (self.counts[d], d))
        return order[: min(k, len(order))]

    def to_dict(self) -> dict:
        return {
            "counts": [int(c) for c in self.counts],
            "major": sorted(self.major),
            "minor": sorted(self.minor),
            "minor_threshold": self.minor_threshold,
        }


def compute_stats(ds: Dataset, minor_threshold: float = 0.02) -> DomainStats:
    if len(ds) == 0:
        raise ValueError("compute_stats: empty dataset")
    counts = np.bincount(ds.domains, minlength=ds.num_domains)
    fractions = counts / counts.sum()
    minor = frozenset(int(d) for d in np.flatnonzero(fractions < minor_threshold))
    major = frozenset(range(len(counts))) - minor
    return DomainStats(counts, fractions, major, minor, minor_threshold)


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_va = int(np.floor(round(n * ratios[1], 9)))
    n_te = int(np.floor(round(n * ratios[2], 9)))
    # every split should see the domain when it is big enough to allow it
    n_va, n_te = max(n_va, 1), max(n_te, 1)
    return n - n_va - n_te, n_va, n_te


def split(ds: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified split: per domain at the given ratios, label-balanced within.

    Domains with fewer than three samples go entirely to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for d in range(ds.num_domains):
        idx = ds.domain_indices(d)
        n = len(idx)
        if n == 0:
            continue
        if n < 3:
            log.warning("domain %d has %d samples; all assigned to train", d, n)
            parts[0].append(idx)
            continue
        sizes = _split_sizes(n, ratios)
        pos = rng.permutation(idx[ds.labels[idx] == 1])
        neg = rng.permutation(idx[ds.labels[idx] == 0])
        p_rate = len(pos) / n
        n_pos = [0, 0, 0]
        for s in (1, 2):
            n_pos[s] = int(min(max(round(sizes[s] * p_rate), sizes[s] - len(neg)), sizes[s], len(pos)))
        n_pos[2] = min(n_pos[2], len(pos) - n_pos[1])
        n_pos[0] = len(pos) - n_pos[1] - n_pos[2]
        pi = ni = 0
        for s in (1, 2, 0):
            k_pos, k_neg = n_pos[s], sizes[s] - n_pos[s]
            parts[s].append(np.concatenate([pos[pi : pi + k_pos], neg[ni : ni + k_neg]]))
            pi += k_pos
            ni += k_neg
    out = []
    for s, tag in enumerate(SPLITS):
        idx = np.sort(np.concatenate(parts[s])) if parts[s] else np.zeros(0, dtype=np.intp)
        out.append(ds.subset(idx, tag))
    return tuple(out)
