"""Datasets: synthetic generation with graded hardness, table I/O, text hashing,
split + standardisation."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import Rng
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Instance:
    id: int
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "all"
    # per-instance tags kept alongside the data (e.g. synthetic "easy" flag)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        if not len(self.ids) == len(self.X) == len(self.y):
            raise DataError("ids, features and labels differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("instance ids must be unique")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.ids)

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Instance:
        return Instance(int(self.ids[i]), self.X[i], int(self.y[i]))

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        meta = {k: np.asarray(v)[idx] for k, v in self.meta.items()}
        return Dataset(self.ids[idx], self.X[idx], self.y[idx], self.num_classes,
                       split or self.split, meta)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    n: int = 4000
    feature_dim: int = 8
    easy_fraction: float = 0.5
    margin_easy: float = 3.0
    margin_hard: float = 1.0
    noise: float = 0.1

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.n < self.num_classes:
            raise ConfigError(f"n={self.n} is smaller than num_classes={self.num_classes}")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ConfigError("easy_fraction must lie in [0, 1]")
        if not (self.margin_easy > 0 and self.margin_hard > 0):
            raise ConfigError("margins must be positive")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must lie in [0, 1]")
        return self


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Gaussian mixture with two components per class and a graded hardness spectrum.

    Each class owns two cluster centres on a random direction pair. An instance
    sits at ``margin * centre + N(0, I)``: easy instances use ``margin_easy``,
    hard ones draw their margin uniformly from (0, margin_hard]. A ``noise``
    fraction of hard instances take their features from a different class
    (label noise). Class counts are balanced exactly.
    """
    spec.validate()
    gen = Rng(seed).stream("data")
    C, n, d = spec.num_classes, spec.n, spec.feature_dim

    # unit-norm cluster centres, two per class
    centres = gen.standard_normal((C, 2, d))
    centres /= np.linalg.norm(centres, axis=-1, keepdims=True)

    labels = np.repeat(np.arange(C), n // C)
    labels = np.concatenate([labels, np.arange(n - len(labels))])
    labels = labels[gen.permutation(n)]

    easy = gen.random(n) < spec.easy_fraction
    margin = np.where(easy, spec.margin_easy, gen.uniform(0.0, 1.0, n) * spec.margin_hard)
    margin = np.where(margin == 0.0, spec.margin_hard, margin)
    flipped = (~easy) & (gen.random(n) < spec.noise)
    source = labels.copy()
    shift = gen.integers(1, C, size=n)
    source[flipped] = (labels[flipped] + shift[flipped]) % C

    component = gen.integers(0, 2, size=n)
    X = margin[:, None] * centres[source, component] + gen.standard_normal((n, d))
    return Dataset(np.arange(n), X, labels, C, "all",
                   {"easy": easy, "margin": margin, "flipped": flipped})


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_rows(path, header: Sequence[str], rows):
    """Comma-separated, UTF-8, header row first. Floats use shortest round-trip repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        return header, list(reader)


def write_table(ds: Dataset, path, format: str = "delimited"):
    header = ["label"] + [f"f{j}" for j in range(ds.feature_dim)]
    if format == "delimited":
        write_rows(path, header, ([int(y)] + list(x) for x, y in zip(ds.X, ds.y)))
    elif format == "record-per-line":
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for x, y in zip(ds.X, ds.y):
                rec = {"label": int(y)}
                rec.update({f"f{j}": float(v) for j, v in enumerate(x)})
                fh.write(json.dumps(rec) + "\n")
    else:
        raise ConfigError(f"unknown table format {format!r}")


def _parse_record(row: dict, feature_cols, rownum: int):
    label = row.get("label")
    if label is None or str(label).strip() == "":
        raise DataError(f"row {rownum}: missing label value")
    try:
        label = int(label)
    except (TypeError, ValueError):
        raise DataError(f"row {rownum}: label {label!r} is not an integer") from None
    feats = []
    for col in feature_cols:
        v = row.get(col)
        if v is None or str(v).strip() == "":
            raise DataError(f"row {rownum}: missing value for {col}")
        try:
            feats.append(float(v))
        except (TypeError, ValueError):
            raise DataError(f"row {rownum}: {col}={v!r} is not a number") from None
    return label, feats


def load_table(path, format: str = "delimited", num_classes: int | None = None) -> Dataset:
    """Load ``label,f0,f1,...`` rows. Row numbers in errors count data rows from 1."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    labels, feats = [], []
    if format == "delimited":
        header, rows = read_rows(path)
        if "label" not in header:
            raise DataError(f"{path}: header must declare a 'label' column")
        feature_cols = [c for c in header if c != "label"]
        for i, raw in enumerate(rows, start=1):
            if len(raw) != len(header):
                raise DataError(f"row {i}: expected {len(header)} fields, got {len(raw)}")
            lab, f = _parse_record(dict(zip(header, raw)), feature_cols, i)
            labels.append(lab)
            feats.append(f)
    elif format == "record-per-line":
        feature_cols = None
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate((ln for ln in fh if ln.strip()), start=1):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"row {i}: malformed record ({e.msg})") from None
                if feature_cols is None:
                    feature_cols = [k for k in rec if k != "label"]
                elif sorted(k for k in rec if k != "label") != sorted(feature_cols):
                    raise DataError(f"row {i}: inconsistent feature columns")
                lab, f = _parse_record(rec, feature_cols, i)
                labels.append(lab)
                feats.append(f)
    else:
        raise ConfigError(f"unknown table format {format!r}")
    if not labels:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataError("labels must be non-negative class indices")
    C = num_classes if num_classes is not None else max(int(y.max()) + 1, 2)
    return Dataset(np.arange(len(y)), np.array(feats, dtype=np.float64).reshape(len(y), -1), y, C)


# --------------------------------------------------------------------------
# text features
# --------------------------------------------------------------------------

def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def featurize_text(texts: Sequence[str], dim: int = 64) -> np.ndarray:
    """Hashed bag of words: lowercase, split on whitespace, L2-normalised counts."""
    if dim < 16:
        raise ConfigError(f"hash dimension must be >= 16, got {dim}")
    out = np.zeros((len(texts), dim))
    for i, text in enumerate(texts):
        for tok in text.lower().split():
            out[i, _bucket(tok, dim)] += 1.0
        norm = np.linalg.norm(out[i])
        if norm > 0:
            out[i] /= norm
    return out


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

def split_standardize(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(ds)
    n_train = int(round(fr[0] * n))
    n_dev = int(round(fr[1] * n))
    n_test = n - n_train - n_dev
    if min(n_train, n_dev, n_test) < 1:
        raise ConfigError(f"split {fractions} of {n} instances leaves an empty split")
    order = Rng(seed).stream("split").permutation(n)
    parts = [order[:n_train], order[n_train:n_train + n_dev], order[n_train + n_dev:]]
    train, dev, test = (ds.subset(np.sort(p), name)
                        for p, name in zip(parts, ("train", "dev", "test")))
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    for part in (train, dev, test):
        part.X = (part.X - mean) / std
    return train, dev, test
