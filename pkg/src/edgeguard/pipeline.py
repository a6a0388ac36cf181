"""Tabular flow-record preprocessing.

Ingest a UNSW-NB15-style CSV, split it, and turn it into standardized feature
matrices.  Every statistic (winsorization caps, category vocabularies, scaler
moments) is fitted on training rows only and then reused verbatim on the
validation and test partitions.  SMOTE touches the scaled training rows only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import IngestionError, ModelFileError, ParameterError

log = logging.getLogger(__name__)

OTHER = "__OTHER__"
FM_MAGIC = b"EGFM"
FM_VERSION = 1


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class Schema:
    """Column roles.  ``columns`` maps feature name to ``numeric`` or ``categorical``;
    when empty, every non-role column is a feature and its type is inferred."""

    label: str = "label"
    id: str | None = "id"
    attack: str | None = "attack_cat"
    columns: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(**data)


@dataclass
class RawDataset:
    features: pd.DataFrame
    y: np.ndarray
    numeric: list
    categorical: list
    ids: np.ndarray | None = None
    attack: np.ndarray | None = None
    n_missing_dropped: int = 0
    sources: list = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return RawDataset(
            self.features.iloc[idx].reset_index(drop=True),
            self.y[idx],
            self.numeric,
            self.categorical,
            None if self.ids is None else self.ids[idx],
            None if self.attack is None else self.attack[idx],
            self.n_missing_dropped,
            self.sources,
        )


def _read_header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            header = next(csv.reader(fh))
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
    header = [h.strip() for h in header]
    seen, dupes = set(), []
    for h in header:
        if h in seen:
            dupes.append(h)
        seen.add(h)
    if dupes:
        raise IngestionError(f"{path}: duplicate header names {sorted(set(dupes))}")
    return header


def _load_one(path, schema):
    header = _read_header(path)
    if schema.label not in header:
        raise IngestionError(f"{path}: missing label column {schema.label!r}")
    roles = {schema.label, schema.id, schema.attack} - {None}
    if schema.columns:
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise IngestionError(f"{path}: schema columns absent from header: {missing}")
        feature_cols = list(schema.columns)
    else:
        feature_cols = [c for c in header if c not in roles]
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    frame.columns = header
    strip = frame.apply(lambda s: s.str.strip())
    missing_mask = (strip[feature_cols + [schema.label]] == "").any(axis=1).to_numpy()
    n_missing = int(missing_mask.sum())
    if n_missing:
        log.warning("%s: dropping %d rows with missing values", path, n_missing)
    strip = strip.loc[~missing_mask].reset_index(drop=True)
    row_numbers = np.flatnonzero(~missing_mask)

    label = pd.to_numeric(strip[schema.label], errors="coerce").to_numpy()
    bad = ~np.isin(label, (0, 1))
    if bad.any():
        r = int(np.argmax(bad))
        raise IngestionError(
            f"{path}: label must be 0/1, got {strip[schema.label].iloc[r]!r} at data row {row_numbers[r]}")

    numeric, categorical, cols = [], [], {}
    for c in feature_cols:
        kind = schema.columns.get(c) if schema.columns else None
        parsed = pd.to_numeric(strip[c], errors="coerce")
        if kind is None:
            kind = "numeric" if not parsed.isna().any() else "categorical"
        if kind == "numeric":
            bad = parsed.isna().to_numpy() | ~np.isfinite(parsed.to_numpy(dtype=float, na_value=np.nan))
            if bad.any():
                r = int(np.argmax(bad))
                raise IngestionError(
                    f"{path}: unparseable numeric value {strip[c].iloc[r]!r} in column {c!r} "
                    f"at data row {row_numbers[r]}")
            cols[c] = parsed.astype(np.float64)
            numeric.append(c)
        elif kind == "categorical":
            cols[c] = strip[c].astype(str)
            categorical.append(c)
        else:
            raise IngestionError(f"schema type for {c!r} must be numeric or categorical, got {kind!r}")

    ids = None
    if schema.id and schema.id in header:
        ids = strip[schema.id].to_numpy()
        if len(set(ids)) != len(ids):
            raise IngestionError(f"{path}: id column {schema.id!r} is not unique")
    attack = strip[schema.attack].to_numpy().astype(str) if schema.attack and schema.attack in header else None
    return RawDataset(pd.DataFrame(cols), label.astype(np.int8), numeric, categorical, ids, attack,
                      n_missing, [str(path)])


def load_csv(paths, schema=None):
    """Load one or more CSV files sharing a header into a :class:`RawDataset`."""
    schema = schema or Schema()
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [_load_one(Path(p), schema) for p in paths]
    if not parts:
        raise IngestionError("no input files")
    first = parts[0]
    for p in parts[1:]:
        if p.numeric != first.numeric or p.categorical != first.categorical:
            raise IngestionError(f"{p.sources[0]}: column types differ from {first.sources[0]}")
    if len(parts) == 1:
        log.info("loaded %d rows from %s", len(first), first.sources[0])
        return first
    # ids are only unique within a file; concatenated sets keep them for reference
    ds = RawDataset(
        pd.concat([p.features for p in parts], ignore_index=True),
        np.concatenate([p.y for p in parts]),
        first.numeric,
        first.categorical,
        None if any(p.ids is None for p in parts) else np.concatenate([p.ids for p in parts]),
        None if any(p.attack is None for p in parts) else np.concatenate([p.attack for p in parts]),
        sum(p.n_missing_dropped for p in parts),
        [s for p in parts for s in p.sources],
    )
    log.info("loaded %d rows from %d files", len(ds), len(parts))
    return ds


def dedup(raw):
    """Drop exact repeats of (features, label), keeping first occurrences in order."""
    key = raw.features.copy()
    key["__label__"] = raw.y
    keep = ~key.duplicated(keep="first").to_numpy()
    return raw.subset(np.flatnonzero(keep))


# ---------------------------------------------------------------------------
# per-column transforms


def winsorize_fit(column, percentile=95.0, factor=10.0, floor=10.0):
    """Cap value when the column is heavy-tailed (max > factor*median and max > floor), else None."""
    x = np.asarray(column, dtype=np.float64)
    if x.size == 0:
        raise ParameterError("cannot fit winsorization on an empty column")
    mx = x.max()
    if mx > factor * np.median(x) and mx > floor:
        return float(np.percentile(x, percentile, method="linear"))
    return None


def winsorize_apply(column, cap):
    x = np.asarray(column, dtype=np.float64)
    return x if cap is None else np.minimum(x, cap)


@dataclass
class Vocabulary:
    """Retained categories, most frequent first.  ``categories[0]`` is the dropped reference."""

    categories: list
    has_other: bool

    @property
    def columns(self):
        return self.categories[1:] + ([OTHER] if self.has_other else [])

    def to_dict(self):
        return {"categories": list(self.categories), "has_other": self.has_other}


def onehot_fit(column, max_categories=12):
    if max_categories < 2:
        raise ParameterError("max_categories must be >= 2")
    values = pd.Series(np.asarray(column, dtype=str))
    if values.empty:
        raise ParameterError("cannot fit a vocabulary on an empty column")
    counts = values.value_counts()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) <= max_categories:
        return Vocabulary([k for k, _ in ranked], has_other=False)
    # one slot is taken by the OTHER bucket
    return Vocabulary([k for k, _ in ranked[:max_categories - 1]], has_other=True)


def onehot_apply(column, vocab):
    """Indicator matrix over ``vocab.columns``.

    Categories outside the vocabulary go to OTHER; without an OTHER bucket they
    encode as all zeros, the same as the reference category.
    """
    values = np.asarray(column, dtype=str)
    cols = vocab.columns
    out = np.zeros((values.size, len(cols)))
    index = {c: j for j, c in enumerate(cols)}
    retained = set(vocab.categories)
    for r, v in enumerate(values):
        if v in index:
            out[r, index[v]] = 1.0
        elif v not in retained and vocab.has_other:
            out[r, index[OTHER]] = 1.0
    return out


def scale_fit(X, min_std=1e-12):
    """Per-column mean and population std; returns ``(mean, std, keep)`` with constant columns masked out."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > min_std
    return mean, std, keep


def scale_apply(X, mean, std, keep):
    X = np.asarray(X, dtype=np.float64)
    return (X[:, keep] - mean[keep]) / std[keep]


# ---------------------------------------------------------------------------
# fitted transform


@dataclass
class TransformSpec:
    numeric: list
    categorical: list
    caps: dict
    vocabularies: dict
    encoded_names: list
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray

    @property
    def feature_names(self):
        return [n for n, k in zip(self.encoded_names, self.keep) if k]

    @property
    def dropped_constant(self):
        return [n for n, k in zip(self.encoded_names, self.keep) if not k]

    def encode(self, raw):
        parts = [winsorize_apply(raw.features[c].to_numpy(), self.caps.get(c))[:, None] for c in self.numeric]
        parts += [onehot_apply(raw.features[c].to_numpy(), self.vocabularies[c]) for c in self.categorical]
        if not parts:
            return np.zeros((len(raw), 0))
        return np.hstack(parts)

    def transform(self, raw):
        missing = [c for c in self.numeric + self.categorical if c not in raw.features.columns]
        if missing:
            raise IngestionError(f"columns required by the fitted transform are absent: {missing}")
        X = scale_apply(self.encode(raw), self.mean, self.std, self.keep)
        return FeatureMatrix(X, raw.y.astype(np.int8), self.feature_names,
                             None if raw.attack is None else raw.attack.copy())

    def to_dict(self):
        return {
            "numeric": self.numeric,
            "categorical": self.categorical,
            "caps": self.caps,
            "vocabularies": {c: v.to_dict() for c, v in self.vocabularies.items()},
            "encoded_names": self.encoded_names,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "keep": self.keep.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["numeric"], d["categorical"], d["caps"],
                   {c: Vocabulary(**v) for c, v in d["vocabularies"].items()}, d["encoded_names"],
                   np.asarray(d["mean"]), np.asarray(d["std"]), np.asarray(d["keep"], dtype=bool))


def fit_transform_spec(train, max_categories=12, percentile=95.0, factor=10.0, floor=10.0):
    """Fit caps, vocabularies and scaler moments on ``train`` alone."""
    caps = {c: winsorize_fit(train.features[c].to_numpy(), percentile, factor, floor) for c in train.numeric}
    vocabs = {c: onehot_fit(train.features[c].to_numpy(), max_categories) for c in train.categorical}
    names = list(train.numeric) + [f"{c}={v}" for c in train.categorical for v in vocabs[c].columns]
    spec = TransformSpec(list(train.numeric), list(train.categorical), caps, vocabs, names,
                         np.zeros(len(names)), np.ones(len(names)), np.ones(len(names), dtype=bool))
    spec.mean, spec.std, spec.keep = scale_fit(spec.encode(train))
    return spec


# ---------------------------------------------------------------------------
# feature matrices


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    attack_tags: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int8).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ParameterError(f"feature matrix {self.X.shape} and labels {self.y.shape} misaligned")
        if len(self.feature_names) != self.X.shape[1]:
            raise ParameterError("feature_names length must equal the column count")

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        tags = None if self.attack_tags is None else self.attack_tags[idx]
        return FeatureMatrix(self.X[idx], self.y[idx], list(self.feature_names), tags)

    def to_bytes(self):
        meta = json.dumps({"feature_names": list(self.feature_names),
                           "attack_tags": None if self.attack_tags is None else [str(t) for t in self.attack_tags]},
                          sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(FM_MAGIC)
        buf.write(struct.pack("<IQQ", FM_VERSION, *self.X.shape))
        buf.write(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        buf.write(self.y.astype(np.uint8).tobytes())
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < 28 or blob[:4] != FM_MAGIC:
            raise ModelFileError("not a feature-matrix file (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise ModelFileError("feature-matrix checksum mismatch")
        version, rows, cols = struct.unpack("<IQQ", body[4:24])
        if version != FM_VERSION:
            raise ModelFileError(f"feature-matrix version {version} unsupported")
        off = 24
        xb = 8 * rows * cols
        X = np.frombuffer(body[off:off + xb], dtype="<f8").astype(np.float64).reshape(rows, cols)
        off += xb
        y = np.frombuffer(body[off:off + rows], dtype=np.uint8).astype(np.int8)
        off += rows
        (mlen,) = struct.unpack("<I", body[off:off + 4])
        meta = json.loads(body[off + 4:off + 4 + mlen])
        tags = None if meta["attack_tags"] is None else np.asarray(meta["attack_tags"], dtype=str)
        return cls(X, y, meta["feature_names"], tags)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# split and oversampling


def stratified_split(y, ratio=0.8, seed=0):
    """Indices ``(first, second)`` with each class split by ``ratio``.

    Per-class sizes use largest-remainder rounding so the first partition holds
    round(ratio * N) rows; remainder ties go to the lower class label.
    """
    y = np.asarray(y).reshape(-1)
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"split ratio must lie in (0, 1), got {ratio}")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ParameterError("stratified split needs both classes present")
    if counts.min() < 2:
        raise ParameterError(f"class {classes[counts.argmin()]} has fewer than 2 rows")
    r = Fraction(str(ratio))
    exact = [r * int(n) for n in counts]
    take = [int(e) for e in exact]
    target = int(r * int(counts.sum()) + Fraction(1, 2))
    order = sorted(range(classes.size), key=lambda i: (-(exact[i] - take[i]), i))
    for i in order[:target - sum(take)]:
        take[i] += 1
    rng = np.random.default_rng(seed)
    first, second = [], []
    for cls, n_first in zip(classes, take):
        idx = rng.permutation(np.flatnonzero(y == cls))
        first.append(idx[:n_first])
        second.append(idx[n_first:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def _nearest_minority(points, queries, k, chunk=1024):
    """k nearest rows of ``points`` for each query index, excluding the query itself."""
    sq = np.einsum("ij,ij->i", points, points)
    out = np.empty((queries.size, k), dtype=np.int64)
    for lo in range(0, queries.size, chunk):
        q = queries[lo:lo + chunk]
        d = sq[q][:, None] + sq[None, :] - 2.0 * points[q] @ points.T
        d[np.arange(q.size), q] = np.inf
        out[lo:lo + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def smote(X, y, k=5, seed=0):
    """Oversample the minority class up to the majority count.

    Each synthetic row is ``x + u * (neighbor - x)`` with ``x`` a random minority
    row, ``neighbor`` one of its ``k`` nearest minority rows (Euclidean) and
    ``u ~ U(0, 1)``.  Original rows are kept in order; synthetic rows are appended.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).reshape(-1)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size != 2:
        raise ParameterError("SMOTE needs exactly two classes")
    if counts[0] == counts[1]:
        return X.copy(), y.copy()
    minority = classes[counts.argmin()]
    n_new = int(counts.max() - counts.min())
    pool = X[y == minority]
    if pool.shape[0] < 2:
        raise ParameterError("SMOTE needs at least 2 minority rows; lower k or skip oversampling")
    k = min(k, pool.shape[0] - 1)
    if k < 1:
        raise ParameterError("SMOTE k must be >= 1")
    rng = np.random.default_rng(seed)
    base = rng.integers(0, pool.shape[0], size=n_new)
    pick = rng.integers(0, k, size=n_new)
    gap = rng.random(n_new)
    uniq, inverse = np.unique(base, return_inverse=True)
    neigh = _nearest_minority(pool, uniq, k)[inverse, pick]
    synth = pool[base] + gap[:, None] * (pool[neigh] - pool[base])
    return np.vstack([X, synth]), np.concatenate([y, np.full(n_new, minority, dtype=y.dtype)])


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineConfig:
    split_ratio: float = 0.8
    val_fraction: float = 0.1
    max_categories: int = 12
    percentile: float = 95.0
    cap_factor: float = 10.0
    cap_floor: float = 10.0
    smote_k: int = 5
    apply_smote: bool = True
    dedup: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass
class PreprocessResult:
    train: FeatureMatrix
    val: FeatureMatrix
    test: FeatureMatrix
    spec: TransformSpec
    audit: dict


def _class_counts(y):
    return {str(int(c)): int(n) for c, n in zip(*np.unique(y, return_counts=True))}


def preprocess(raw, config=None, seed=0):
    """Split, de-duplicate, fit on training rows, transform all partitions, oversample training."""
    config = config or PipelineConfig()
    split_seed, val_seed, smote_seed = np.random.SeedSequence(seed).generate_state(3)
    train_idx, test_idx = stratified_split(raw.y, config.split_ratio, split_seed)
    train_raw, test_raw = raw.subset(train_idx), raw.subset(test_idx)
    n_before = len(train_raw)
    if config.dedup:
        train_raw = dedup(train_raw)
    n_dupes = n_before - len(train_raw)
    if config.val_fraction > 0:
        fit_idx, val_idx = stratified_split(train_raw.y, 1.0 - config.val_fraction, val_seed)
        fit_raw, val_raw = train_raw.subset(fit_idx), train_raw.subset(val_idx)
    else:
        fit_raw, val_raw = train_raw, train_raw.subset([])

    spec = fit_transform_spec(fit_raw, config.max_categories, config.percentile, config.cap_factor,
                              config.cap_floor)
    train_fm = spec.transform(fit_raw)
    val_fm = spec.transform(val_raw)
    test_fm = spec.transform(test_raw)
    before = _class_counts(train_fm.y)
    if config.apply_smote:
        X, y = smote(train_fm.X, train_fm.y, config.smote_k, smote_seed)
        added = X.shape[0] - len(train_fm)
        tags = None
        if train_fm.attack_tags is not None:
            tags = np.concatenate([train_fm.attack_tags, np.full(added, "synthetic")])
        train_fm = FeatureMatrix(X, y, train_fm.feature_names, tags)
    audit = {
        "sources": raw.sources,
        "rows_loaded": len(raw),
        "rows_dropped_missing": raw.n_missing_dropped,
        "train_rows_before_dedup": n_before,
        "duplicates_removed": n_dupes,
        "capped_features": {c: v for c, v in spec.caps.items() if v is not None},
        "vocabulary_sizes": {c: len(v.categories) + int(v.has_other) for c, v in spec.vocabularies.items()},
        "dropped_constant_columns": spec.dropped_constant,
        "n_features": len(spec.feature_names),
        "train_class_counts_before_smote": before,
        "train_class_counts": _class_counts(train_fm.y),
        "smote_added": len(train_fm) - sum(before.values()),
        "val_class_counts": _class_counts(val_fm.y),
        "test_class_counts": _class_counts(test_fm.y),
    }
    return PreprocessResult(train_fm, val_fm, test_fm, spec, audit)
