"""Attribute-labelled datasets: synthetic generation, CSV ingestion, splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from recupfl.errors import ConfigError, DataError, ParseError, SchemaError


@dataclass(frozen=True)
class AttributeInfo:
    id: str
    cardinality: int
    name: str = ""


@dataclass
class DatasetMeta:
    feature_shape: tuple[int, ...]
    task_classes: int
    attributes: tuple[AttributeInfo, ...] = ()
    split_seed: int | None = None
    feature_names: tuple[str, ...] = ()
    encoder: "CsvEncoder | None" = None

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    def attribute(self, attribute_id: str) -> AttributeInfo:
        for a in self.attributes:
            if a.id == attribute_id:
                return a
        raise ConfigError(f"unknown attribute {attribute_id!r}")


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    task_label: int
    attributes: dict[str, int]
    group: str | None = None


@dataclass
class Dataset:
    """Row-aligned features, task labels, attribute labels and optional group keys."""

    x: np.ndarray
    y: np.ndarray
    attributes: dict[str, np.ndarray]
    meta: DatasetMeta
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.x), -1) if len(self.x) else np.zeros(
            (0, self.meta.feature_dim)
        )
        self.y = np.asarray(self.y, dtype=int)
        n = len(self.x)
        if len(self.y) != n:
            raise DataError("features and task labels differ in length")
        for info in self.meta.attributes:
            if info.id not in self.attributes:
                raise DataError(f"attribute {info.id!r} missing")
            a = np.asarray(self.attributes[info.id], dtype=int)
            if len(a) != n:
                raise DataError(f"attribute {info.id!r} has {len(a)} labels for {n} rows")
            if n and (a.min() < 0 or a.max() >= info.cardinality):
                raise DataError(f"attribute {info.id!r} outside 0..{info.cardinality - 1}")
            self.attributes[info.id] = a
        if n and (self.y.min() < 0 or self.y.max() >= self.meta.task_classes):
            raise DataError("task labels outside declared classes")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if len(self.groups) != n:
                raise DataError("group keys differ in length")

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(
            features=self.x[i].reshape(self.meta.feature_shape),
            task_label=int(self.y[i]),
            attributes={k: int(v[i]) for k, v in self.attributes.items()},
            group=None if self.groups is None else str(self.groups[i]),
        )

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            x=self.x[idx],
            y=self.y[idx],
            attributes={k: v[idx] for k, v in self.attributes.items()},
            meta=self.meta,
            groups=None if self.groups is None else self.groups[idx],
        )


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthSpec:
    """Layout of a synthetic dataset.

    Features are i.i.d. uniform on [0, 1]. Each attribute owns a disjoint block
    of ``attribute_block`` features and is the argmax of a fixed random linear
    score of its centred block, so it is exactly recoverable from the features.
    The task label is the same kind of rule over the remaining features; with
    probability ``correlation`` a row's task label is instead copied from its
    first attribute (modulo the task classes).
    """

    n_features: int = 16
    task_classes: int = 2
    attributes: tuple[tuple[str, int], ...] = (("a0", 2),)
    attribute_block: int = 3
    correlation: float = 0.0
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        need = self.attribute_block * len(self.attributes) + 1
        if self.n_features < need:
            raise ConfigError(f"{self.n_features} features cannot hold {len(self.attributes)} attribute blocks plus a task block")
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigError("correlation must lie in [0, 1]")
        if self.task_classes < 2 or any(c < 2 for _, c in self.attributes):
            raise ConfigError("task and attributes need at least two classes")
        if self.image_shape is not None and int(np.prod(self.image_shape)) != self.n_features:
            raise ConfigError("image shape must cover all features")


@dataclass(frozen=True)
class SynthRules:
    """The generating rules, usable as an exact attribute oracle."""

    spec: SynthSpec
    task_block: np.ndarray
    task_dirs: np.ndarray
    attr_blocks: dict[str, np.ndarray]
    attr_dirs: dict[str, np.ndarray]

    def attribute(self, attribute_id: str, x: np.ndarray) -> np.ndarray:
        block = self.attr_blocks[attribute_id]
        return _rule(np.atleast_2d(x)[:, block], self.attr_dirs[attribute_id])

    def task(self, x: np.ndarray) -> np.ndarray:
        return _rule(np.atleast_2d(x)[:, self.task_block], self.task_dirs)


def _rule(block: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    return np.argmax((block - 0.5) @ dirs, axis=1)


def _directions(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    if k == 2:
        v = rng.normal(size=dim)
        return np.stack([v, -v], axis=1)
    return rng.normal(size=(dim, k))


def synth_rules(spec: SynthSpec, seed: int) -> SynthRules:
    rng = np.random.default_rng([seed, 0])
    b = spec.attribute_block
    attr_blocks, attr_dirs = {}, {}
    for i, (aid, k) in enumerate(spec.attributes):
        attr_blocks[aid] = np.arange(i * b, (i + 1) * b)
        attr_dirs[aid] = _directions(rng, b, k)
    task_block = np.arange(b * len(spec.attributes), spec.n_features)
    return SynthRules(spec, task_block, _directions(rng, task_block.size, spec.task_classes), attr_blocks, attr_dirs)


def synth_generate(spec: SynthSpec, n: int, seed: int, group_size: int | None = None) -> Dataset:
    """Draw ``n`` rows; identical ``(spec, n, seed)`` always yields the same data.

    ``group_size`` assigns consecutive identity keys (``g0``, ``g1``, ...) in
    blocks, for by-group partitioning.
    """
    if n < 0:
        raise ConfigError("n must be non-negative")
    rules = synth_rules(spec, seed)
    rng = np.random.default_rng([seed, 1])
    x = rng.uniform(0.0, 1.0, size=(n, spec.n_features))
    attrs = {aid: rules.attribute(aid, x) if n else np.zeros(0, dtype=int) for aid, _ in spec.attributes}
    y = rules.task(x) if n else np.zeros(0, dtype=int)
    if spec.correlation > 0 and n:
        first = spec.attributes[0][0]
        coupled = rng.uniform(size=n) < spec.correlation
        y = np.where(coupled, attrs[first] % spec.task_classes, y)
    groups = None
    if group_size:
        groups = np.array([f"g{i // group_size}" for i in range(n)])
    meta = DatasetMeta(
        feature_shape=tuple(spec.image_shape) if spec.image_shape else (spec.n_features,),
        task_classes=spec.task_classes,
        attributes=tuple(AttributeInfo(aid, k, aid) for aid, k in spec.attributes),
        split_seed=seed,
    )
    return Dataset(x=x, y=y, attributes=attrs, meta=meta, groups=groups)


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    order = np.random.default_rng(seed).permutation(n)
    return dataset.take(np.sort(order[:n_train])), dataset.take(np.sort(order[n_train:]))


# ---------------------------------------------------------------------------
# CSV ingestion

ROLES = ("feature-numeric", "feature-categorical", "task", "group", "ignore")
OTHER = "<other>"


def _sort_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


@dataclass
class CsvEncoder:
    """Column encodings fitted on a training split.

    Feature columns are emitted in schema (header) order. A numeric column
    becomes one value min-max scaled with the training minimum and range
    (constant columns map to 0). A categorical column becomes a one-hot block
    over its training categories in sorted order followed by an ``<other>``
    slot for values unseen during fitting. Task and attribute values are
    indexed by their sorted training categories.
    """

    schema: dict[str, str]
    numeric_min: dict[str, float] = field(default_factory=dict)
    numeric_range: dict[str, float] = field(default_factory=dict)
    categories: dict[str, list[str]] = field(default_factory=dict)

    @property
    def feature_columns(self) -> list[str]:
        return [c for c, r in self.schema.items() if r.startswith("feature-")]

    @property
    def attribute_columns(self) -> dict[str, str]:
        return {c: r.split(":", 1)[1] for c, r in self.schema.items() if r.startswith("attribute:")}

    @property
    def task_column(self) -> str:
        cols = [c for c, r in self.schema.items() if r == "task"]
        if len(cols) != 1:
            raise SchemaError("schema must declare exactly one task column")
        return cols[0]

    def feature_names(self) -> list[str]:
        names = []
        for c in self.feature_columns:
            if self.schema[c] == "feature-numeric":
                names.append(c)
            else:
                names += [f"{c}={v}" for v in self.categories[c]] + [f"{c}={OTHER}"]
        return names

    def fit(self, rows: list[dict[str, str]]) -> "CsvEncoder":
        for c, role in self.schema.items():
            values = [r[c] for r in rows]
            if role == "feature-numeric":
                nums = np.array([_parse_float(r[c], i, c) for i, r in enumerate(rows)], dtype=np.float64)
                lo = float(nums.min()) if nums.size else 0.0
                hi = float(nums.max()) if nums.size else 0.0
                self.numeric_min[c] = lo
                self.numeric_range[c] = hi - lo
            elif role == "feature-categorical" or role == "task" or role.startswith("attribute:"):
                self.categories[c] = sorted(set(values), key=_sort_key)
        return self

    def encode(self, rows: list[dict[str, str]], feature_shape=None, split_seed=None) -> Dataset:
        n = len(rows)
        blocks = []
        for c in self.feature_columns:
            if self.schema[c] == "feature-numeric":
                nums = np.array([_parse_float(r[c], i, c) for i, r in enumerate(rows)], dtype=np.float64)
                rng_ = self.numeric_range[c]
                col = (nums - self.numeric_min[c]) / rng_ if rng_ > 0 else np.zeros(n)
                blocks.append(col.reshape(n, 1))
            else:
                cats = self.categories[c]
                index = {v: j for j, v in enumerate(cats)}
                onehot = np.zeros((n, len(cats) + 1))
                for i, r in enumerate(rows):
                    onehot[i, index.get(r[c], len(cats))] = 1.0
                blocks.append(onehot)
        x = np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0))
        task = self.task_column
        y = self._labels(rows, task)
        attrs = {aid: self._labels(rows, col) for col, aid in self.attribute_columns.items()}
        groups_cols = [c for c, r in self.schema.items() if r == "group"]
        groups = np.array([r[groups_cols[0]] for r in rows]) if groups_cols else None
        meta = DatasetMeta(
            feature_shape=tuple(feature_shape) if feature_shape else (x.shape[1],),
            task_classes=len(self.categories[task]),
            attributes=tuple(
                AttributeInfo(aid, len(self.categories[col]), col) for col, aid in self.attribute_columns.items()
            ),
            split_seed=split_seed,
            feature_names=tuple(self.feature_names()),
            encoder=self,
        )
        return Dataset(x=x, y=y, attributes=attrs, meta=meta, groups=groups)

    def _labels(self, rows, col) -> np.ndarray:
        index = {v: j for j, v in enumerate(self.categories[col])}
        out = np.empty(len(rows), dtype=int)
        for i, r in enumerate(rows):
            if r[col] not in index:
                raise DataError(f"row {i + 2}, column {col!r}: label {r[col]!r} not seen in the training split")
            out[i] = index[r[col]]
        return out


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"row {row + 2}, column {column!r}: cannot parse {cell!r} as a number") from None
    if not np.isfinite(v):
        raise ParseError(f"row {row + 2}, column {column!r}: non-finite value {cell!r}")
    return v


def _validate_schema(schema: Mapping[str, str]) -> dict[str, str]:
    schema = dict(schema)
    for c, r in schema.items():
        if r not in ROLES and not (r.startswith("attribute:") and len(r) > len("attribute:")):
            raise SchemaError(f"column {c!r}: unknown role {r!r}")
    if sum(r == "task" for r in schema.values()) != 1:
        raise SchemaError("schema must declare exactly one task column")
    if sum(r == "group" for r in schema.values()) > 1:
        raise SchemaError("at most one group column")
    return schema


def read_csv_rows(path: str | Path, schema: Mapping[str, str]) -> list[dict[str, str]]:
    schema = _validate_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: missing header row")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in schema if c not in header]
        if missing:
            raise SchemaError(f"{path}: declared columns missing from header: {missing}")
        rows = []
        for i, raw in enumerate(reader):
            row = {k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in raw.items() if k is not None}
            for c in schema:
                if row.get(c) is None:
                    raise ParseError(f"row {i + 2}, column {c!r}: missing cell")
            rows.append(row)
    return rows


def load_csv(path: str | Path, schema: Mapping[str, str], encoder: CsvEncoder | None = None) -> Dataset:
    """Load a CSV; encoding statistics come from ``encoder`` or, if absent, from this file."""
    rows = read_csv_rows(path, schema)
    enc = encoder if encoder is not None else CsvEncoder(_validate_schema(schema)).fit(rows)
    return enc.encode(rows)


def load_csv_split(
    path: str | Path, schema: Mapping[str, str], train_fraction: float = 0.8, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Split raw rows first, fit the encoder on the training rows only, encode both."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train fraction must lie strictly between 0 and 1")
    rows = read_csv_rows(path, schema)
    n_train = int(round(train_fraction * len(rows)))
    order = np.random.default_rng(seed).permutation(len(rows))
    train_rows = [rows[i] for i in np.sort(order[:n_train])]
    test_rows = [rows[i] for i in np.sort(order[n_train:])]
    enc = CsvEncoder(_validate_schema(schema)).fit(train_rows)
    return enc.encode(train_rows, split_seed=seed), enc.encode(test_rows, split_seed=seed)

