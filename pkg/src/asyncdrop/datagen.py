"""Synthetic datasets, capacity-aligned non-i.i.d. sharding, and file ingestion."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, ParseError
from .nn import Dataset

log = logging.getLogger(__name__)


def gen_synthetic(n: int, d_hat: int, p: int, q: int, bound: float = 1.0, seed=None,
                  max_tries: int = 1000) -> Dataset:
    """Gaussian images rescaled to Frobenius norm ``q**-0.5``, targets in ``[-C, C]``."""
    if min(n, d_hat, p, q) < 1:
        raise ConfigError("n, d_hat, p and q must be >= 1")
    if bound <= 0:
        raise ConfigError("label bound must be > 0")
    rng = np.random.default_rng(seed)
    target = q ** -0.5
    images = []
    seen = set()
    tries = 0
    while len(images) < n:
        tries += 1
        if tries > n + max_tries:
            raise GenerationError("could not draw enough distinct samples")
        x = rng.standard_normal((d_hat, p))
        norm = np.linalg.norm(x)
        if norm == 0.0:
            continue
        x = x * (target / norm)
        key = x.tobytes()
        if key in seen:
            continue
        seen.add(key)
        images.append(x)
    labels = rng.uniform(-bound, bound, size=n)
    return Dataset(np.stack(images), labels, "regression", bound=bound)


def gen_classification(n: int, dim: int, num_classes: int, separation: float = 2.0,
                       noise: float = 1.0, seed=None) -> Dataset:
    """Balanced Gaussian class clusters around random unit-norm centres."""
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((num_classes, dim))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    inputs = centres[labels] + noise * rng.standard_normal((n, dim)) / math.sqrt(dim)
    return Dataset(inputs, labels, "classification", num_classes=num_classes)


@dataclass(frozen=True)
class ShardPlan:
    shards: dict
    dominant: dict

    def datasets(self, data: Dataset) -> dict:
        return {cid: data.subset(idx) for cid, idx in self.shards.items()}


def bias_classes(data: Dataset, bands: int) -> np.ndarray:
    """Class labels, or target-quantile band indices for regression data."""
    if data.kind == "classification":
        return data.labels
    edges = np.quantile(data.labels, np.linspace(0, 1, bands + 1)[1:-1])
    return np.searchsorted(edges, data.labels, side="right")


def partition_noniid(data: Dataset, clients, bias: float = 0.8, seed=None,
                     classes_per_level: int = 1) -> ShardPlan:
    """Split ``data`` so clients at one capacity level share a dominant label set.

    Each shard takes ``round(bias * size)`` samples from its level's dominant
    classes and fills the rest uniformly from what is left. ``bias=0`` gives
    i.i.d. shards.
    """
    if not 0.0 <= bias <= 1.0:
        raise ConfigError("bias must be in [0, 1]")
    clients = list(clients)
    rng = np.random.default_rng(seed)
    levels = sorted({c.capacity_level for c in clients})
    classes = bias_classes(data, len(levels) * classes_per_level)
    num_classes = int(classes.max()) + 1 if len(classes) else 0
    if len(levels) * classes_per_level > num_classes:
        log.info("%d levels share %d classes round-robin", len(levels), num_classes)
    dominant = {}
    for rank, level in enumerate(levels):
        dominant[level] = tuple(sorted({(rank * classes_per_level + k) % num_classes
                                        for k in range(classes_per_level)}))

    n = len(data)
    base, extra = divmod(n, len(clients))
    sizes = {c.id: base + (1 if i < extra else 0) for i, c in enumerate(clients)}
    free = np.ones(n, dtype=bool)
    order = rng.permutation(n)
    shards = {c.id: [] for c in clients}
    for c in clients:
        want = int(math.floor(bias * sizes[c.id] + 0.5))
        pool = order[free[order] & np.isin(classes[order], dominant[c.capacity_level])]
        take = pool[:want]
        free[take] = False
        shards[c.id].extend(take.tolist())
    for c in clients:
        need = sizes[c.id] - len(shards[c.id])
        pool = order[free[order]][:need]
        free[pool] = False
        shards[c.id].extend(pool.tolist())
    shards = {cid: np.sort(np.asarray(idx, dtype=np.int64)) for cid, idx in shards.items()}
    return ShardPlan(shards, {c.id: dominant[c.capacity_level] for c in clients})


def write_matrix(path, data: Dataset, fmt: str = "csv") -> None:
    X = data.flat()
    labels = data.labels.astype(np.float64)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label"] + [f"f{j}" for j in range(X.shape[1])])
            for y, row in zip(labels, X):
                w.writerow([repr(float(y))] + [repr(float(v)) for v in row])
    elif fmt == "binary":
        header = struct.pack("<QQ", X.shape[0], X.shape[1])
        body = X.astype("<f8").tobytes(order="C") + labels.astype("<f8").tobytes()
        Path(path).write_bytes(header + body)
    else:
        raise ConfigError(f"unknown matrix format {fmt!r}")


def _finite(value: float, row: int, col: int) -> float:
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {value!r}", row=row, column=col)
    return value


def ingest_matrix(path, fmt: str = "csv", kind: str | None = None) -> Dataset:
    """Load a dataset from the text or raw binary matrix format.

    ``kind=None`` picks classification when every label is a non-negative
    integer, regression otherwise.
    """
    path = Path(path)
    if fmt == "csv":
        labels, rows = [], []
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0].strip() != "label" or any(
                    h.strip() != f"f{j}" for j, h in enumerate(header[1:])):
                raise ParseError("header must be 'label,f0,f1,...'", row=0)
            dim = len(header) - 1
            for row_no, row in enumerate(reader, start=1):
                if not row:
                    continue
                if len(row) != dim + 1:
                    raise ParseError(f"expected {dim + 1} fields, got {len(row)}", row=row_no)
                vals = []
                for col_no, raw in enumerate(row, start=1):
                    try:
                        v = float(raw)
                    except ValueError:
                        raise ParseError(f"not a number: {raw!r}", row=row_no, column=col_no) from None
                    vals.append(_finite(v, row_no, col_no))
                labels.append(vals[0])
                rows.append(vals[1:])
        X = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
        y = np.asarray(labels, dtype=np.float64)
    elif fmt == "binary":
        raw = path.read_bytes()
        if len(raw) < 16:
            raise ParseError("truncated header")
        n, dim = struct.unpack("<QQ", raw[:16])
        expect = 16 + 8 * (n * dim + n)
        if len(raw) != expect:
            raise ParseError(f"expected {expect} bytes for {n}x{dim}, got {len(raw)}")
        X = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=16).astype(np.float64).reshape(n, dim)
        y = np.frombuffer(raw, dtype="<f8", count=n, offset=16 + 8 * n * dim).astype(np.float64)
        bad = np.argwhere(~np.isfinite(X))
        if len(bad):
            raise ParseError("non-finite value", row=int(bad[0][0]) + 1, column=int(bad[0][1]) + 2)
        bad = np.flatnonzero(~np.isfinite(y))
        if len(bad):
            raise ParseError("non-finite label", row=int(bad[0]) + 1, column=1)
    else:
        raise ConfigError(f"unknown matrix format {fmt!r}")
    if kind is None:
        integral = len(y) > 0 and np.all(y == np.round(y)) and np.all(y >= 0)
        kind = "classification" if integral else "regression"
    if kind == "classification":
        return Dataset(X, y.astype(np.int64), "classification")
    bound = float(np.max(np.abs(y))) if len(y) else 0.0
    return Dataset(X, y, "regression", bound=bound)
