"""Dataset container, libsvm/CSV readers and writers, synthetic generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from ..errors import EmptyDatasetError, ParseError


@dataclass(frozen=True)
class Dataset:
    features: Union[np.ndarray, sp.csr_matrix]
    labels: np.ndarray

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the sample count")
        data = self.features.data if sp.issparse(self.features) else self.features
        if not np.all(np.isfinite(data)):
            raise ValueError("non-finite feature entry")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def dense(self) -> np.ndarray:
        return self.features.toarray() if sp.issparse(self.features) else np.asarray(self.features)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


def _parse_label(tok: str, lineno: int, path) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise ParseError(f"invalid label {tok!r}", lineno, path) from None
    return val


def load_libsvm(path, n_features: Optional[int] = None) -> Dataset:
    """Parse ``label idx:val idx:val ...`` lines (1-based indices).

    Blank lines and ``#`` comments are skipped. Labels become integers when
    all of them are integral.
    """
    rows, cols, vals, labels = [], [], [], []
    max_col = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            labels.append(_parse_label(toks[0], lineno, path))
            r = len(labels) - 1
            prev = 0
            for tok in toks[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise ParseError(f"expected idx:val, got {tok!r}", lineno, path)
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ParseError(f"malformed pair {tok!r}", lineno, path) from None
                if idx < 1:
                    raise ParseError(f"feature index must be >= 1, got {idx}", lineno, path)
                if idx <= prev:
                    raise ParseError("feature indices must be strictly increasing", lineno, path)
                if not np.isfinite(val):
                    raise ParseError(f"non-finite value in {tok!r}", lineno, path)
                prev = idx
                rows.append(r)
                cols.append(idx - 1)
                vals.append(val)
                max_col = max(max_col, idx - 1)
    if not labels:
        raise EmptyDatasetError(f"{path}: no samples")
    width = max_col + 1 if n_features is None else n_features
    if max_col >= width:
        raise ParseError(f"feature index {max_col + 1} exceeds n_features={width}", path=path)
    X = sp.csr_matrix((vals, (rows, cols)), shape=(len(labels), width), dtype=float)
    y = np.asarray(labels)
    if np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return Dataset(X, y)


def _fmt_label(y) -> str:
    y = float(y)
    return str(int(y)) if y == int(y) else repr(y)


def write_libsvm(dataset: Dataset, path) -> None:
    X = sp.csr_matrix(dataset.features)
    with open(path, "w", encoding="utf-8") as fh:
        for r in range(X.shape[0]):
            start, end = X.indptr[r], X.indptr[r + 1]
            parts = [_fmt_label(dataset.labels[r])]
            for c, v in zip(X.indices[start:end], X.data[start:end]):
                if v != 0:
                    parts.append(f"{c + 1}:{float(v)!r}")
            fh.write(" ".join(parts) + "\n")


def load_csv(path) -> Dataset:
    """Dense CSV with header ``label,f0,f1,...``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: empty file") from None
        if not header or header[0] != "label":
            raise ParseError("header must start with 'label'", 1, path)
        width = len(header) - 1
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width + 1:
                raise ParseError(f"expected {width + 1} fields, got {len(rec)}", lineno, path)
            labels.append(_parse_label(rec[0], lineno, path))
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError:
                raise ParseError("non-numeric feature", lineno, path) from None
    if not labels:
        raise EmptyDatasetError(f"{path}: no samples")
    y = np.asarray(labels)
    if np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return Dataset(np.asarray(rows, dtype=float).reshape(len(labels), width), y)


def write_csv(dataset: Dataset, path) -> None:
    X = dataset.dense()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{k}" for k in range(X.shape[1])])
        for lab, row in zip(dataset.labels, X):
            w.writerow([_fmt_label(lab)] + [repr(float(v)) for v in row])


def load_dataset(path) -> Dataset:
    """Dispatch on suffix: ``.csv`` is dense CSV, anything else libsvm."""
    if Path(path).suffix.lower() == ".csv":
        return load_csv(path)
    return load_libsvm(path)


# ---------------------------------------------------------------------------
# synthetic data


def make_two_class(seed, n_samples, n_features=20, n_informative=5, separation=1.0,
                   flip=0.1, w_true=None):
    """Binary ``+-1`` logistic-model data.

    Labels follow ``sign(<w, a> + noise)`` with a fraction ``flip`` flipped;
    only ``n_informative`` coordinates of ``w`` are nonzero unless ``w_true``
    is given. Returns ``(Dataset, w_true)`` so several splits can share it.
    """
    rng = np.random.default_rng(seed)
    if w_true is None:
        k = min(n_informative, n_features)
        w_true = np.zeros(n_features)
        w_true[:k] = separation * rng.standard_normal(k)
    X = rng.standard_normal((n_samples, n_features))
    y = np.where(X @ w_true + 0.5 * rng.standard_normal(n_samples) >= 0, 1, -1)
    flips = rng.random(n_samples) < flip
    y[flips] *= -1
    return Dataset(X, y.astype(np.int64)), w_true


def make_blobs(seed, n_samples, n_features=10, n_classes=3, spread=1.0, centers=None):
    """Gaussian blobs with classes ``0..n_classes-1``; returns ``(Dataset, centers)``."""
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = 2.0 * rng.standard_normal((n_classes, n_features)) / np.sqrt(n_features) * 2.0
    y = rng.integers(n_classes, size=n_samples)
    X = centers[y] + spread * rng.standard_normal((n_samples, n_features))
    return Dataset(X, y.astype(np.int64)), centers
