"""Dataset ingestion: IDX files, label-first CSV, and builtin synthetic tasks."""

from __future__ import annotations

import csv
import gzip
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

BUILTINS = ("gaussian-blobs", "two-spirals", "sine-regression")


class DataFormatError(ValueError):
    """Input file is malformed (bad magic, truncated payload, ragged rows)."""


@dataclass
class DatasetSpec:
    source: str = "gaussian-blobs"  # builtin name, "idx" or "csv"
    images: str | None = None       # IDX image file
    labels: str | None = None       # IDX label file
    path: str | None = None         # CSV file
    normalization: str = "none"     # none | minmax | standard | scale255
    n_samples: int = 1000
    n_features: int = 2
    n_classes: int = 3
    noise: float = 1.0
    val_fraction: float = 0.25
    test_fraction: float = 0.0
    n_calib: int = 64
    seed: int = 0
    limit: int | None = None


@dataclass
class DatasetHandle:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    calib_index: np.ndarray
    task: str = "recognition"
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    n_classes: int = 0
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.task == "recognition" else int(np.prod(self.y_train.shape[1:]) or 1)

    def eval_split(self):
        """Held-out split used for reported scores: test if present, else val."""
        if self.x_test is not None and len(self.x_test):
            return self.x_test, self.y_test
        return self.x_val, self.y_val

    @property
    def x_calib(self) -> np.ndarray:
        return self.x_train[self.calib_index]

    @property
    def y_calib(self) -> np.ndarray:
        return self.y_train[self.calib_index]


# -- file readers -------------------------------------------------------------

def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (MNIST layout: 0x0801 labels, 0x0803 images, etc.)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise DataFormatError(f"{path}: bad IDX magic {raw[:4].hex() if raw else '<empty>'}")
    dtype, ndim = IDX_DTYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = len(raw) - header
    if payload < expected:
        have = payload // max(1, int(np.prod(dims[1:])) * dtype.itemsize)
        raise DataFormatError(
            f"{path}: truncated IDX payload: {dims[0]} items declared, {have} present")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write ``array`` as IDX; unsigned bytes for uint8, big-endian otherwise."""
    array = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(np.int16): 0x0B,
            np.dtype(np.int32): 0x0C, np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}[array.dtype]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        for d in array.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(array.astype(IDX_DTYPES[code]).tobytes())


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv(path):
    """Read ``label,f1,f2,...`` rows. A non-numeric first row is treated as a header."""
    labels, rows, width = [], [], None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            labels.append(vals[0])
            rows.append(vals[1:])
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.asarray(rows, np.float32), np.asarray(labels)


# -- builtin tasks ------------------------------------------------------------

def make_blobs(n, n_features, n_classes, noise, rng):
    centers = rng.uniform(-5.0, 5.0, size=(n_classes, n_features))
    y = rng.integers(0, n_classes, size=n)
    x = centers[y] + noise * rng.standard_normal((n, n_features))
    return x.astype(np.float32), y.astype(np.int64)


def make_spirals(n, noise, rng):
    y = rng.integers(0, 2, size=n)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n)) * 3 * np.pi
    sign = np.where(y == 0, 1.0, -1.0)
    x = np.stack([sign * t * np.cos(t), sign * t * np.sin(t)], axis=1) / (3 * np.pi)
    x = x + 0.05 * noise * rng.standard_normal(x.shape)
    return x.astype(np.float32), y.astype(np.int64)


def make_sine(n, n_features, noise, rng):
    x = rng.uniform(-np.pi, np.pi, size=(n, n_features))
    y = np.sin(x).sum(axis=1, keepdims=True) + 0.05 * noise * rng.standard_normal((n, 1))
    return x.astype(np.float32), y.astype(np.float32)


def normalize(x_train, x_other, how: str):
    if how == "none":
        return x_train, x_other
    if how == "scale255":
        return x_train / 255.0, [x / 255.0 for x in x_other]
    axis = 0
    if how == "minmax":
        lo, hi = x_train.min(axis=axis), x_train.max(axis=axis)
        span = np.where(hi > lo, hi - lo, 1.0)
        f = lambda x: (x - lo) / span
    elif how == "standard":
        mu, sd = x_train.mean(axis=axis), x_train.std(axis=axis)
        sd = np.where(sd > 0, sd, 1.0)
        f = lambda x: (x - mu) / sd
    else:
        raise ValueError(f"unknown normalization {how!r}")
    return f(x_train), [f(x) for x in x_other]


def ingest_dataset(spec: DatasetSpec) -> DatasetHandle:
    """Load ``spec`` and produce deterministic, disjoint train/val splits.

    The calibration subset is drawn from the training split.
    """
    task = "recognition"
    rng = substream(spec.seed, "data")
    if spec.source == "gaussian-blobs":
        x, y = make_blobs(spec.n_samples, spec.n_features, spec.n_classes, spec.noise, rng)
    elif spec.source == "two-spirals":
        x, y = make_spirals(spec.n_samples, spec.noise, rng)
    elif spec.source == "sine-regression":
        x, y = make_sine(spec.n_samples, spec.n_features, spec.noise, rng)
        task = "regression"
    elif spec.source == "idx":
        for p in (spec.images, spec.labels):
            if not p or not os.path.exists(p):
                raise FileNotFoundError(f"IDX file not found: {p}")
        x = read_idx(spec.images).astype(np.float32)
        y = read_idx(spec.labels).astype(np.int64)
        if x.shape[0] != y.shape[0]:
            raise DataFormatError(f"{x.shape[0]} images but {y.shape[0]} labels")
        if x.ndim == 3:
            x = x[:, None]
    elif spec.source == "csv":
        if not spec.path or not os.path.exists(spec.path):
            raise FileNotFoundError(f"CSV file not found: {spec.path}")
        x, y = read_csv(spec.path)
        y = y.astype(np.int64)
    else:
        raise ValueError(f"unknown dataset source {spec.source!r}")

    if spec.limit:
        x, y = x[:spec.limit], y[:spec.limit]
    split_rng = substream(spec.seed, "split")
    order = split_rng.permutation(len(x))
    n_val = int(round(spec.val_fraction * len(x)))
    n_test = int(round(spec.test_fraction * len(x)))
    val_idx = np.sort(order[:n_val])
    test_idx = np.sort(order[n_val:n_val + n_test])
    train_idx = np.sort(order[n_val + n_test:])
    x_train, (x_val, x_test) = normalize(x[train_idx], [x[val_idx], x[test_idx]], spec.normalization)
    n_calib = min(spec.n_calib, len(train_idx))
    calib = np.sort(substream(spec.seed, "calib-subset").choice(len(train_idx), n_calib, replace=False))
    n_classes = int(y.max()) + 1 if task == "recognition" else 0
    return DatasetHandle(
        x_train=np.ascontiguousarray(x_train, np.float32), y_train=y[train_idx],
        x_val=np.ascontiguousarray(x_val, np.float32), y_val=y[val_idx],
        calib_index=calib, task=task, n_classes=n_classes, name=spec.source,
        x_test=np.ascontiguousarray(x_test, np.float32) if n_test else None,
        y_test=y[test_idx] if n_test else None,
        meta={"train_index": train_idx, "val_index": val_idx, "test_index": test_idx},
    )
