"""Dataset container plus CSV and binary (PLTSDATA) readers and writers.

Binary layout, all little-endian::

    b"PLTSDATA"  magic
    u64 N, u64 L, u64 C
    u8  dtype flag      0 = float64, 1 = float32
    u8  label flag      0 = none, 1 = per instance (N), 2 = per timestep (N x L)
    N*L*C values, row-major
    optional int64 label block

CSV layout: header ``instance,timestep,c0,...,c{C-1}[,label]``, one row per
(instance, timestep), instances and timesteps numbered from 0 and complete.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

DATA_MAGIC = b"PLTSDATA"
_HEADER = struct.Struct("<8sQQQBB")


@dataclass
class TimeSeriesDataset:
    values: np.ndarray  # (N, L, C)
    labels: np.ndarray | None = None  # (N,) or (N, L) integers

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise DataError(f"values must be (N, L, C), got shape {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape not in ((self.n,), (self.n, self.length)):
                raise DataError(f"labels shape {self.labels.shape} does not fit values {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def instance_labels(self) -> np.ndarray | None:
        """Per-instance labels (majority vote over time for per-step labels)."""
        if self.labels is None or self.labels.ndim == 1:
            return self.labels
        return np.array([np.bincount(row).argmax() for row in self.labels])

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise DataError("input contains NaN or infinite values")


def save_binary(ds: TimeSeriesDataset, path, dtype=np.float64) -> None:
    flag = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}[np.dtype(dtype)]
    label_flag = 0 if ds.labels is None else ds.labels.ndim
    N, L, C = ds.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, N, L, C, flag, label_flag))
        fh.write(np.ascontiguousarray(ds.values, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())
        if ds.labels is not None:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_binary(path) -> TimeSeriesDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: file too short for a PLTSDATA header")
    magic, N, L, C, flag, label_flag = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if flag not in (0, 1) or label_flag not in (0, 1, 2):
        raise DataError(f"{path}: bad dtype/label flag ({flag}, {label_flag})")
    dtype = np.dtype("<f8") if flag == 0 else np.dtype("<f4")
    n_vals = N * L * C
    n_labels = {0: 0, 1: N, 2: N * L}[label_flag]
    expected = _HEADER.size + n_vals * dtype.itemsize + 8 * n_labels
    if len(raw) != expected:
        raise DataError(f"{path}: header says {expected} bytes, file has {len(raw)}")
    values = np.frombuffer(raw, dtype=dtype, count=n_vals, offset=_HEADER.size).reshape(N, L, C)
    labels = None
    if n_labels:
        offset = _HEADER.size + n_vals * dtype.itemsize
        labels = np.frombuffer(raw, dtype="<i8", count=n_labels, offset=offset)
        labels = labels.reshape((N,) if label_flag == 1 else (N, L)).astype(np.int64)
    return TimeSeriesDataset(values.astype(dtype.newbyteorder("=")), labels)


def save_csv(ds: TimeSeriesDataset, path) -> None:
    N, L, C = ds.values.shape
    labels = ds.labels
    if labels is not None and labels.ndim == 1:
        labels = np.repeat(labels[:, None], L, axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance", "timestep"] + [f"c{c}" for c in range(C)] + (["label"] if labels is not None else []))
        for i in range(N):
            for t in range(L):
                row = [i, t] + [repr(float(v)) for v in ds.values[i, t]]
                if labels is not None:
                    row.append(int(labels[i, t]))
                writer.writerow(row)


def load_csv(path) -> TimeSeriesDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[:2] != ["instance", "timestep"]:
            raise DataError(f"{path}: line 1: header must start with instance,timestep")
        has_label = header[-1] == "label"
        C = len(header) - 2 - int(has_label)
        if C < 1:
            raise DataError(f"{path}: line 1: no value columns")
        rows: dict[tuple[int, int], tuple[list[float], int | None]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                key = (int(row[0]), int(row[1]))
                vals = [float(v) for v in row[2 : 2 + C]]
                label = int(row[-1]) if has_label else None
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if key in rows:
                raise DataError(f"{path}: line {lineno}: duplicate (instance, timestep) {key}")
            rows[key] = (vals, label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    N = max(k[0] for k in rows) + 1
    L = max(k[1] for k in rows) + 1
    if len(rows) != N * L or min(k[0] for k in rows) < 0 or min(k[1] for k in rows) < 0:
        raise DataError(f"{path}: ragged data: {len(rows)} rows for {N} instances x {L} timesteps")
    values = np.empty((N, L, C))
    labels = np.empty((N, L), dtype=np.int64) if has_label else None
    for (i, t), (vals, label) in rows.items():
        values[i, t] = vals
        if labels is not None:
            labels[i, t] = label
    return TimeSeriesDataset(values, labels)


def detect_format(path) -> str:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return "csv"
    with open(p, "rb") as fh:
        head = fh.read(8)
    return "binary" if head == DATA_MAGIC else "csv"


def load_dataset(path, format: str | None = None) -> TimeSeriesDataset:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    fmt = format or detect_format(path)
    if fmt == "csv":
        return load_csv(path)
    if fmt == "binary":
        return load_binary(path)
    raise DataError(f"unknown format {fmt!r}")


def save_dataset(ds: TimeSeriesDataset, path, format: str | None = None) -> None:
    fmt = format or ("csv" if Path(path).suffix.lower() == ".csv" else "binary")
    if fmt == "csv":
        save_csv(ds, path)
    elif fmt == "binary":
        save_binary(ds, path)
    else:
        raise DataError(f"unknown format {fmt!r}")
