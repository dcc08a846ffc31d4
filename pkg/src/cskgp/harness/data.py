"""Datasets: CSV I/O, standardization, splitting, inducing-point init, generators."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from ..errors import DegenerateColumn, IoError, MissingTarget, ParseError, ValidationError

TARGET = "y"


@dataclass
class Stats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Stats":
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float),
                   float(d["y_mean"]), float(d["y_std"]))

    @classmethod
    def identity(cls, dim: int) -> "Stats":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: list = None
    stats: Optional[Stats] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        self.X = X.reshape(-1, 1) if X.ndim == 1 else X
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValidationError("dataset has non-finite entries")
        if self.columns is None:
            self.columns = [f"x{d}" for d in range(self.X.shape[1])]
        if len(self.columns) != self.X.shape[1]:
            raise ValidationError("column names do not match the feature count")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        extra = {k: np.asarray(v)[idx] for k, v in self.extra.items()
                 if isinstance(v, np.ndarray) and v.shape[:1] == (self.n,)}
        return Dataset(self.X[idx], self.y[idx], list(self.columns), self.stats, extra)


# --- CSV ------------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def format_table(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, table) -> None:
    """Write a Dataset (features then ``y``) or a ``(header, rows)`` pair."""
    if isinstance(table, Dataset):
        header = list(table.columns) + [TARGET]
        rows = np.column_stack([table.X, table.y])
    else:
        header, rows = table
    atomic_write_text(path, format_table(header, rows))


def load_csv(path) -> Dataset:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc}") from exc
    return parse_csv(text)


def parse_csv(text: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    header = [h.strip() for h in header]
    if TARGET not in header:
        raise MissingTarget(f"no target column {TARGET!r} in header {header}")
    t = header.index(TARGET)
    feats = [i for i in range(len(header)) if i != t]
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line_no)
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line_no)
        rows.append(vals)
    if not rows:
        raise ParseError("no data rows", 2)
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, feats].reshape(len(rows), len(feats)), arr[:, t], [header[i] for i in feats])


# --- standardization --------------------------------------------------------------


def standardize(ds: Dataset, stats: Optional[Stats] = None) -> Dataset:
    """Zero-mean, unit-variance columns; ``stats`` defaults to the data's own moments."""
    if stats is None:
        x_std = ds.X.std(axis=0)
        y_std = float(ds.y.std())
        bad = [ds.columns[i] for i in np.flatnonzero(~(x_std > 0))]
        if bad or not y_std > 0:
            raise DegenerateColumn(f"zero-variance columns: {bad + ([] if y_std > 0 else ['y'])}")
        stats = Stats(ds.X.mean(axis=0), x_std, float(ds.y.mean()), y_std)
    X = (ds.X - stats.x_mean) / stats.x_std
    y = (ds.y - stats.y_mean) / stats.y_std
    return Dataset(X, y, list(ds.columns), stats, dict(ds.extra))


def destandardize_predictions(stats: Stats, mean, variance=None):
    """Map predictive moments back to original units."""
    mean = np.asarray(mean) * stats.y_std + stats.y_mean
    if variance is None:
        return mean
    return mean, np.asarray(variance) * stats.y_std**2


def destandardize_inputs(stats: Stats, X):
    return np.asarray(X) * stats.x_std + stats.x_mean


def standardize_inputs(stats: Stats, X):
    return (np.atleast_2d(np.asarray(X, float)) - stats.x_mean) / stats.x_std


# --- splits and inducing points ------------------------------------------------------


def split(ds: Dataset, fraction: float, seed: int):
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"split fraction must lie in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    n_train = math.ceil(round(fraction * ds.n, 9))  # 0.7 * 10 must not become 8
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def split_from_file(ds: Dataset, path):
    """Train/test split from a file of zero-based training row indices, one per line."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        idx = np.array(sorted({int(s) for s in lines}), dtype=int)
    except ValueError as exc:
        raise ParseError(f"bad index in split file: {exc}") from None
    if idx.size == 0 or idx.min() < 0 or idx.max() >= ds.n:
        raise ValidationError("split file indices out of range")
    mask = np.zeros(ds.n, bool)
    mask[idx] = True
    return ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask))


def kmeans_init(X, M: int, seed: int, iterations: int = 50) -> np.ndarray:
    """Lloyd centroids seeded from a random subset of the rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not 1 <= M <= X.shape[0]:
        raise ValidationError(f"need 1 <= M <= N, got M={M}, N={X.shape[0]}")
    unique = np.unique(X, axis=0)
    if M > unique.shape[0]:
        raise ValidationError(f"need M <= number of distinct rows ({unique.shape[0]}), got M={M}")
    with warnings.catch_warnings():
        # empty clusters keep their seed point; coincident ones are repaired below
        warnings.simplefilter("ignore", UserWarning)
        centroids, _ = kmeans2(X, M, iter=iterations, minit="points", seed=seed, missing="warn")
    # repeated rows in X can leave coincident centroids; swap in unused data rows
    _, first = np.unique(centroids, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(M), first)
    if dup.size:
        spare = [u for u in np.random.default_rng(seed).permutation(unique)
                 if not np.any(np.all(centroids == u, axis=1))]
        centroids[dup] = np.asarray(spare[:dup.size])
    return centroids


# --- generators ------------------------------------------------------------------------


def chirp_signal(t):
    t = np.asarray(t, dtype=np.float64)
    return np.cos(2.0 * np.pi * (t + 0.6 * t**3))


def chirp_frequency(t):
    return 1.0 + 1.8 * np.asarray(t, dtype=np.float64) ** 2


def generate_chirp(n: int = 400, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1.0, 1.0, n)
    clean = chirp_signal(t)
    y = clean + noise_sd * rng.standard_normal(n)
    return Dataset(t[:, None], y, ["t"], extra={"clean": clean, "frequency": chirp_frequency(t)})


def generate_regime_series(n: int = 400, seed: int = 0, noise_sd: float = 0.15) -> Dataset:
    """Periodic signal whose period and amplitude switch between regimes.

    Stands in for a yearly irradiance record: a slow cycle with quiet and
    active phases, both of which change the local frequency content.
    """
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0.0, 10.0, n))
    regime = (np.floor(t / 2.5) % 2).astype(int)
    freq = np.where(regime == 0, 0.6, 2.0)
    amp = np.where(regime == 0, 0.5, 1.2)
    phase = 2.0 * np.pi * np.cumsum(np.r_[0.0, np.diff(t)] * freq)
    clean = amp * np.sin(phase) + 0.3 * np.sin(2.0 * np.pi * t / 10.0)
    y = clean + noise_sd * rng.standard_normal(n)
    return Dataset(t[:, None], y, ["year"], extra={"clean": clean})


def generate_spatiotemporal(n: int = 5000, seed: int = 0, noise_sd: float = 0.3) -> Dataset:
    """Count-like surface over (longitude, latitude, combined date-time).

    The time feature is a single numeric column (days plus fraction of
    day); demand has a daily cycle whose strength varies across space.
    """
    rng = np.random.default_rng(seed)
    lon = rng.uniform(-1.0, 1.0, n)
    lat = rng.uniform(-1.0, 1.0, n)
    when = rng.uniform(0.0, 7.0, n)
    centre = np.exp(-((lon - 0.2) ** 2 + (lat + 0.1) ** 2) / 0.15)
    daily = np.sin(2.0 * np.pi * (when % 1.0)) * (0.3 + 1.5 * centre)
    weekly = 0.4 * np.cos(2.0 * np.pi * when / 7.0)
    clean = 2.0 * centre + daily + weekly
    y = clean + noise_sd * rng.standard_normal(n)
    return Dataset(np.column_stack([lon, lat, when]), y, ["lon", "lat", "datetime"],
                   extra={"clean": clean})
