"""Toy point-cloud datasets and the affine normalization applied before training."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


class DataKind(str, enum.Enum):
    DELTA = "delta"
    GAUSSIAN = "gaussian"
    EIGHT_GAUSSIANS = "eight-gaussians"
    CHECKERBOARD = "checkerboard"
    TWO_MOONS = "two-moons"
    CSV = "csv"


@dataclass
class ToyDataset:
    """A seeded generator of raw points plus fitted normalization statistics.

    ``normalize=None`` means "fit unless the data is a single point";
    statistics are fitted on ``n_train`` draws from ``seed``.
    """

    kind: DataKind = DataKind.EIGHT_GAUSSIANS
    n_train: int = 10000
    seed: int = 0
    sigma_data: float = 1.0
    point: tuple = (0.5, -0.5)
    mean: tuple = (0.0, 0.0)
    cov: tuple = (1.0, 1.0)
    radius: float = 2.0
    mode_std: float = 0.1
    moon_noise: float = 0.05
    csv_path: str = ""
    normalize: bool | None = None
    shift: np.ndarray | None = field(default=None, repr=False)
    scale: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = DataKind(self.kind)
        self.point = tuple(float(v) for v in self.point)
        self.mean = tuple(float(v) for v in self.mean)
        self.cov = tuple(float(v) for v in self.cov)
        if self.kind is DataKind.GAUSSIAN and len(self.mean) != len(self.cov):
            raise DomainError("gaussian mean and cov must have equal length")
        self._points = None
        if self.kind is DataKind.CSV:
            self._points = load_csv(self.csv_path)

    @property
    def n_classes(self):
        return 8 if self.kind is DataKind.EIGHT_GAUSSIANS else 0

    @property
    def dim(self):
        if self.kind is DataKind.DELTA:
            return len(self.point)
        if self.kind is DataKind.GAUSSIAN:
            return len(self.mean)
        if self.kind is DataKind.CSV:
            return self._points.shape[1]
        return 2

    @property
    def fitted(self):
        return self.shift is not None

    def fit(self):
        """Fit per-axis mean/std on ``n_train`` seeded draws (identity for delta data)."""
        use = self.normalize if self.normalize is not None else self.kind is not DataKind.DELTA
        if not use:
            self.shift = np.zeros(self.dim)
            self.scale = np.ones(self.dim)
            return self
        raw, _ = draw_raw(self, self.n_train, np.random.default_rng(self.seed))
        std = raw.std(0)
        if np.any(std < 1e-12):
            raise DomainError("zero-variance axis; cannot normalize a constant dataset")
        self.shift = raw.mean(0)
        self.scale = self.sigma_data / std
        return self


def draw_raw(ds: ToyDataset, n, rng):
    """Unnormalized draws; returns (points, class ids or None)."""
    if n < 1:
        raise DomainError("n must be at least 1")
    k = ds.kind
    if k is DataKind.DELTA:
        return np.tile(np.asarray(ds.point), (n, 1)), None
    if k is DataKind.GAUSSIAN:
        return np.asarray(ds.mean) + np.sqrt(np.asarray(ds.cov)) * rng.standard_normal((n, len(ds.mean))), None
    if k is DataKind.EIGHT_GAUSSIANS:
        cls = rng.integers(0, 8, size=n)
        ang = 2.0 * np.pi * cls / 8.0
        centers = ds.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return centers + ds.mode_std * rng.standard_normal((n, 2)), cls
    if k is DataKind.CHECKERBOARD:
        x1 = rng.uniform(-2.0, 2.0, n)
        x2 = rng.uniform(0.0, 1.0, n) - 2.0 * rng.integers(0, 2, n) + np.floor(x1) % 2
        return np.stack([x1, x2], axis=1), None
    if k is DataKind.TWO_MOONS:
        upper = rng.uniform(size=n) < 0.5
        th = rng.uniform(0.0, np.pi, n)
        pts = np.where(upper[:, None],
                       np.stack([np.cos(th), np.sin(th)], axis=1),
                       np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=1))
        return pts + ds.moon_noise * rng.standard_normal((n, 2)), None
    idx = rng.integers(0, ds._points.shape[0], size=n)
    return ds._points[idx], None


def normalize(raw, ds: ToyDataset):
    if not ds.fitted:
        raise DomainError("dataset statistics not fitted; call fit() first")
    return (np.asarray(raw, dtype=np.float64) - ds.shift) * ds.scale


def denormalize(x, ds: ToyDataset):
    if not ds.fitted:
        raise DomainError("dataset statistics not fitted; call fit() first")
    return np.asarray(x, dtype=np.float64) / ds.scale + ds.shift


def draw_batch(ds: ToyDataset, n, rng):
    """Normalized draws and class ids (``None`` for unlabeled kinds)."""
    if not ds.fitted:
        ds.fit()
    raw, cls = draw_raw(ds, n, rng)
    return normalize(raw, ds), cls


def load_csv(path):
    """Read a point cloud whose first row names the dimensions."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DomainError(f"{path}: need a header row and at least one data row")
    try:
        pts = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise DomainError(f"{path}: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != len(rows[0]):
        raise DomainError(f"{path}: every row needs {len(rows[0])} values")
    return pts
