"""Dataset container, CSV ingestion and spatial helpers.

Covariates are standardized on load (mean zero, variance one with the n-1
denominator); group labels map to dense zero-based indices through a sorted,
persisted label map; offsets are log-transformed and centered, with their
variance recorded as the offset family's fixed dispersion.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import (
    DegenerateColumn,
    DimensionMismatch,
    MissingColumn,
    MissingValue,
    NonNumeric,
    SingularCorrelationWarning,
)


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for load_csv."""

    response: str
    covariates: tuple = ()
    groups: tuple = ()
    coords: tuple | None = None      # (x column, y column), village-level
    offset: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.coords is not None and len(self.coords) != 2:
            raise ValueError("coords must name exactly two columns")


@dataclass
class Dataset:
    """Observed data, standardized and index-mapped.

    X holds the standardized covariates; x_center/x_scale allow mapping
    fitted coefficients back to the raw scale. offsets are centered log
    offsets with their sample variance in offset_log_variance.
    """

    y: np.ndarray
    X: np.ndarray
    groups: np.ndarray
    x_center: np.ndarray = None
    x_scale: np.ndarray = None
    coords: np.ndarray | None = None
    offsets: np.ndarray | None = None
    offset_log_variance: float | None = None
    covariate_names: tuple = ()
    group_names: tuple = ()
    label_maps: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n = len(self.y)
        self.X = np.asarray(self.X, dtype=float).reshape(n, -1)
        self.groups = np.asarray(self.groups, dtype=int).reshape(n, -1)
        if self.x_center is None:
            self.x_center = np.zeros(self.X.shape[1])
        if self.x_scale is None:
            self.x_scale = np.ones(self.X.shape[1])

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def to_csv(self, path):
        """Canonical CSV of the post-standardization values."""
        cols = {"y": self.y}
        names = self.covariate_names or tuple(f"x{j + 1}" for j in range(self.p))
        for j, name in enumerate(names):
            cols[name] = self.X[:, j]
        gnames = self.group_names or tuple(f"g{k + 1}" for k in range(self.groups.shape[1]))
        for k, name in enumerate(gnames):
            cols[name] = self.groups[:, k] + 1
        if self.coords is not None:
            site = self.groups[:, 0]
            cols["coord_x"] = self.coords[site, 0]
            cols["coord_y"] = self.coords[site, 1]
        if self.offsets is not None:
            cols["offset"] = self.offsets
        pd.DataFrame(cols).to_csv(path, index=False)


def standardize_columns(X: np.ndarray, names=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(standardized X, centers, scales); scales use the n-1 denominator."""
    X = np.asarray(X, dtype=float)
    names = names or [f"x{j + 1}" for j in range(X.shape[1])]
    center = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1)
    for j, s in enumerate(scale):
        if s == 0.0 or not np.isfinite(s):
            raise DegenerateColumn(f"column {names[j]} has zero variance")
    return (X - center) / scale, center, scale


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Read and validate a modeling CSV against the schema.

    Rejects missing columns, non-numeric entries in numeric roles and
    missing values (reporting row and column); never imputes.
    """
    frame = pd.read_csv(path)
    needed = [schema.response, *schema.covariates, *schema.groups]
    if schema.coords:
        needed += list(schema.coords)
    if schema.offset:
        needed.append(schema.offset)
    for col in needed:
        if col not in frame.columns:
            raise MissingColumn(col)

    numeric_cols = [schema.response, *schema.covariates]
    if schema.coords:
        numeric_cols += list(schema.coords)
    if schema.offset:
        numeric_cols.append(schema.offset)
    for col in numeric_cols:
        raw = frame[col]
        vals = pd.to_numeric(raw, errors="coerce")
        bad = vals.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            if pd.isna(raw.iloc[row]):
                raise MissingValue(f"missing value at row {row + 2}, column {col!r}")
            raise NonNumeric(f"non-numeric entry {raw.iloc[row]!r} at row {row + 2}, column {col!r}")
        frame[col] = vals.to_numpy(dtype=float)
    for col in schema.groups:
        if frame[col].isna().any():
            row = int(np.flatnonzero(frame[col].isna().to_numpy())[0])
            raise MissingValue(f"missing value at row {row + 2}, column {col!r}")

    y = frame[schema.response].to_numpy(dtype=float)
    n = len(y)
    if schema.covariates:
        X, center, scale = standardize_columns(
            frame[list(schema.covariates)].to_numpy(dtype=float), schema.covariates)
    else:
        X, center, scale = np.zeros((n, 0)), np.zeros(0), np.ones(0)

    groups = np.zeros((n, len(schema.groups)), dtype=int)
    label_maps = []
    for k, col in enumerate(schema.groups):
        labels = frame[col].astype(str).to_numpy()
        uniq = sorted(set(labels))
        lut = {lab: i for i, lab in enumerate(uniq)}
        groups[:, k] = [lut[lab] for lab in labels]
        label_maps.append(tuple(uniq))

    coords = None
    if schema.coords:
        if not schema.groups:
            raise DimensionMismatch("coords require a group column to attach to")
        xs = frame[schema.coords[0]].to_numpy(dtype=float)
        ys = frame[schema.coords[1]].to_numpy(dtype=float)
        L = len(label_maps[0])
        coords = np.full((L, 2), np.nan)
        for i in range(n):
            l = groups[i, 0]
            if np.isnan(coords[l, 0]):
                coords[l] = (xs[i], ys[i])
            elif coords[l, 0] != xs[i] or coords[l, 1] != ys[i]:
                raise DimensionMismatch(
                    f"inconsistent coordinates within group level {label_maps[0][l]!r}")

    offsets = None
    offset_var = None
    if schema.offset:
        raw = frame[schema.offset].to_numpy(dtype=float)
        if np.any(raw <= 0):
            raise NonNumeric("offsets must be positive to take logs")
        lo = np.log(raw)
        offsets = lo - lo.mean()
        offset_var = float(np.var(lo, ddof=1))

    return Dataset(y=y, X=X, groups=groups, x_center=center, x_scale=scale,
                   coords=coords, offsets=offsets, offset_log_variance=offset_var,
                   covariate_names=tuple(schema.covariates),
                   group_names=tuple(schema.groups),
                   label_maps=tuple(label_maps))


def spatial_distances(coords) -> np.ndarray:
    """Euclidean pairwise distances between site coordinates."""
    c = np.atleast_2d(np.asarray(coords, dtype=float))
    if not np.all(np.isfinite(c)):
        raise ValueError("coordinates must be finite")
    return np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))


def exp_correlation(distances, rho: float) -> np.ndarray:
    """C(d) = exp(-d / rho): symmetric, unit diagonal, entries in (0, 1]."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    d = np.asarray(distances, dtype=float)
    C = np.exp(-d / rho)
    off = ~np.eye(len(C), dtype=bool)
    if len(C) > 1 and np.any(C[off] >= 1.0 - 1e-14):
        warnings.warn("duplicate site coordinates: correlation matrix is singular",
                      SingularCorrelationWarning)
    return C
