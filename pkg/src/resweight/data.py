"""Tabular data, estimand selection and covariate feature maps."""

from __future__ import annotations

import csv
import enum
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    AlreadyCenteredError,
    DataError,
    GroupTooSmallError,
    MissingColumnError,
    NonBinaryTreatmentError,
    NonNumericError,
)


class Target(str, enum.Enum):
    ATE = "ATE"
    ATT = "ATT"


class Scope(str, enum.Enum):
    SAMPLE = "Sample"
    SUPERPOPULATION = "Superpopulation"


@dataclass(frozen=True)
class EstimandSpec:
    target: Target = Target.ATE
    scope: Scope = Scope.SAMPLE

    @classmethod
    def parse(cls, target: str, scope: str = "sample") -> "EstimandSpec":
        t = Target(target.upper())
        s = {"sample": Scope.SAMPLE, "superpop": Scope.SUPERPOPULATION,
             "superpopulation": Scope.SUPERPOPULATION}[scope.lower()]
        return cls(t, s)

    def target_mask(self, z: np.ndarray) -> np.ndarray:
        """Rows whose covariate distribution defines the balance target."""
        if self.target is Target.ATT:
            return z == 1
        return np.ones(z.shape[0], dtype=bool)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Outcome, binary treatment and covariates for ``n`` units.

    Arrays are copied and frozen on construction so a dataset can be
    shared across worker processes without defensive copies.
    """

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        z = np.asarray(self.z)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or x.ndim != 2:
            raise DataError("y must be a vector and x a matrix")
        n = y.shape[0]
        if z.shape != (n,) or x.shape[0] != n:
            raise DataError(
                f"length mismatch: len(y)={n}, len(z)={z.shape[0]}, rows(x)={x.shape[0]}"
            )
        if not np.all(np.isin(z, (0, 1))):
            bad = np.unique(z[~np.isin(z, (0, 1))])[:5]
            raise NonBinaryTreatmentError(f"treatment not binary: found values {bad.tolist()}")
        if not np.all(np.isfinite(y)):
            raise DataError("outcome contains non-finite values")
        if not np.all(np.isfinite(x)):
            cols = np.flatnonzero(~np.all(np.isfinite(x), axis=0)).tolist()
            raise DataError(f"covariates contain non-finite values in columns {cols}")
        n_t = int(z.sum())
        if n_t < 2 or n - n_t < 2:
            raise GroupTooSmallError(
                f"need at least 2 treated and 2 control units (n_t={n_t}, n_c={n - n_t})"
            )
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("covariate_names length does not match columns of x")
        object.__setattr__(self, "y", _readonly(y))
        zi = np.array(z, dtype=np.int8)
        zi.setflags(write=False)
        object.__setattr__(self, "z", zi)
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_t(self) -> int:
        return int(self.z.sum())

    @property
    def n_c(self) -> int:
        return self.n - self.n_t

    @property
    def treated(self) -> np.ndarray:
        return self.z == 1

    def with_outcome(self, y: np.ndarray) -> "Dataset":
        return replace(self, y=y)


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise NonNumericError(f"non-numeric cell {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise NonNumericError(f"non-finite cell {cell!r} at row {row}, column {col!r}")
    return v


def load_dataset(path: str | Path, outcome_col: str = "y", treat_col: str = "z") -> Dataset:
    """Read a header-first CSV; every column other than outcome/treatment is a covariate."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for col in (outcome_col, treat_col):
        if col not in header:
            raise MissingColumnError(f"missing column {col!r}; header is {header}")
    iy, iz = header.index(outcome_col), header.index(treat_col)
    cov_idx = [j for j in range(len(header)) if j not in (iy, iz)]
    vals = np.empty((len(rows), len(header)))
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"row {i} has {len(r)} fields, expected {len(header)}")
        for j, cell in enumerate(r):
            vals[i - 2, j] = _parse_float(cell.strip(), i, header[j])
    z = vals[:, iz]
    if not np.all(np.isin(z, (0.0, 1.0))):
        bad = np.unique(z[~np.isin(z, (0.0, 1.0))])[:5]
        raise NonBinaryTreatmentError(f"treatment not binary: found values {bad.tolist()}")
    return Dataset(
        y=vals[:, iy],
        z=z.astype(np.int8),
        x=vals[:, cov_idx],
        covariate_names=tuple(header[j] for j in cov_idx),
    )


TRANSFORMS = ("identity", "squares", "poly2")


@dataclass(frozen=True)
class FeatureMap:
    """Covariate transform phi(X) plus an optional centering vector.

    ``identity`` is mean balancing; ``squares`` appends x_j**2; ``poly2``
    appends squares and all pairwise products.
    """

    transform: str = "identity"
    center: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; choose from {TRANSFORMS}")

    @property
    def centered(self) -> bool:
        return self.center is not None

    def names(self, base: tuple[str, ...]) -> list[str]:
        out = list(base)
        if self.transform in ("squares", "poly2"):
            out += [f"{b}^2" for b in base]
        if self.transform == "poly2":
            out += [f"{a}*{b}" for a, b in itertools.combinations(base, 2)]
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """phi(X), uncentered."""
        x = np.asarray(x, dtype=float)
        if self.transform == "identity":
            return x
        cols = [x, x**2]
        if self.transform == "poly2":
            p = x.shape[1]
            pairs = [x[:, a] * x[:, b] for a, b in itertools.combinations(range(p), 2)]
            if pairs:
                cols.append(np.column_stack(pairs))
        return np.hstack(cols)

    def transform_centered(self, x: np.ndarray) -> np.ndarray:
        if self.center is None:
            raise DataError("feature map is not centered; call center_features first")
        return self.apply(x) - self.center


def balance_target(d: Dataset, spec: EstimandSpec, fmap: FeatureMap | None = None) -> np.ndarray:
    """Unweighted mean of phi(X) over the estimand's target rows."""
    fmap = fmap or FeatureMap()
    phi = fmap.apply(d.x)
    return phi[spec.target_mask(d.z)].mean(axis=0)


def center_features(d: Dataset, spec: EstimandSpec, fmap: FeatureMap | None = None) -> FeatureMap:
    """Attach the centering vector: full-sample means for ATE, treated means for ATT."""
    fmap = fmap or FeatureMap()
    if fmap.centered:
        raise AlreadyCenteredError("already centered")
    return replace(fmap, center=balance_target(d, spec, fmap))
