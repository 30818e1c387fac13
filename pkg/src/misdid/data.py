"""Datasets, column roles and the weighted demeaning conventions.

Data arrive as a long CSV with one row per unit and period. A role file maps
column names to their part in the design; a panel is recognised by the
presence of an ``id`` role, otherwise the rows are repeated cross sections.

Role files are YAML restricted to a flat mapping of scalars and lists::

    outcome: y            # required
    time: t               # required, values in {0, 1}
    treatment: d          # required, observed (possibly misclassified) D
    id: unit              # optional; panel layout when present
    covariates: [x1, x2]  # optional, pre-treatment X
    instruments: [z1]     # exclusion instruments, at least one for two-step
    shared: [x1]          # optional, covariates that also enter the
                          #   misclassification index
    true_treatment: dstar # optional, simulated D*
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
import yaml

PANEL = "panel"
RCS = "repeated_cross_section"

_ROLE_KEYS = {"outcome", "time", "treatment", "id", "covariates", "instruments", "shared",
              "true_treatment"}


class DataError(ValueError):
    """Invalid input data; carries the offending row and column when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(message + (f" at {', '.join(where)}" if where else ""))


@dataclass(frozen=True)
class Roles:
    outcome: str
    time: str
    treatment: str
    id: str | None = None
    covariates: tuple[str, ...] = ()
    instruments: tuple[str, ...] = ()
    shared: tuple[str, ...] = ()
    true_treatment: str | None = None

    @classmethod
    def from_mapping(cls, mapping: dict) -> "Roles":
        if not isinstance(mapping, dict):
            raise DataError("role configuration must be a mapping")
        unknown = set(mapping) - _ROLE_KEYS
        if unknown:
            raise DataError(f"unknown role keys: {sorted(unknown)}")
        for key in ("outcome", "time", "treatment"):
            if not mapping.get(key):
                raise DataError(f"role configuration is missing '{key}'")

        def as_tuple(value):
            if value is None:
                return ()
            if isinstance(value, str):
                return (value,)
            return tuple(str(v) for v in value)

        roles = cls(
            outcome=str(mapping["outcome"]),
            time=str(mapping["time"]),
            treatment=str(mapping["treatment"]),
            id=None if mapping.get("id") is None else str(mapping["id"]),
            covariates=as_tuple(mapping.get("covariates")),
            instruments=as_tuple(mapping.get("instruments")),
            shared=as_tuple(mapping.get("shared")),
            true_treatment=(None if mapping.get("true_treatment") is None
                            else str(mapping["true_treatment"])),
        )
        bad = set(roles.shared) - set(roles.covariates)
        if bad:
            raise DataError(f"shared columns must be covariates: {sorted(bad)}")
        return roles

    @classmethod
    def load(cls, path) -> "Roles":
        with open(path, encoding="utf-8") as fh:
            try:
                mapping = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise DataError(f"cannot parse role file {path}: {exc}") from exc
        return cls.from_mapping(mapping or {})

    def to_mapping(self) -> dict:
        out = {"outcome": self.outcome, "time": self.time, "treatment": self.treatment}
        if self.id is not None:
            out["id"] = self.id
        out["covariates"] = list(self.covariates)
        out["instruments"] = list(self.instruments)
        if self.shared:
            out["shared"] = list(self.shared)
        if self.true_treatment is not None:
            out["true_treatment"] = self.true_treatment
        return out

    @property
    def columns(self) -> list[str]:
        cols = [self.outcome, self.time, self.treatment]
        if self.id is not None:
            cols.insert(0, self.id)
        cols += list(self.covariates) + list(self.instruments)
        if self.true_treatment is not None:
            cols.append(self.true_treatment)
        return cols

    @property
    def binary(self) -> list[str]:
        cols = [self.time, self.treatment]
        if self.true_treatment is not None:
            cols.append(self.true_treatment)
        return cols


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated long-format data together with its role map.

    Treat instances as immutable; estimators never modify `frame`.
    """

    frame: pd.DataFrame
    roles: Roles
    validated: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        if not self.validated:
            validate_frame(self.frame, self.roles)
            object.__setattr__(self, "frame", _as_float(self.frame, self.roles))
            object.__setattr__(self, "validated", True)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.roles != other.roles:
            return NotImplemented if not isinstance(other, Dataset) else False
        cols = self.roles.columns
        a, b = self.frame.loc[:, cols], other.frame.loc[:, cols]
        return bool(a.dtypes.equals(b.dtypes)) and a.reset_index(drop=True).equals(
            b.reset_index(drop=True))

    __hash__ = None

    @property
    def layout(self) -> str:
        return PANEL if self.roles.id is not None else RCS

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def n_units(self) -> int:
        if self.layout == PANEL:
            return self.n_rows // 2
        return self.n_rows

    def col(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    @property
    def y(self) -> np.ndarray:
        return self.col(self.roles.outcome)

    @property
    def t(self) -> np.ndarray:
        return self.col(self.roles.time)

    @property
    def d(self) -> np.ndarray:
        return self.col(self.roles.treatment)

    @property
    def dstar(self) -> np.ndarray | None:
        if self.roles.true_treatment is None:
            return None
        return self.col(self.roles.true_treatment)

    @property
    def x(self) -> np.ndarray:
        return _matrix(self.frame, self.roles.covariates)

    @property
    def z(self) -> np.ndarray:
        """Misclassification-index regressors: instruments, then shared covariates."""
        return _matrix(self.frame, tuple(self.roles.instruments) + tuple(self.roles.shared))

    def with_outcome(self, values) -> "Dataset":
        frame = self.frame.copy()
        frame[self.roles.outcome] = np.asarray(values, float)
        return Dataset(frame, self.roles)

    def with_treatment(self, values) -> "Dataset":
        frame = self.frame.copy()
        frame[self.roles.treatment] = np.asarray(values, float)
        return Dataset(frame, self.roles)

    def take(self, rows) -> "Dataset":
        """Row subset (with repetition allowed); used by the bootstrap."""
        return Dataset(self.frame.iloc[np.asarray(rows)].reset_index(drop=True), self.roles,
                       validated=True)


def _as_float(frame: pd.DataFrame, roles: Roles) -> pd.DataFrame:
    frame = frame.copy()
    for name in roles.columns:
        if name != roles.id and frame[name].dtype != np.float64:
            frame[name] = pd.to_numeric(frame[name]).astype(float)
    return frame


def _matrix(frame, names) -> np.ndarray:
    if not names:
        return np.empty((len(frame), 0))
    return frame.loc[:, list(names)].to_numpy(dtype=float)


def validate_frame(frame: pd.DataFrame, roles: Roles) -> None:
    """Check column presence, numeric content, binary roles and panel balance."""
    for name in roles.columns:
        if name not in frame.columns:
            raise DataError("missing column", column=name)
    for name in roles.columns:
        if name == roles.id:
            col = frame[name]
            if col.isna().any():
                raise DataError("missing value", row=int(np.flatnonzero(col.isna())[0]), column=name)
            continue
        col = frame[name]
        if not pd.api.types.is_numeric_dtype(col):
            values = pd.to_numeric(col, errors="coerce")
            bad = values.isna() & col.notna()
            if bad.any():
                raise DataError("non-numeric value", row=int(np.flatnonzero(bad)[0]), column=name)
            col = values
        arr = col.to_numpy(dtype=float)
        nan = ~np.isfinite(arr)
        if nan.any():
            raise DataError("missing or non-finite value", row=int(np.flatnonzero(nan)[0]),
                            column=name)
    for name in roles.binary:
        arr = frame[name].to_numpy(dtype=float)
        bad = (arr != 0.0) & (arr != 1.0)
        if bad.any():
            kind = "time indicator" if name == roles.time else "treatment"
            raise DataError(f"non-binary {kind}", row=int(np.flatnonzero(bad)[0]), column=name)
    if roles.id is not None:
        ids = frame[roles.id].to_numpy()
        t = frame[roles.time].to_numpy(dtype=float)
        codes, _ = pd.factorize(ids)
        count = np.bincount(codes)
        t1 = np.bincount(codes, weights=t)
        bad = np.flatnonzero((count != 2) | (t1 != 1.0))
        if bad.size:
            row = int(np.flatnonzero(codes == bad[0])[0])
            raise DataError(f"unbalanced panel: unit {ids[row]!r} lacks exactly one row per period",
                            row=row, column=roles.id)


def ingest_csv(path, roles: Roles) -> Dataset:
    """Read a long CSV and validate it against `roles`.

    Row numbers in errors count data rows from 0 (the header is not counted).
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse CSV {path}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return Dataset(frame, roles)


def write_csv(dataset: Dataset, path) -> None:
    """Write the role columns in canonical order; floats are written round-trip exact."""
    dataset.frame.loc[:, dataset.roles.columns].to_csv(path, index=False, lineterminator="\n")


class FirstDifference(NamedTuple):
    dy: np.ndarray
    x: np.ndarray
    d: np.ndarray
    z: np.ndarray
    dstar: np.ndarray | None
    ids: np.ndarray
    y0: np.ndarray


def first_difference(panel: Dataset) -> FirstDifference:
    """Unit-level first differences with baseline-period covariates.

    Treatment, covariates, instruments and the true treatment must not vary
    within a unit; time-varying values raise :class:`DataError`.
    """
    if panel.layout != PANEL:
        raise DataError("first differences need a panel (an 'id' role)")
    roles = panel.roles
    frame = panel.frame
    codes, uniques = pd.factorize(frame[roles.id].to_numpy())
    t = frame[roles.time].to_numpy(dtype=float)
    order = np.lexsort((t, codes))
    c = codes[order]
    r0, r1 = order[0::2], order[1::2]
    if r0.size != r1.size or np.any(c[0::2] != c[1::2]) or np.any(t[r0] != 0) or np.any(t[r1] != 1):
        raise DataError("unbalanced panel", column=roles.id)
    checks = [(roles.treatment, "treatment not time-constant")]
    checks += [(name, "covariate not time-constant") for name in roles.covariates]
    checks += [(name, "instrument not time-constant") for name in roles.instruments]
    if roles.true_treatment is not None:
        checks.append((roles.true_treatment, "true treatment not time-constant"))
    for name, message in checks:
        v = frame[name].to_numpy(dtype=float)
        bad = np.flatnonzero(v[r0] != v[r1])
        if bad.size:
            raise DataError(message, row=int(r1[bad[0]]), column=name)
    y = frame[roles.outcome].to_numpy(dtype=float)
    base = frame.iloc[r0]
    dstar = None
    if roles.true_treatment is not None:
        dstar = base[roles.true_treatment].to_numpy(dtype=float)
    return FirstDifference(
        dy=y[r1] - y[r0],
        x=_matrix(base, roles.covariates),
        d=base[roles.treatment].to_numpy(dtype=float),
        z=_matrix(base, tuple(roles.instruments) + tuple(roles.shared)),
        dstar=dstar,
        ids=uniques[c[0::2]],
        y0=y[r0],
    )


@dataclass(frozen=True)
class DemeanedDesign:
    """Covariates centred at a weighted mean, with intercept and treatment interactions.

    ``r`` is ``(1, X - centering)``; ``w`` is ``weights * r`` row by row, so the
    same object serves the observed (weights = D), true (weights = D*) and
    predicted (weights = Phi(R gamma)) conventions.
    """

    r: np.ndarray
    w: np.ndarray
    centering: np.ndarray
    weights: np.ndarray


def demean(x, weights) -> DemeanedDesign:
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[:, None]
    weights = np.asarray(weights, float)
    if weights.shape[0] != x.shape[0]:
        raise DataError("weights and covariates have different lengths")
    if np.any(weights < 0):
        raise DataError("weights must be nonnegative")
    total = weights.sum()
    if not total > 0:
        raise DataError("weights sum to zero; no (predicted) treated observations")
    centering = weights @ x / total
    r = np.column_stack([np.ones(x.shape[0]), x - centering])
    return DemeanedDesign(r=r, w=weights[:, None] * r, centering=centering, weights=weights)
