"""Loading delimited data and building the estimation sample.

Missing values are encoded as an empty field or ``NA``. Columns are typed
by sniffing: a column whose non-missing entries all parse as floats is
numeric, anything else is categorical. Rows with a missing value in any
used column are dropped and ledgered as ``missing``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .absorb import AbsorbSpec, EncodedTerm, bind_terms
from .errors import DataError, SpecificationError

MISSING_STRINGS = ("", "NA")

ROLES = (
    "response",
    "covariate",
    "factor",
    "weight",
    "offset_var",
    "exposure_var",
    "cluster_var",
    "unused",
)


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str  # numeric | categorical
    role: str

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SpecificationError(f"unknown column kind {self.kind!r}")
        if self.role not in ROLES:
            raise SpecificationError(f"unknown column role {self.role!r}")


def validate_schema(schema: Sequence[ColumnSchema]) -> None:
    """Check the one-response / one-role-per-column invariants."""
    responses = [c.name for c in schema if c.role == "response"]
    if len(responses) != 1:
        raise SpecificationError(
            f"exactly one response column required, got {responses or 'none'}"
        )
    seen: dict[str, str] = {}
    for col in schema:
        if col.name in seen:
            raise SpecificationError(
                f"column {col.name!r} assigned two roles "
                f"({seen[col.name]} and {col.role})"
            )
        seen[col.name] = col.role


@dataclass
class RawTable:
    """A delimited file in columnar form, typed by sniffing."""

    names: list[str]
    columns: dict[str, np.ndarray]
    kinds: dict[str, str]
    n_rows: int

    def __contains__(self, name: str) -> bool:
        return name in self.columns


def _sniff_column(values: list[str]) -> tuple[np.ndarray, str]:
    parsed = np.empty(len(values), dtype=np.float64)
    numeric = True
    for i, v in enumerate(values):
        if v in MISSING_STRINGS:
            parsed[i] = np.nan
            continue
        try:
            parsed[i] = float(v)
        except ValueError:
            numeric = False
            break
    if numeric:
        return parsed, "numeric"
    labels = np.array([None if v in MISSING_STRINGS else v for v in values], dtype=object)
    return labels, "categorical"


def load_table(path, delimiter: str = ",", header: bool = True) -> RawTable:
    """Read a delimited text file into a :class:`RawTable`."""
    try:
        with open(path, newline="") as fh:
            rows = [row for row in csv.reader(fh, delimiter=delimiter)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [row for row in rows if row]  # tolerate trailing blank lines
    if not rows:
        raise DataError(f"empty table: {path}")
    if header:
        names = [name.strip() for name in rows[0]]
        data_rows = rows[1:]
    else:
        names = [f"v{i + 1}" for i in range(len(rows[0]))]
        data_rows = rows
    if not data_rows:
        raise DataError(f"no data rows in {path}")
    width = len(names)
    for i, row in enumerate(data_rows):
        if len(row) != width:
            raise DataError(
                f"ragged row {i + 1 + int(header)} in {path}: "
                f"expected {width} fields, got {len(row)}"
            )
    if len(set(names)) != len(names):
        raise DataError(f"duplicate column names in {path}")
    columns: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    for j, name in enumerate(names):
        values = [row[j].strip() for row in data_rows]
        columns[name], kinds[name] = _sniff_column(values)
    return RawTable(names, columns, kinds, len(data_rows))


@dataclass
class EstimationSample:
    """Columnar view of the rows entering estimation.

    ``row_ids`` index into the original data; ``ledger`` tags every original
    row with ``none``, ``missing``, ``singleton``, or ``separated`` so that
    drops stay auditable and counts reconcile with the original row count.
    """

    y: np.ndarray
    X: np.ndarray
    x_names: list[str]
    weights: np.ndarray
    offset: np.ndarray
    absorb: list[EncodedTerm]
    row_ids: np.ndarray
    ledger: np.ndarray
    clusters: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_full(self) -> int:
        return self.ledger.shape[0]

    def take(self, keep: np.ndarray, reason: str) -> "EstimationSample":
        """Keep the masked rows; tag the dropped ones in the ledger."""
        keep = np.asarray(keep, dtype=bool)
        ledger = self.ledger.copy()
        ledger[self.row_ids[~keep]] = reason
        if not keep.any():
            raise DataError("no observations remain")
        return EstimationSample(
            y=self.y[keep],
            X=self.X[keep],
            x_names=list(self.x_names),
            weights=self.weights[keep],
            offset=self.offset[keep],
            absorb=[t.take(keep) for t in self.absorb],
            row_ids=self.row_ids[keep],
            ledger=ledger,
            clusters={k: v[keep] for k, v in self.clusters.items()},
        )

    def with_covariates(self, X: np.ndarray, x_names: list[str]) -> "EstimationSample":
        out = EstimationSample(
            y=self.y,
            X=X,
            x_names=x_names,
            weights=self.weights,
            offset=self.offset,
            absorb=self.absorb,
            row_ids=self.row_ids,
            ledger=self.ledger,
            clusters=self.clusters,
        )
        return out

    def drop_counts(self) -> dict[str, int]:
        reasons, counts = np.unique(self.ledger, return_counts=True)
        return {str(r): int(c) for r, c in zip(reasons, counts)}


def _is_missing(col: np.ndarray) -> np.ndarray:
    if col.dtype == object:
        return np.array([v is None for v in col], dtype=bool)
    return np.isnan(col)


def make_sample(
    *,
    y: np.ndarray,
    X: np.ndarray,
    x_names: Sequence[str],
    spec: AbsorbSpec,
    factor_columns: Mapping[str, np.ndarray],
    weights: Optional[np.ndarray] = None,
    offset: Optional[np.ndarray] = None,
    exposure: Optional[np.ndarray] = None,
    cluster_columns: Optional[Mapping[str, np.ndarray]] = None,
) -> EstimationSample:
    """Assemble and validate an :class:`EstimationSample` from arrays.

    Listwise deletion runs over every used column; exposure is converted to
    a log offset. ``exposure`` and ``offset`` are mutually exclusive.
    """
    if exposure is not None and offset is not None:
        raise SpecificationError("exposure and offset are mutually exclusive")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] != n:
        raise DataError(f"X has {X.shape[0]} rows, response has {n}")
    if X.shape[1] != len(x_names):
        raise DataError("x_names does not match the number of covariate columns")
    cluster_columns = dict(cluster_columns or {})

    used: list[np.ndarray] = [y] + [X[:, j] for j in range(X.shape[1])]
    factor_cols = {k: np.asarray(v) for k, v in factor_columns.items()}
    for name, col in factor_cols.items():
        if col.shape[0] != n:
            raise DataError(f"column {name!r} has {col.shape[0]} rows, expected {n}")
        used.append(col)
    for name, col in cluster_columns.items():
        cluster_columns[name] = np.asarray(col)
        used.append(cluster_columns[name])
    for extra in (weights, offset, exposure):
        if extra is not None:
            used.append(np.asarray(extra, dtype=np.float64).reshape(-1))

    missing = np.zeros(n, dtype=bool)
    for col in used:
        if col.shape[0] != n:
            raise DataError("all columns must have the same number of rows")
        missing |= _is_missing(col)

    ledger = np.full(n, "none", dtype=object)
    ledger[missing] = "missing"
    keep = ~missing
    row_ids = np.flatnonzero(keep)
    if row_ids.size == 0:
        raise DataError("no observations remain")

    y = y[keep]
    X = X[keep]
    if y.min() < 0:
        raise DataError("negative response value")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite covariate value")

    if weights is None:
        w = np.ones(y.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)[keep]
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be positive and finite")

    if exposure is not None:
        e = np.asarray(exposure, dtype=np.float64).reshape(-1)[keep]
        if np.any(e <= 0):
            raise DataError("nonpositive exposure value")
        off = np.log(e)
    elif offset is not None:
        off = np.asarray(offset, dtype=np.float64).reshape(-1)[keep]
        if not np.all(np.isfinite(off)):
            raise DataError("non-finite offset value")
    else:
        off = np.zeros(y.shape[0])

    factor_view = {k: v[keep] for k, v in factor_cols.items()}
    absorb = bind_terms(spec, factor_view)
    for enc in absorb:
        if enc.slope is not None and not np.all(np.isfinite(enc.slope)):
            raise DataError(f"non-finite values in slope variable {enc.term.slope_var!r}")

    X = np.ascontiguousarray(X, dtype=np.float64)
    x_names = list(x_names)
    if len(spec) == 0:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
        x_names = x_names + ["_cons"]

    return EstimationSample(
        y=y,
        X=X,
        x_names=x_names,
        weights=w,
        offset=off,
        absorb=absorb,
        row_ids=row_ids,
        ledger=ledger,
        clusters={k: v[keep] for k, v in cluster_columns.items()},
    )


def build_sample(
    table: RawTable,
    *,
    response: str,
    covariates: Sequence[str],
    spec: AbsorbSpec,
    weight: Optional[str] = None,
    exposure: Optional[str] = None,
    offset: Optional[str] = None,
    cluster_vars: Sequence[str] = (),
) -> EstimationSample:
    """Build the estimation sample from a :class:`RawTable` by column role."""
    factor_names: list[str] = []
    slope_names: list[str] = []
    for term in spec.terms:
        factor_names.extend(term.factors)
        if term.slope_var is not None:
            slope_names.append(term.slope_var)

    schema: list[ColumnSchema] = []
    role_of: dict[str, str] = {}

    def assign(name: str, role: str, numeric: bool):
        if name not in table.columns:
            raise SpecificationError(f"unknown column {name!r}")
        if numeric and table.kinds[name] != "numeric":
            raise DataError(f"column {name!r} must be numeric for role {role}")
        if name in role_of:
            if role_of[name] == role:
                return
            raise SpecificationError(
                f"column {name!r} assigned two roles ({role_of[name]} and {role})"
            )
        role_of[name] = role
        schema.append(ColumnSchema(name, table.kinds[name], role))

    assign(response, "response", numeric=True)
    for name in covariates:
        assign(name, "covariate", numeric=True)
    for name in factor_names:
        assign(name, "factor", numeric=False)
    for name in slope_names:
        # a slope variable may double as a plain covariate; keep first role
        if name not in role_of:
            assign(name, "covariate", numeric=True)
        elif table.kinds[name] != "numeric":
            raise DataError(f"slope variable {name!r} must be numeric")
    if weight:
        assign(weight, "weight", numeric=True)
    if exposure:
        assign(exposure, "exposure_var", numeric=True)
    if offset:
        assign(offset, "offset_var", numeric=True)
    for name in cluster_vars:
        # clustering may reuse an absorbed factor, which is the nested-FE case
        if name not in role_of:
            assign(name, "cluster_var", numeric=False)
    validate_schema(schema)

    need = set(factor_names) | set(slope_names)
    factor_columns = {name: table.columns[name] for name in need}
    cluster_columns = {name: table.columns[name] for name in cluster_vars}

    X = (
        np.column_stack([table.columns[c] for c in covariates])
        if covariates
        else np.empty((table.n_rows, 0))
    )
    return make_sample(
        y=table.columns[response],
        X=X,
        x_names=list(covariates),
        spec=spec,
        factor_columns=factor_columns,
        weights=table.columns[weight] if weight else None,
        offset=table.columns[offset] if offset else None,
        exposure=table.columns[exposure] if exposure else None,
        cluster_columns=cluster_columns,
    )
