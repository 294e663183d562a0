"""Meta-analytic datasets: CSV ingestion, covariate standardization and
study-grouping structures used by every model."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
import os
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Sequence

import numpy as np

from .errors import DegenerateCovariateError, DomainError, ParseError, SchemaError

GROUPING_MODES = ("by-report", "by-study")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """Effect sizes, their sampling variances, labels and covariates.

    ``covariates`` is the raw n x p matrix (no intercept column); use
    :meth:`design` to obtain the n x (p+1) matrix with a leading column of
    ones.
    """

    y: np.ndarray
    var: np.ndarray
    study_id: tuple
    report_id: tuple
    covariates: np.ndarray
    covariate_names: tuple = ()
    source_hash: str = ""

    def __post_init__(self):
        y = _frozen(self.y).reshape(-1)
        var = _frozen(self.var).reshape(-1)
        n = y.size
        X = np.array(self.covariates, dtype=float)
        if X.size == 0:
            X = np.zeros((n, 0))
        X = X.reshape(n, -1)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "study_id", tuple(str(s) for s in self.study_id))
        object.__setattr__(self, "report_id", tuple(str(r) for r in self.report_id))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if n < 1:
            raise DomainError("dataset must contain at least one report")
        if var.size != n or len(self.study_id) != n or len(self.report_id) != n:
            raise SchemaError("y, var, study_id and report_id must have equal length")
        if len(self.covariate_names) != X.shape[1]:
            raise SchemaError("one name per covariate column is required")
        bad = np.flatnonzero(~(var > 0))
        if bad.size:
            raise DomainError(f"sampling variance must be > 0 (row {bad[0] + 1})")
        if not np.all(np.isfinite(y)):
            raise DomainError("effect sizes must be finite")
        if not np.all(np.isfinite(X)):
            raise DomainError("covariate matrix has missing or non-finite entries")
        if len(set(self.report_id)) != n:
            raise DomainError("report_id values must be unique")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def design(self) -> np.ndarray:
        """Covariates with a leading intercept column, shape (n, p+1)."""
        return np.column_stack([np.ones(self.n), self.covariates])

    def fingerprint(self) -> str:
        """Hash of the source bytes when known, else of the numeric content."""
        if self.source_hash:
            return self.source_hash
        h = hashlib.sha256()
        for a in (self.y, self.var, self.covariates):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("\x1f".join(self.study_id + self.report_id + self.covariate_names).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Schema:
    """Column mapping for :func:`load_dataset`.

    ``covariates=None`` means every column not otherwise claimed (and not in
    ``exclude``) is a covariate.
    """

    y: str = "y"
    var: str = "var"
    study: str = "study"
    report: str | None = None
    covariates: Sequence[str] | None = None
    exclude: Sequence[str] = ()
    delimiter: str = ","


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def load_dataset(source: bytes | BinaryIO | str | os.PathLike, schema: Schema | None = None) -> MetaDataset:
    """Parse delimited UTF-8 text into a validated :class:`MetaDataset`.

    Row numbers in error messages count data rows from 1.  Leading ``#``
    lines (metadata blocks written by this package) are skipped, and a
    column named ``report`` supplies report ids when ``schema.report`` is unset.
    """
    schema = schema or Schema()
    raw = _read_bytes(source)
    text = raw.decode("utf-8-sig")
    lines = text.splitlines(keepends=True)
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    text = "".join(lines[skip:])
    rows = list(csv.reader(io.StringIO(text), delimiter=schema.delimiter))
    rows = [r for r in rows if r and not (len(r) == 1 and not r[0].strip())]
    if not rows:
        raise SchemaError("no header row")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if schema.report is None and "report" in header and "report" not in (schema.y, schema.var, schema.study):
        schema = dataclasses.replace(schema, report="report")

    required = [schema.y, schema.var, schema.study]
    if schema.report:
        required.append(schema.report)
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    if schema.covariates is None:
        claimed = set(required) | set(schema.exclude)
        cov_names = [h for h in header if h not in claimed]
    else:
        cov_names = list(schema.covariates)
        absent = [c for c in cov_names if c not in header]
        if absent:
            raise SchemaError(f"missing covariate column(s): {', '.join(absent)}")
    col = {h: k for k, h in enumerate(header)}

    def number(row, name, r):
        try:
            v = float(row[col[name]])
        except (ValueError, IndexError):
            raise ParseError(f"row {r}: column {name!r} is not numeric") from None
        if math.isnan(v):
            raise ParseError(f"row {r}: column {name!r} is missing")
        return v

    ys, vs, studies, reports, X = [], [], [], [], []
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} fields, got {len(row)}")
        ys.append(number(row, schema.y, r))
        v = number(row, schema.var, r)
        if not v > 0:
            raise DomainError(f"row {r}: sampling variance must be > 0, got {v}")
        vs.append(v)
        s = row[col[schema.study]].strip()
        if not s:
            raise SchemaError(f"row {r}: empty study id")
        studies.append(s)
        reports.append(row[col[schema.report]].strip() if schema.report else str(r))
        X.append([number(row, c, r) for c in cov_names])

    return MetaDataset(
        y=ys,
        var=vs,
        study_id=studies,
        report_id=reports,
        covariates=np.array(X, dtype=float).reshape(len(ys), len(cov_names)),
        covariate_names=cov_names,
        source_hash=hashlib.sha256(raw).hexdigest(),
    )


def dataset_to_csv(d: MetaDataset, delimiter: str = ",") -> str:
    """Inverse of :func:`load_dataset` (report ids in a ``report`` column)."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["report", "study", "y", "var", *d.covariate_names])
    for i in range(d.n):
        w.writerow(
            [d.report_id[i], d.study_id[i], repr(float(d.y[i])), repr(float(d.var[i]))]
            + [repr(float(v)) for v in d.covariates[i]]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class StandardizationInfo:
    names: tuple
    mean: np.ndarray
    sd: np.ndarray

    def apply(self, X_raw) -> np.ndarray:
        return (np.asarray(X_raw, dtype=float) - self.mean) / self.sd

    def invert(self, X_std) -> np.ndarray:
        return np.asarray(X_std, dtype=float) * self.sd + self.mean

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(v) for v in self.mean],
            "sd": [float(v) for v in self.sd],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationInfo":
        return cls(tuple(d["names"]), np.array(d["mean"], float), np.array(d["sd"], float))


def standardize_covariates(d: MetaDataset) -> tuple[MetaDataset, StandardizationInfo]:
    """z-standardize every covariate column (sample sd, n-1 divisor)."""
    if d.p < 1:
        raise DomainError("no covariates to standardize")
    if d.n < 2:
        raise DegenerateCovariateError("standardization needs at least two reports")
    X = d.covariates
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    for k, name in enumerate(d.covariate_names):
        scale = max(1.0, float(np.max(np.abs(X[:, k]))))
        if not sd[k] > 1e-12 * scale:
            raise DegenerateCovariateError(f"covariate {name!r} is constant")
    info = StandardizationInfo(d.covariate_names, mean, sd)
    return replace(d, covariates=info.apply(X)), info


def group_index(d: MetaDataset, mode: str = "by-study") -> tuple[np.ndarray, tuple]:
    """Map each report to a 0-based group index.

    ``by-report`` gives every report its own group; ``by-study`` groups
    reports sharing a study id, numbering groups by first appearance.
    """
    if mode == "by-report":
        return np.arange(d.n), d.report_id
    if mode != "by-study":
        raise DomainError(f"unknown grouping mode {mode!r}")
    labels: dict[str, int] = {}
    idx = np.array([labels.setdefault(s, len(labels)) for s in d.study_id])
    return idx, tuple(labels)


@dataclass(frozen=True, eq=False)
class RelatednessMatrix:
    """Binary symmetric matrix of related report pairs.

    ``K`` is the size of the largest related group (max row sum + 1), which
    makes ``-sigma0^2/(K-1)`` the exact positive-definiteness bound for the
    dependent random-intercept covariance when groups are cliques.
    """

    M: np.ndarray
    K: int
    convention: str = field(default="group-size")


def build_relatedness(d: MetaDataset, mode: str = "by-study") -> RelatednessMatrix:
    if mode != "by-study":
        raise DomainError(f"unsupported relatedness mode {mode!r}")
    g, _ = group_index(d, "by-study")
    M = (g[:, None] == g[None, :]).astype(float)
    np.fill_diagonal(M, 0.0)
    M.setflags(write=False)
    return RelatednessMatrix(M=M, K=int(M.sum(axis=1).max()) + 1)
