"""Cohort data container, delimited-text ingestion and validation.

One row per subject.  Phase-two covariates may be missing for subjects
outside the phase-two sample; missingness is represented by an absent
vector on the record, never by NaN sentinels in user-facing objects.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, MissingColumn, ParseError

__all__ = ["CohortRecord", "CohortDataset", "CohortSchema", "load_cohort",
           "write_cohort", "at_risk"]


@dataclass(frozen=True)
class CohortRecord:
    """A single subject: follow-up interval, event status and covariates.

    ``entry_time`` is 0 on the time-on-study scale; on the age scale it is
    the (left-truncation) entry age.  ``x_phase2`` is ``None`` when the
    subject's phase-two covariates were not measured.
    """

    id: str
    entry_time: float
    exit_time: float
    status: int
    stratum: int
    x_phase1: tuple[float, ...] = ()
    x_phase2: tuple[float, ...] | None = None
    proxies: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.exit_time > self.entry_time:
            raise InvariantViolation(f"subject {self.id}", "exit <= entry")
        if self.entry_time < 0:
            raise InvariantViolation(f"subject {self.id}", "entry < 0")
        if self.status not in (0, 1):
            raise InvariantViolation(f"subject {self.id}", "status not in {0,1}")
        if self.stratum < 1:
            raise InvariantViolation(f"subject {self.id}", "stratum < 1")


def at_risk(record: CohortRecord, t: float) -> int:
    """At-risk indicator I(exit_time >= t > entry_time)."""
    if t < 0:
        raise InvariantViolation("at_risk", "t < 0")
    return int(record.exit_time >= t > record.entry_time)


class CohortDataset:
    """Immutable in-memory cohort (the phase-one sample).

    Backed by numpy arrays for efficiency; ``records`` materialises
    per-subject views on demand.  Covariate columns are the phase-one
    covariates followed by the phase-two covariates, in declared order.
    Missing phase-two cells are NaN internally and exposed as absent
    vectors on the records.
    """

    def __init__(self, ids, entry, exit_time, status, stratum, x, proxies=None,
                 covariate_names=None, n_phase1_cov=None, proxy_names=None,
                 tau=None):
        self.ids = list(ids)
        self.entry = np.asarray(entry, dtype=float)
        self.exit = np.asarray(exit_time, dtype=float)
        self.status = np.asarray(status, dtype=np.int8)
        self.stratum = np.asarray(stratum, dtype=np.int64)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.proxies = None if proxies is None else np.asarray(proxies, dtype=float)
        self.covariate_names = list(covariate_names) if covariate_names else [
            f"x{k + 1}" for k in range(self.x.shape[1])]
        self.n_phase1_cov = self.x.shape[1] if n_phase1_cov is None else int(n_phase1_cov)
        self.proxy_names = list(proxy_names) if proxy_names else (
            [] if self.proxies is None else
            [f"proxy{k + 1}" for k in range(self.proxies.shape[1])])
        self.tau = float(np.max(self.exit)) if tau is None else float(tau)
        self._validate()
        self._sort_cache = None
        for arr in (self.entry, self.exit, self.status, self.stratum, self.x):
            arr.setflags(write=False)
        if self.proxies is not None:
            self.proxies.setflags(write=False)

    # -- invariants --------------------------------------------------------

    def _validate(self):
        n = len(self.ids)
        for name, arr in (("entry", self.entry), ("exit", self.exit),
                          ("status", self.status), ("stratum", self.stratum)):
            if arr.shape[0] != n:
                raise InvariantViolation("dataset", f"{name} length != record count")
        if self.x.shape[0] != n:
            raise InvariantViolation("dataset", "covariate rows != record count")
        bad = np.nonzero(~(self.exit > self.entry))[0]
        if bad.size:
            raise InvariantViolation(f"subject {self.ids[bad[0]]}", "exit <= entry")
        if np.any(self.entry < 0):
            raise InvariantViolation("dataset", "negative entry time")
        if not np.all(np.isin(self.status, (0, 1))):
            raise InvariantViolation("dataset", "status not in {0,1}")
        j_max = int(self.stratum.max()) if n else 0
        if np.any(self.stratum < 1):
            raise InvariantViolation("dataset", "stratum index < 1")
        counts = np.bincount(self.stratum, minlength=j_max + 1)[1:]
        if np.any(counts == 0):
            empty = int(np.nonzero(counts == 0)[0][0]) + 1
            raise InvariantViolation("dataset", f"stratum {empty} is empty")
        self.n_per_stratum = counts
        event_times = self.exit[self.status == 1]
        if event_times.size and event_times.max() > self.tau + 1e-12:
            raise InvariantViolation("dataset", "event time beyond tau")
        # NaN only allowed in phase-two covariate columns
        if self.n_phase1_cov and np.isnan(self.x[:, :self.n_phase1_cov]).any():
            raise InvariantViolation("dataset", "missing phase-one covariate")

    # -- accessors ----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_strata(self) -> int:
        return len(self.n_per_stratum)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def phase2_measured(self) -> np.ndarray:
        """Boolean mask: subject has complete phase-two covariates."""
        if self.x.shape[1] == self.n_phase1_cov:
            return np.ones(self.n, dtype=bool)
        return ~np.isnan(self.x[:, self.n_phase1_cov:]).any(axis=1)

    def record(self, i: int) -> CohortRecord:
        x1 = tuple(self.x[i, :self.n_phase1_cov])
        x2_arr = self.x[i, self.n_phase1_cov:]
        x2 = None if (x2_arr.size and np.isnan(x2_arr).any()) else (
            tuple(x2_arr) if x2_arr.size else ())
        prox = None if self.proxies is None else tuple(self.proxies[i])
        return CohortRecord(self.ids[i], float(self.entry[i]), float(self.exit[i]),
                            int(self.status[i]), int(self.stratum[i]),
                            x1, x2, prox)

    @property
    def records(self) -> list[CohortRecord]:
        return [self.record(i) for i in range(self.n)]

    def warn_if_interval_uncovered(self, tau1: float, tau2: float):
        """Warn when no subject is ever at risk inside (tau1, tau2]."""
        covered = (self.exit > tau1) & (self.entry < tau2)
        if not covered.any():
            warnings.warn(
                f"no subject at risk anywhere in ({tau1}, {tau2}]", stacklevel=2)


@dataclass
class CohortSchema:
    """Column-name map for delimited-text cohort files."""

    id: str = "id"
    entry: str | None = "entry"
    exit: str = "exit"
    status: str = "status"
    stratum: str | None = "stratum"
    covariates: list[str] = field(default_factory=list)
    phase2_covariates: list[str] = field(default_factory=list)
    proxies: list[str] = field(default_factory=list)
    phase2: str | None = None
    phase3: str | None = None
    stratum3: str | None = None
    phase3_prob: str | None = None


def _parse_float(row_no, column, cell):
    try:
        return float(cell)
    except ValueError:
        raise ParseError(row_no, column, f"cannot parse {cell!r} as a number") from None


def load_cohort(path, schema: CohortSchema, tau=None) -> CohortDataset:
    """Read a comma-separated cohort file into a validated CohortDataset.

    Row order is preserved.  An empty cell in a phase-two covariate column
    marks the value as missing; empty cells elsewhere are errors.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [schema.id, schema.exit, schema.status]
        required += [c for c in (schema.entry, schema.stratum) if c]
        required += schema.covariates + schema.phase2_covariates + schema.proxies
        required += [c for c in (schema.phase2, schema.phase3, schema.stratum3,
                                 schema.phase3_prob) if c]
        for col in required:
            if col not in header:
                raise MissingColumn(col)

        ids, entry, exit_t, status, stratum = [], [], [], [], []
        xs, proxies, extras = [], [], {k: [] for k in
                                       ("phase2", "phase3", "stratum3", "phase3_prob")}
        for row_no, row in enumerate(reader, start=1):
            ids.append(row[schema.id])
            entry.append(_parse_float(row_no, schema.entry, row[schema.entry])
                         if schema.entry else 0.0)
            exit_t.append(_parse_float(row_no, schema.exit, row[schema.exit]))
            status.append(int(_parse_float(row_no, schema.status, row[schema.status])))
            stratum.append(int(_parse_float(row_no, schema.stratum, row[schema.stratum]))
                           if schema.stratum else 1)
            xrow = [_parse_float(row_no, c, row[c]) for c in schema.covariates]
            for c in schema.phase2_covariates:
                cell = row[c].strip()
                xrow.append(np.nan if cell == "" else _parse_float(row_no, c, cell))
            xs.append(xrow)
            if schema.proxies:
                proxies.append([_parse_float(row_no, c, row[c]) for c in schema.proxies])
            for key, col in (("phase2", schema.phase2), ("phase3", schema.phase3),
                             ("stratum3", schema.stratum3),
                             ("phase3_prob", schema.phase3_prob)):
                if col:
                    extras[key].append(_parse_float(row_no, col, row[col]))

    if not ids:
        raise InvariantViolation("file", "no data rows")
    n_cov = len(schema.covariates) + len(schema.phase2_covariates)
    x = np.asarray(xs, dtype=float) if n_cov else np.empty((len(ids), 0))
    row_bad = np.nonzero(~(np.asarray(exit_t) > np.asarray(entry)))[0]
    if row_bad.size:
        raise InvariantViolation(f"row {row_bad[0] + 1}", "exit <= entry")
    ds = CohortDataset(
        ids, entry, exit_t, status, stratum, x,
        proxies=np.asarray(proxies) if proxies else None,
        covariate_names=schema.covariates + schema.phase2_covariates,
        n_phase1_cov=len(schema.covariates),
        proxy_names=schema.proxies, tau=tau)
    ds.design_columns = {k: np.asarray(v) for k, v in extras.items() if v}
    return ds


def write_cohort(dataset: CohortDataset, path, schema: CohortSchema | None = None):
    """Write a dataset back to delimited text (inverse of load_cohort)."""
    schema = schema or CohortSchema(
        covariates=dataset.covariate_names[:dataset.n_phase1_cov],
        phase2_covariates=dataset.covariate_names[dataset.n_phase1_cov:],
        proxies=dataset.proxy_names)
    cols = [schema.id, schema.entry, schema.exit, schema.status, schema.stratum]
    cols += schema.covariates + schema.phase2_covariates + schema.proxies
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(dataset.n):
            row = [dataset.ids[i], repr(float(dataset.entry[i])),
                   repr(float(dataset.exit[i])), int(dataset.status[i]),
                   int(dataset.stratum[i])]
            for v in dataset.x[i]:
                row.append("" if np.isnan(v) else repr(float(v)))
            if dataset.proxies is not None:
                row.extend(repr(float(v)) for v in dataset.proxies[i])
            writer.writerow(row)
