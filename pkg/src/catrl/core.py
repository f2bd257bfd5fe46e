"""Trajectory data model, history construction, validation, CSV ingestion.

A subject's record is a fixed number of stages K. Stage k carries covariates
X_k, a treatment index A_k, an observed duration R_k, an event indicator
delta_k and an entry indicator eta_k. Subjects censored before stage k have
eta_k = 0 and the stage's treatment/duration/event fields are absent.

The on-disk format is a wide CSV with one row per subject and column order
``X{k}_<name> ..., A{k}, R{k}, delta{k}, eta{k}`` per stage block, followed
by the total observed time ``T``. Absent values are empty cells, never 0.
Lines starting with ``#`` are metadata comments and are skipped on load.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

TOTAL_TIME_ATOL = 1e-9


class SchemaError(ValueError):
    """Schema specification or CSV layout does not match expectations."""


class DataError(ValueError):
    """A record violates the trajectory invariants."""


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered, unique covariate names for one stage (all real-valued)."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) == 0:
            raise SchemaError("covariate schema must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("covariate names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class SchemaSpec:
    """Per-stage covariate schemas plus per-stage treatment arity."""

    schemas: tuple[CovariateSchema, ...]
    arities: tuple[int, ...]

    def __post_init__(self):
        if len(self.schemas) != len(self.arities):
            raise SchemaError("one arity per stage required")
        if any(m < 2 for m in self.arities):
            raise SchemaError("treatment arity must be >= 2 at every stage")

    @property
    def n_stages(self) -> int:
        return len(self.schemas)

    @classmethod
    def from_dict(cls, doc: dict) -> "SchemaSpec":
        try:
            stages = doc["stages"]
            arities = doc["arity"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema spec: missing {exc}") from exc
        schemas = tuple(CovariateSchema(tuple(s["covariates"])) for s in stages)
        return cls(schemas=schemas, arities=tuple(int(m) for m in arities))

    def to_dict(self) -> dict:
        return {
            "stages": [{"covariates": list(s.names)} for s in self.schemas],
            "arity": list(self.arities),
        }


@dataclass
class StageRecord:
    """One stage of one subject. Fields are None when the stage was not entered."""

    covariates: np.ndarray
    treatment: int | None
    observed_duration: float | None
    event_indicator: int | None
    entry_indicator: int


@dataclass
class Trajectory:
    stages: list[StageRecord]
    total_observed_time: float


class Dataset:
    """Immutable column-oriented container of N subject trajectories.

    Internally arrays; ``trajectory(i)`` materialises the record view.
    Absent values are encoded as A=-1, R=NaN, delta=-1 (and eta=0).
    """

    def __init__(self, spec: SchemaSpec, covariates, treatments, durations,
                 events, entries, total_time):
        self.spec = spec
        self.K = spec.n_stages
        self.M = list(spec.arities)
        self.covariates = [np.asarray(x, dtype=float) for x in covariates]
        self.treatments = [np.asarray(a, dtype=np.int64) for a in treatments]
        self.durations = [np.asarray(r, dtype=float) for r in durations]
        self.events = [np.asarray(d, dtype=np.int64) for d in events]
        self.entries = [np.asarray(e, dtype=np.int64) for e in entries]
        self.total_time = np.asarray(total_time, dtype=float)
        self.n = self.total_time.shape[0]
        for k in range(self.K):
            if self.covariates[k].shape != (self.n, spec.schemas[k].size):
                raise SchemaError(f"stage {k + 1} covariate block has wrong shape")
        for arrs in (self.treatments, self.durations, self.events, self.entries):
            for k, arr in enumerate(arrs):
                if arr.shape != (self.n,):
                    raise SchemaError(f"stage {k + 1} column has wrong length")

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.n)]

    def trajectory(self, i: int) -> Trajectory:
        stages = []
        for k in range(self.K):
            entered = int(self.entries[k][i])
            stages.append(StageRecord(
                covariates=self.covariates[k][i].copy(),
                treatment=int(self.treatments[k][i]) if entered else None,
                observed_duration=float(self.durations[k][i]) if entered else None,
                event_indicator=int(self.events[k][i]) if entered else None,
                entry_indicator=entered,
            ))
        return Trajectory(stages=stages, total_observed_time=float(self.total_time[i]))

    # ---- history construction ------------------------------------------

    def history_names(self, k: int) -> list[str]:
        """Feature names of the flattened stage-k history, k in 1..K."""
        names: list[str] = []
        for j in range(1, k):
            names.extend(f"X{j}_{c}" for c in self.spec.schemas[j - 1].names)
            names.extend([f"A{j}", f"R{j}"])
        names.extend(f"X{k}_{c}" for c in self.spec.schemas[k - 1].names)
        return names

    def history_matrix(self, k: int, ids=None) -> np.ndarray:
        """Rows of flattened histories h_k for the given subject ids.

        All requested subjects must have entered stage k; prior-stage
        treatments and durations are guaranteed present for them.
        """
        if ids is None:
            ids = np.arange(self.n)
        ids = np.asarray(ids)
        if not np.all(self.entries[k - 1][ids] == 1):
            raise DataError(f"history requested for subjects not entering stage {k}")
        blocks = []
        for j in range(1, k):
            blocks.append(self.covariates[j - 1][ids])
            blocks.append(self.treatments[j - 1][ids, None].astype(float))
            blocks.append(self.durations[j - 1][ids, None])
        blocks.append(self.covariates[k - 1][ids])
        return np.hstack(blocks)

    def stage_entrant_ids(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.entries[k - 1] == 1)

    def subset(self, ids) -> "Dataset":
        """New Dataset restricted to the given subject ids (copying slices)."""
        ids = np.asarray(ids)
        return Dataset(
            self.spec,
            covariates=[x[ids] for x in self.covariates],
            treatments=[a[ids] for a in self.treatments],
            durations=[r[ids] for r in self.durations],
            events=[d[ids] for d in self.events],
            entries=[e[ids] for e in self.entries],
            total_time=self.total_time[ids],
        )


def build_history(traj: Trajectory, k: int) -> np.ndarray:
    """Flatten [X_1, A_1, R_1, ..., X_{k-1}, A_{k-1}, R_{k-1}, X_k].

    The identity concatenation: no aggregation or transformation is applied.
    Raises DataError when the subject never entered stage k.
    """
    if k < 1 or k > len(traj.stages):
        raise DataError(f"stage index {k} out of range")
    if traj.stages[k - 1].entry_indicator != 1:
        raise DataError(f"stage {k} not entered for this trajectory")
    parts: list[float] = []
    for j in range(k - 1):
        rec = traj.stages[j]
        parts.extend(float(v) for v in rec.covariates)
        parts.append(float(rec.treatment))
        parts.append(float(rec.observed_duration))
    parts.extend(float(v) for v in traj.stages[k - 1].covariates)
    return np.asarray(parts, dtype=float)


def validate(dataset: Dataset) -> list[str]:
    """Check every trajectory invariant; return human-readable violations."""
    out: list[str] = []
    n, K = dataset.n, dataset.K
    eta = np.stack(dataset.entries, axis=1)       # (n, K)
    delta = np.stack(dataset.events, axis=1)
    dur = np.stack(dataset.durations, axis=1)
    trt = np.stack(dataset.treatments, axis=1)

    bad = np.flatnonzero(eta[:, 0] != 1)
    out.extend(f"subject {i}: eta_1 != 1" for i in bad)
    for k in range(K - 1):
        bad = np.flatnonzero((eta[:, k] == 0) & (eta[:, k + 1] == 1))
        out.extend(f"subject {i}: eta non-monotone at stage {k + 2}" for i in bad)
        bad = np.flatnonzero((eta[:, k] == 1) & (delta[:, k] == 0) & (eta[:, k + 1] == 1))
        out.extend(f"subject {i}: eta after censoring at stage {k + 2}" for i in bad)
    for k in range(K):
        ent = eta[:, k] == 1
        bad = np.flatnonzero(ent & ~(dur[:, k] >= 0))
        out.extend(f"subject {i}: negative duration at stage {k + 1}" for i in bad)
        bad = np.flatnonzero(ent & ((trt[:, k] < 0) | (trt[:, k] >= dataset.M[k])))
        out.extend(f"subject {i}: treatment out of range at stage {k + 1}" for i in bad)
        bad = np.flatnonzero(ent & ~np.isin(delta[:, k], (0, 1)))
        out.extend(f"subject {i}: non-binary event indicator at stage {k + 1}" for i in bad)
        absent = eta[:, k] == 0
        bad = np.flatnonzero(absent & ((trt[:, k] != -1) | ~np.isnan(dur[:, k])))
        out.extend(f"subject {i}: values present for unentered stage {k + 1}" for i in bad)

    contrib = np.where(eta == 1, np.where(np.isnan(dur), 0.0, dur), 0.0)
    total = contrib.sum(axis=1)
    bad = np.flatnonzero(np.abs(total - dataset.total_time) > TOTAL_TIME_ATOL)
    out.extend(f"subject {i}: total time mismatch" for i in bad)
    return out


# ---- CSV input/output ---------------------------------------------------


def csv_columns(spec: SchemaSpec) -> list[str]:
    cols: list[str] = []
    for k in range(1, spec.n_stages + 1):
        cols.extend(f"X{k}_{c}" for c in spec.schemas[k - 1].names)
        cols.extend([f"A{k}", f"R{k}", f"delta{k}", f"eta{k}"])
    cols.append("T")
    return cols


def _parse_cell(value: str, column: str, row_idx: int) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise DataError(f"row {row_idx}: bad value {value!r} in column {column}") from exc


def load_csv(path, schema_spec: SchemaSpec | dict) -> Dataset:
    """Read a wide-format CSV into a validated Dataset.

    Missing stage fields are accepted only for unentered stages (eta=0).
    Raises DataError with a row-level message on the first hard violation.
    """
    spec = schema_spec if isinstance(schema_spec, SchemaSpec) else SchemaSpec.from_dict(schema_spec)
    expected = csv_columns(spec)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header != expected:
        raise SchemaError(f"{path}: columns do not match declared schema; "
                          f"expected {expected}, found {header}")

    n, K = len(body), spec.n_stages
    covs = [np.empty((n, s.size)) for s in spec.schemas]
    trts = [np.full(n, -1, dtype=np.int64) for _ in range(K)]
    durs = [np.full(n, np.nan) for _ in range(K)]
    evts = [np.full(n, -1, dtype=np.int64) for _ in range(K)]
    ents = [np.zeros(n, dtype=np.int64) for _ in range(K)]
    total = np.empty(n)

    for i, row in enumerate(body):
        if len(row) != len(expected):
            raise DataError(f"row {i}: expected {len(expected)} cells, found {len(row)}")
        pos = 0
        for k in range(K):
            p = spec.schemas[k].size
            for j in range(p):
                covs[k][i, j] = _parse_cell(row[pos + j], expected[pos + j], i)
            a_raw, r_raw, d_raw, e_raw = row[pos + p:pos + p + 4]
            pos += p + 4
            if e_raw == "":
                raise DataError(f"row {i}: eta{k + 1} must be present")
            e = _parse_cell(e_raw, f"eta{k + 1}", i)
            if e not in (0.0, 1.0):
                raise DataError(f"row {i}: non-binary indicator eta{k + 1}")
            ents[k][i] = int(e)
            if ents[k][i] == 0:
                if a_raw != "" or r_raw != "" or d_raw != "":
                    raise DataError(f"row {i}: stage {k + 1} fields present but eta=0")
                continue
            if a_raw == "" or r_raw == "" or d_raw == "":
                raise DataError(f"row {i}: stage {k + 1} fields missing with eta=1")
            a = _parse_cell(a_raw, f"A{k + 1}", i)
            if a != int(a) or not 0 <= a < spec.arities[k]:
                raise DataError(f"row {i}: treatment A{k + 1}={a_raw} out of range")
            r = _parse_cell(r_raw, f"R{k + 1}", i)
            if r < 0:
                raise DataError(f"row {i}: negative duration R{k + 1}")
            d = _parse_cell(d_raw, f"delta{k + 1}", i)
            if d not in (0.0, 1.0):
                raise DataError(f"row {i}: non-binary indicator delta{k + 1}")
            trts[k][i], durs[k][i], evts[k][i] = int(a), r, int(d)
        total[i] = _parse_cell(row[pos], "T", i)
        if ents[0][i] != 1:
            raise DataError(f"row {i}: eta_1 != 1")

    ds = Dataset(spec, covs, trts, durs, evts, ents, total)
    problems = validate(ds)
    if problems:
        raise DataError(f"{path}: {problems[0]}" + (
            f" (+{len(problems) - 1} more)" if len(problems) > 1 else ""))
    return ds


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def save_csv(dataset: Dataset, path, meta_lines: list[str] | None = None) -> None:
    """Write the wide CSV; deterministic byte output for a given dataset."""
    cols = csv_columns(dataset.spec)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in meta_lines or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(dataset.n):
            row: list[str] = []
            for k in range(dataset.K):
                row.extend(_fmt(v) for v in dataset.covariates[k][i])
                if dataset.entries[k][i] == 1:
                    row.extend([
                        _fmt(dataset.treatments[k][i]),
                        _fmt(dataset.durations[k][i]),
                        _fmt(dataset.events[k][i]),
                        "1",
                    ])
                else:
                    row.extend(["", "", "", "0"])
            row.append(_fmt(dataset.total_time[i]))
            writer.writerow(row)
