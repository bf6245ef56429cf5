"""Visit-level data model and long-format CSV ingestion.

A cohort is a collection of subjects, each carrying a censoring time, a
sorted vector of visit times, per-visit observation indicators, outcome
values where observed, and named covariate series.  Covariates are either
baseline constants or right-continuous step functions, and are assigned to
submodel roles (visiting rate, observation propensity fixed/random,
outcome fixed/random) through a :class:`CovariateSpec`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

ROLES = ("visiting", "obs_fixed", "obs_random", "outcome_fixed", "outcome_random")

DEFAULT_SCHEMA = {
    "id": "id",
    "time": "time",
    "r": "r",
    "y": "y",
    "censor_time": "censor_time",
}

_NA_STRINGS = ("", "NA")


class DataError(ValueError):
    """Raised when an input file or cohort violates the data contract."""


@dataclass(frozen=True)
class CovariateSeries:
    """One scalar covariate: a baseline constant or a step function.

    ``knots is None`` marks a baseline-constant series with a single value.
    Step functions are right-continuous and carry the last value forward;
    times before the first knot evaluate to the first value.
    """

    values: np.ndarray
    knots: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        if self.knots is not None:
            knots = np.atleast_1d(np.asarray(self.knots, dtype=float))
            if knots.shape != values.shape:
                raise DataError("step series needs one value per knot")
            if np.any(np.diff(knots) <= 0):
                raise DataError("step series knots must be strictly increasing")
            object.__setattr__(self, "knots", knots)
        elif values.size != 1:
            raise DataError("baseline-constant series must have a single value")

    @property
    def is_constant(self) -> bool:
        return self.knots is None or self.values.size == 1 or np.all(self.values == self.values[0])

    def at(self, t) -> np.ndarray | float:
        """Evaluate at time(s) ``t`` (right-continuous, LOCF)."""
        if self.knots is None:
            if np.isscalar(t):
                return float(self.values[0])
            return np.full(np.shape(t), self.values[0])
        idx = np.searchsorted(self.knots, t, side="right") - 1
        idx = np.clip(idx, 0, self.values.size - 1)
        out = self.values[idx]
        return float(out) if np.isscalar(t) else out


@dataclass(frozen=True)
class CovariateSpec:
    """Column-to-role assignment for the three submodels.

    ``intercepts`` lists the roles that get a leading constant-1 column
    when evaluated.
    """

    visiting: tuple[str, ...] = ()
    obs_fixed: tuple[str, ...] = ()
    obs_random: tuple[str, ...] = ()
    outcome_fixed: tuple[str, ...] = ()
    outcome_random: tuple[str, ...] = ()
    intercepts: frozenset = frozenset({"obs_fixed", "obs_random", "outcome_random"})

    def __post_init__(self):
        object.__setattr__(self, "visiting", tuple(self.visiting))
        object.__setattr__(self, "obs_fixed", tuple(self.obs_fixed))
        object.__setattr__(self, "obs_random", tuple(self.obs_random))
        object.__setattr__(self, "outcome_fixed", tuple(self.outcome_fixed))
        object.__setattr__(self, "outcome_random", tuple(self.outcome_random))
        object.__setattr__(self, "intercepts", frozenset(self.intercepts))
        unknown = self.intercepts - set(ROLES)
        if unknown:
            raise DataError(f"intercept flag for unknown role(s): {sorted(unknown)}")

    def columns(self, role: str) -> tuple[str, ...]:
        if role not in ROLES:
            raise DataError(f"unknown covariate role {role!r}; expected one of {ROLES}")
        return getattr(self, role)

    def has_intercept(self, role: str) -> bool:
        return role in self.intercepts

    def dim(self, role: str) -> int:
        return len(self.columns(role)) + (1 if self.has_intercept(role) else 0)

    def all_columns(self) -> tuple[str, ...]:
        seen: list[str] = []
        for role in ROLES:
            for col in self.columns(role):
                if col not in seen:
                    seen.append(col)
        return tuple(seen)

    def to_dict(self) -> dict:
        out = {role: list(self.columns(role)) for role in ROLES}
        out["intercepts"] = sorted(self.intercepts)
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CovariateSpec":
        kwargs = {role: tuple(doc.get(role, ())) for role in ROLES}
        kwargs["intercepts"] = frozenset(doc.get("intercepts", ("obs_fixed", "obs_random", "outcome_random")))
        return cls(**kwargs)


@dataclass(frozen=True)
class SubjectData:
    """One subject's follow-up: censoring time, visits, indicators, outcomes.

    ``outcome`` holds NaN exactly where ``obs_indicator`` is 0.
    """

    id: str
    censoring_time: float
    visits: np.ndarray
    obs_indicator: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, CovariateSeries] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "visits", np.asarray(self.visits, dtype=float))
        object.__setattr__(self, "obs_indicator", np.asarray(self.obs_indicator, dtype=np.int8))
        object.__setattr__(self, "outcome", np.asarray(self.outcome, dtype=float))
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def m(self) -> int:
        """Number of visits."""
        return self.visits.size


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[SubjectData, ...]
    covariate_spec: CovariateSpec
    max_followup: float

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def n(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)


def covariate_at(subject: SubjectData, role: str, t, spec: CovariateSpec) -> np.ndarray:
    """Evaluate the covariate vector for ``role`` at time ``t``.

    Returns the series values in spec order, with a leading 1 when the
    role carries an intercept.
    """
    cols = spec.columns(role)
    vals = []
    if spec.has_intercept(role):
        vals.append(1.0)
    for col in cols:
        series = subject.covariates.get(col)
        if series is None:
            raise DataError(f"subject {subject.id!r} is missing covariate {col!r}")
        vals.append(series.at(t))
    return np.asarray(vals, dtype=float)


def role_values(subject: SubjectData, role: str, times: np.ndarray, spec: CovariateSpec) -> np.ndarray:
    """Vectorised :func:`covariate_at`: shape ``(len(times), dim(role))``."""
    times = np.asarray(times, dtype=float)
    cols = spec.columns(role)
    out = np.empty((times.size, spec.dim(role)))
    j = 0
    if spec.has_intercept(role):
        out[:, 0] = 1.0
        j = 1
    for col in cols:
        series = subject.covariates.get(col)
        if series is None:
            raise DataError(f"subject {subject.id!r} is missing covariate {col!r}")
        out[:, j] = series.at(times)
        j += 1
    return out


@dataclass
class ValidationReport:
    violations: list
    n_subjects: int = 0
    n_visits: int = 0
    n_observed: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        frac = self.n_observed / self.n_visits if self.n_visits else float("nan")
        lines = [
            f"subjects: {self.n_subjects}",
            f"visits: {self.n_visits}",
            f"observed: {self.n_observed} (fraction {frac:.3f})"
            if self.n_visits
            else "observed: 0",
            f"violations: {len(self.violations)}",
        ]
        lines.extend(f"  - {v}" for v in self.violations)
        return "\n".join(lines)


def validate(cohort: Cohort) -> ValidationReport:
    """Check subject-level invariants; report-only, never raises."""
    violations: list[str] = []
    seen_ids: set[str] = set()
    n_visits = 0
    n_obs = 0
    for subj in cohort.subjects:
        sid = subj.id
        if sid in seen_ids:
            violations.append(f"duplicate subject id {sid!r}")
        seen_ids.add(sid)
        if subj.censoring_time < 0:
            violations.append(f"subject {sid!r}: negative censoring time")
        if subj.censoring_time > cohort.max_followup + 1e-12:
            violations.append(f"subject {sid!r}: censoring time exceeds max follow-up")
        v = subj.visits
        n_visits += v.size
        n_obs += int(subj.obs_indicator.sum())
        if v.size:
            if np.any(np.diff(v) <= 0):
                violations.append(f"subject {sid!r}: visit times not strictly increasing")
            if v[0] <= 0:
                violations.append(f"subject {sid!r}: visit at time <= 0")
            late = np.nonzero(v > subj.censoring_time + 1e-12)[0]
            for j in late:
                violations.append(f"subject {sid!r}: visit index {j} after censoring time")
        if subj.obs_indicator.shape != v.shape or subj.outcome.shape != v.shape:
            violations.append(f"subject {sid!r}: indicator/outcome length mismatch")
            continue
        bad_r = ~np.isin(subj.obs_indicator, (0, 1))
        if np.any(bad_r):
            violations.append(f"subject {sid!r}: observation indicator outside {{0,1}}")
        present = ~np.isnan(subj.outcome)
        mism = np.nonzero(present != (subj.obs_indicator == 1))[0]
        for j in mism:
            violations.append(f"subject {sid!r}: outcome presence contradicts indicator at index {j}")
        for col in cohort.covariate_spec.all_columns():
            if col not in subj.covariates:
                violations.append(f"subject {sid!r}: missing covariate {col!r}")
        for col in cohort.covariate_spec.columns("visiting"):
            series = subj.covariates.get(col)
            if series is not None and not series.is_constant:
                violations.append(f"subject {sid!r}: visiting covariate {col!r} is not baseline-constant")
    return ValidationReport(violations, cohort.n, n_visits, n_obs)


def _parse_float(cell: str, what: str, row_no: int):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row_no}: cannot parse {what} value {cell!r}") from None


def load_long_csv(
    path,
    spec: CovariateSpec,
    schema: Mapping[str, str] | None = None,
    default_censor: float | None = None,
    max_followup: float | None = None,
) -> Cohort:
    """Read a long-format visit file into a :class:`Cohort`.

    Expected columns (renameable through ``schema``): ``id``, ``time``,
    ``r``, ``y``, optional ``censor_time``, plus every covariate column
    named in ``spec``.  ``y`` must be empty/NA exactly when ``r`` is 0.
    Lines starting with ``#`` are skipped.  A row with an empty ``time``
    cell declares a subject with no visits (censoring time and covariates
    only).  Censoring defaults to ``default_censor`` when the file has no
    censor column.
    """
    colmap = dict(DEFAULT_SCHEMA)
    if schema:
        colmap.update(schema)
    cov_cols = spec.all_columns()

    groups: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        header = reader.fieldnames
        if header is None:
            raise DataError(f"{path}: empty file (no header row)")
        for key in ("id", "time", "r", "y"):
            if colmap[key] not in header:
                raise DataError(f"{path}: missing required column {colmap[key]!r}")
        has_censor = colmap["censor_time"] in header
        for col in cov_cols:
            if col not in header:
                raise DataError(f"{path}: missing covariate column {col!r}")

        for row_no, row in enumerate(reader, start=2):
            sid = row[colmap["id"]]
            rec = groups.setdefault(
                sid, {"times": [], "r": [], "y": [], "cov": {c: [] for c in cov_cols}, "censor": None, "rows": []}
            )
            t_cell = (row[colmap["time"]] or "").strip()
            r_cell = (row[colmap["r"]] or "").strip()
            y_cell = (row[colmap["y"]] or "").strip()
            if has_censor:
                c_cell = (row[colmap["censor_time"]] or "").strip()
                if c_cell not in _NA_STRINGS:
                    c_val = _parse_float(c_cell, "censor_time", row_no)
                    if rec["censor"] is not None and rec["censor"] != c_val:
                        raise DataError(f"row {row_no}: conflicting censor_time for subject {sid!r}")
                    rec["censor"] = c_val
            if t_cell in _NA_STRINGS:
                # declaration row: subject exists but has no visit here
                if r_cell not in _NA_STRINGS or y_cell not in _NA_STRINGS:
                    raise DataError(f"row {row_no}: row without a time must leave r and y empty")
                rec["declared"] = True
            else:
                t = _parse_float(t_cell, "time", row_no)
                if r_cell not in ("0", "1"):
                    raise DataError(f"row {row_no}: observation indicator must be 0 or 1, got {r_cell!r}")
                r = int(r_cell)
                if r == 1:
                    if y_cell in _NA_STRINGS:
                        raise DataError(f"row {row_no}: outcome missing although indicator is 1")
                    y = _parse_float(y_cell, "outcome", row_no)
                else:
                    if y_cell not in _NA_STRINGS:
                        raise DataError(f"row {row_no}: outcome present although indicator is 0")
                    y = math.nan
                rec["times"].append(t)
                rec["r"].append(r)
                rec["y"].append(y)
                rec["rows"].append(row_no)
            for col in cov_cols:
                cell = (row[col] or "").strip()
                if cell in _NA_STRINGS:
                    raise DataError(f"row {row_no}: missing value for covariate {col!r}")
                rec["cov"][col].append(_parse_float(cell, col, row_no))

    subjects = []
    for sid, rec in groups.items():
        times = np.asarray(rec["times"], dtype=float)
        if rec.get("declared") and times.size:
            raise DataError(f"subject {sid!r}: declaration row mixed with visit rows")
        order = np.argsort(times, kind="stable")
        times = times[order]
        dup = np.nonzero(np.diff(times) == 0)[0]
        if dup.size:
            row_no = rec["rows"][order[dup[0] + 1]]
            raise DataError(f"row {row_no}: duplicate visit time for subject {sid!r}")
        r = np.asarray(rec["r"], dtype=np.int8)[order]
        y = np.asarray(rec["y"], dtype=float)[order]
        censor = rec["censor"]
        if censor is None:
            if default_censor is None:
                raise DataError(f"subject {sid!r}: no censor_time column and no default censoring time configured")
            censor = float(default_censor)
        covs = {}
        for col in cov_cols:
            vals = np.asarray(rec["cov"][col], dtype=float)
            if times.size == 0:
                covs[col] = CovariateSeries(values=vals[:1])
            else:
                vals = vals[order] if vals.size == times.size else vals
                if np.all(vals == vals[0]):
                    covs[col] = CovariateSeries(values=vals[:1])
                else:
                    covs[col] = CovariateSeries(values=vals, knots=times)
        subjects.append(SubjectData(sid, censor, times, r, y, covs))

    tau = max_followup
    if tau is None:
        censors = [s.censoring_time for s in subjects]
        tau = max(censors) if censors else (default_censor or 0.0)
    return Cohort(tuple(subjects), spec, float(tau))


def write_long_csv(cohort: Cohort, path, header_comment: str | None = None) -> None:
    """Write a cohort back to the long CSV format read by :func:`load_long_csv`.

    Subjects with no visits are written as a single declaration row with
    empty time/r/y cells so they survive a round trip.
    """
    cov_cols = cohort.covariate_spec.all_columns()
    fieldnames = ["id", "time", "r", "y", "censor_time", *cov_cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for subj in cohort.subjects:
            if subj.m == 0:
                row = [subj.id, "", "", "", repr(subj.censoring_time)]
                row += [repr(float(subj.covariates[c].at(0.0))) for c in cov_cols]
                writer.writerow(row)
                continue
            for j, t in enumerate(subj.visits):
                y = subj.outcome[j]
                row = [
                    subj.id,
                    repr(float(t)),
                    int(subj.obs_indicator[j]),
                    "" if math.isnan(y) else repr(float(y)),
                    repr(subj.censoring_time),
                ]
                row += [repr(float(subj.covariates[c].at(t))) for c in cov_cols]
                writer.writerow(row)
