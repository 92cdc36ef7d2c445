"""Panel data model, ingestion, validation and study-design construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .io import parse_floats
from .errors import (
    ConfigError,
    DuplicateUnitYear,
    InvalidDesign,
    MissingColumn,
    NonNumericValue,
    PanelError,
    UnbalancedPanel,
)

AGGREGATIONS = ("mean", "value_at", "none")


@dataclass(frozen=True)
class Unit:
    unit_id: str
    display_name: str = ""
    country: str = ""
    capital_flag: bool = False


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced unit-by-year panel.

    ``outcome`` and every entry of ``covariates`` are ``(n_units, n_years)``
    arrays.  Units are kept sorted by ``unit_id``.
    """

    units: tuple[Unit, ...]
    years: tuple[int, ...]
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        units = tuple(self.units)
        years = tuple(int(y) for y in self.years)
        ids = [u.unit_id for u in units]
        if len(set(ids)) != len(ids):
            raise DuplicateUnitYear("unit_ids must be unique")
        if any(b - a != 1 for a, b in zip(years, years[1:])):
            raise UnbalancedPanel("years must be consecutive and strictly increasing")
        outcome = _frozen(self.outcome)
        shape = (len(units), len(years))
        if outcome.shape != shape:
            raise PanelError(f"outcome has shape {outcome.shape}, expected {shape}")
        if not np.all(np.isfinite(outcome)):
            raise UnbalancedPanel("outcome contains missing values")
        covs = {}
        for name, mat in self.covariates.items():
            mat = _frozen(mat)
            if mat.shape != shape:
                raise PanelError(f"covariate {name!r} has shape {mat.shape}, expected {shape}")
            covs[str(name)] = mat
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "covariates", dict(covs))
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @property
    def unit_ids(self) -> tuple[str, ...]:
        return tuple(u.unit_id for u in self.units)

    @property
    def shape(self) -> tuple[int, int]:
        return self.outcome.shape

    @cached_property
    def _index(self) -> dict[str, int]:
        return {u.unit_id: i for i, u in enumerate(self.units)}

    def unit_index(self, unit_id: str) -> int:
        return self._index[unit_id]

    def year_index(self, year: int) -> int:
        return int(year) - self.years[0]

    def unit(self, unit_id: str) -> Unit:
        return self.units[self._index[unit_id]]

    def equals(self, other: "PanelDataset") -> bool:
        return (
            self.units == other.units
            and self.years == other.years
            and np.array_equal(self.outcome, other.outcome)
            and self.covariates.keys() == other.covariates.keys()
            and all(np.array_equal(self.covariates[k], other.covariates[k]) for k in self.covariates)
            and dict(self.metadata) == dict(other.metadata)
        )

    def with_outcome(self, outcome: np.ndarray) -> "PanelDataset":
        return PanelDataset(self.units, self.years, outcome, self.covariates, self.metadata)

    def truncate(self, last_year: int) -> "PanelDataset":
        """Panel restricted to years <= ``last_year``."""
        n = self.year_index(last_year) + 1
        covs = {k: v[:, :n] for k, v in self.covariates.items()}
        return PanelDataset(self.units, self.years[:n], self.outcome[:, :n], covs, self.metadata)

    def subset(self, unit_ids: Iterable[str]) -> "PanelDataset":
        idx = sorted(self._index[u] for u in unit_ids)
        covs = {k: v[idx] for k, v in self.covariates.items()}
        return PanelDataset(
            tuple(self.units[i] for i in idx), self.years, self.outcome[idx], covs, self.metadata
        )

    def to_frame(self) -> pd.DataFrame:
        n_units, n_years = self.shape
        frame = pd.DataFrame(
            {
                "unit_id": np.repeat([u.unit_id for u in self.units], n_years),
                "name": np.repeat([u.display_name for u in self.units], n_years),
                "country": np.repeat([u.country for u in self.units], n_years),
                "year": np.tile(np.asarray(self.years, dtype=int), n_units),
                "outcome": self.outcome.ravel(),
            }
        )
        if any(u.capital_flag for u in self.units):
            frame.insert(3, "capital", np.repeat([int(u.capital_flag) for u in self.units], n_years))
        for name, mat in self.covariates.items():
            frame[name] = mat.ravel()
        return frame


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for delimited panel files."""

    unit_id: str = "unit_id"
    name: str = "name"
    country: str = "country"
    year: str = "year"
    outcome: str = "outcome"
    capital: str | None = "capital"
    covariates: tuple[str, ...] | None = None
    delimiter: str = ","


def _read_metadata(path: Path) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
    return meta


def load_panel(path, schema: PanelSchema | None = None) -> PanelDataset:
    """Read a long-format panel (one row per unit-year).

    Leading ``# key=value`` lines are read as metadata.  Row order never
    matters: units are sorted by id and years ascending.
    """
    schema = schema or PanelSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = pd.read_csv(
        path, sep=schema.delimiter, comment="#", dtype=str, keep_default_na=False, encoding="utf-8"
    )
    required = [schema.unit_id, schema.year, schema.outcome]
    missing = [c for c in required if c not in raw.columns]
    if schema.covariates:
        missing += [c for c in schema.covariates if c not in raw.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}", columns=missing)

    reserved = {schema.unit_id, schema.name, schema.country, schema.year, schema.outcome}
    if schema.capital:
        reserved.add(schema.capital)
    cov_names = list(schema.covariates) if schema.covariates is not None else [
        c for c in raw.columns if c not in reserved
    ]

    def numeric(col: str, *, allow_empty: bool = False) -> np.ndarray:
        text = raw[col].str.strip()
        vals = parse_floats(text)
        bad = np.isnan(vals) & ~(allow_empty & (text == "").to_numpy())
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonNumericValue(
                f"non-numeric value {raw[col].iloc[i]!r} in column {col!r} "
                f"(unit {raw[schema.unit_id].iloc[i]}, row {i + 1})",
                column=col,
            )
        return vals

    years_raw = numeric(schema.year)
    if np.any(years_raw != np.round(years_raw)):
        raise NonNumericValue(f"non-integer year in column {schema.year!r}")
    ids = raw[schema.unit_id].str.strip().to_numpy()
    years = years_raw.astype(int)

    keys = pd.DataFrame({"u": ids, "y": years})
    dup = keys.duplicated(keep=False)
    if dup.any():
        first = keys[dup].iloc[0]
        raise DuplicateUnitYear(f"duplicate row for unit {first.u!r}, year {first.y}")

    unit_ids = sorted(set(ids))
    all_years = list(range(int(years.min()), int(years.max()) + 1))
    uidx = {u: i for i, u in enumerate(unit_ids)}
    rows = np.array([uidx[u] for u in ids])
    cols = years - all_years[0]
    present = np.zeros((len(unit_ids), len(all_years)), dtype=bool)
    present[rows, cols] = True
    if not present.all():
        miss = [(unit_ids[i], all_years[j]) for i, j in zip(*np.nonzero(~present))]
        shown = ", ".join(f"({u}, {y})" for u, y in miss[:10])
        more = f" and {len(miss) - 10} more" if len(miss) > 10 else ""
        raise UnbalancedPanel(f"panel is unbalanced; missing unit-year cells: {shown}{more}", missing=miss)

    def grid(values: np.ndarray) -> np.ndarray:
        out = np.empty(present.shape)
        out[rows, cols] = values
        return out

    outcome = grid(numeric(schema.outcome))
    covariates = {name: grid(numeric(name)) for name in cov_names}

    def first_value(col: str | None, default):
        if col is None or col not in raw.columns:
            return {u: default for u in unit_ids}
        out = {}
        for u, v in zip(ids, raw[col].to_numpy()):
            out.setdefault(u, v)
        return out

    names = first_value(schema.name if schema.name in raw.columns else None, "")
    countries = first_value(schema.country if schema.country in raw.columns else None, "")
    capitals = first_value(schema.capital, "0")
    units = tuple(
        Unit(u, str(names[u]), str(countries[u]), str(capitals[u]).strip().lower() in ("1", "true", "yes"))
        for u in unit_ids
    )
    return PanelDataset(units, tuple(all_years), outcome, covariates, _read_metadata(path))


def write_panel(dataset: PanelDataset, path) -> None:
    """Write ``dataset`` in the long format read by :func:`load_panel`."""
    from .io import atomic_write_text

    lines = [f"# {k}={v}\n" for k, v in dataset.metadata.items()]
    body = dataset.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n")
    atomic_write_text(path, "".join(lines) + body)


# ---------------------------------------------------------------------------
# study configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Predictor:
    name: str
    aggregation: str = "mean"
    year: int | None = None

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r} for predictor {self.name!r}")
        if self.aggregation == "value_at" and self.year is None:
            raise ConfigError(f"predictor {self.name!r}: value_at needs a year")


@dataclass(frozen=True)
class StudyConfig:
    """Treatment assignment and predictor specification.

    ``predictors=None`` uses every covariate averaged over the training
    years.  ``outcome_lag_years=None`` uses three evenly spaced pre-period
    years plus the last pre-treatment year.  ``training_end=None`` splits the
    pre-period at its midpoint.
    """

    treated_ids: frozenset[str]
    t0: int
    training_end: int | None = None
    predictors: tuple[Predictor, ...] | None = None
    outcome_lag_years: tuple[int, ...] | None = None
    donor_filter: frozenset[str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "treated_ids", frozenset(self.treated_ids))
        if self.donor_filter is not None:
            object.__setattr__(self, "donor_filter", frozenset(self.donor_filter))
        if self.predictors is not None:
            object.__setattr__(
                self,
                "predictors",
                tuple(p if isinstance(p, Predictor) else Predictor(**p) for p in self.predictors),
            )
        if self.outcome_lag_years is not None:
            object.__setattr__(self, "outcome_lag_years", tuple(int(y) for y in self.outcome_lag_years))

    _KEYS = ("treated_ids", "t0", "training_end", "predictors", "outcome_lag_years", "donor_filter")

    @classmethod
    def from_dict(cls, data: Mapping, *, extra_keys: Sequence[str] = ()) -> "StudyConfig":
        unknown = set(data) - set(cls._KEYS) - set(extra_keys)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        for key in ("treated_ids", "t0"):
            if key not in data:
                raise ConfigError(f"missing configuration key {key!r}")
        preds = data.get("predictors")
        if preds is not None:
            for p in preds:
                bad = set(p) - {"name", "aggregation", "year"}
                if bad:
                    raise ConfigError(f"unknown predictor key(s): {', '.join(sorted(bad))}")
            preds = tuple(Predictor(**p) for p in preds)
        lags = data.get("outcome_lag_years")
        filt = data.get("donor_filter")
        return cls(
            treated_ids=frozenset(str(t) for t in data["treated_ids"]),
            t0=int(data["t0"]),
            training_end=None if data.get("training_end") is None else int(data["training_end"]),
            predictors=preds,
            outcome_lag_years=None if lags is None else tuple(int(y) for y in lags),
            donor_filter=None if filt is None else frozenset(str(f) for f in filt),
        )

    def to_dict(self) -> dict:
        out = {"treated_ids": sorted(self.treated_ids), "t0": self.t0}
        if self.training_end is not None:
            out["training_end"] = self.training_end
        if self.predictors is not None:
            out["predictors"] = [
                {k: v for k, v in vars(p).items() if v is not None} for p in self.predictors
            ]
        if self.outcome_lag_years is not None:
            out["outcome_lag_years"] = list(self.outcome_lag_years)
        if self.donor_filter is not None:
            out["donor_filter"] = sorted(self.donor_filter)
        return out


def load_config(path, *, extra_keys: Sequence[str] = ()) -> tuple[StudyConfig, dict]:
    """Parse a JSON study configuration; returns the config and the raw mapping."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    return StudyConfig.from_dict(data, extra_keys=extra_keys), data


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Issue:
    severity: str
    code: str
    message: str
    unit: str | None = None
    year: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...] = ()

    @property
    def ok(self) -> bool:
        return not any(i.severity == "error" for i in self.issues)

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "warning"]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "issues": [vars(i) for i in self.issues]}


def default_training_end(pre_years: Sequence[int]) -> int:
    return int(math.floor((pre_years[0] + pre_years[-1]) / 2))


def default_lag_positions(n: int) -> list[int]:
    """Indices of three evenly spaced years plus the last year of an ``n``-year window."""
    return sorted(set(int(round(x)) for x in np.linspace(0, n - 1, 4)))


def _donor_candidates(dataset: PanelDataset, config: StudyConfig) -> list[str]:
    out = []
    for u in dataset.units:
        if u.unit_id in config.treated_ids:
            continue
        if config.donor_filter is not None and not (
            u.unit_id in config.donor_filter or u.country in config.donor_filter
        ):
            continue
        out.append(u.unit_id)
    return out


def validate_design(dataset: PanelDataset, config: StudyConfig) -> ValidationReport:
    issues: list[Issue] = []

    def err(code, msg, unit=None, year=None):
        issues.append(Issue("error", code, msg, unit, year))

    ids = set(dataset.unit_ids)
    years = dataset.years
    if not config.treated_ids:
        err("NoTreatedUnits", "treated_ids is empty")
    for t in sorted(config.treated_ids):
        if t not in ids:
            err("TreatedUnitMissing", f"treated unit {t!r} not in panel", unit=t)
    if not years[0] < config.t0 <= years[-1]:
        err("T0OutOfRange", f"t0={config.t0} outside ({years[0]}, {years[-1]}]", year=config.t0)
    else:
        pre = [y for y in years if y < config.t0]
        te = config.training_end if config.training_end is not None else default_training_end(pre)
        if not years[0] < te < config.t0:
            err("TrainingEndOutOfRange", f"training_end={te} outside ({years[0]}, {config.t0})", year=te)
        elif te >= config.t0 - 1:
            err("EmptyValidationWindow", f"training_end={te} leaves no validation years before t0", year=te)
        for y in config.outcome_lag_years or ():
            if not years[0] <= y < config.t0:
                err("LagYearOutOfRange", f"outcome lag year {y} is not a pre-period year", year=y)
    if config.donor_filter is not None:
        for t in sorted(config.treated_ids & config.donor_filter):
            err("DonorTreatedOverlap", f"treated unit {t!r} listed in donor_filter", unit=t)
    donors = _donor_candidates(dataset, config)
    if len(donors) < 2:
        err("DonorPoolTooSmall", f"donor pool has {len(donors)} unit(s); at least 2 required")

    for p in config.predictors or ():
        if p.name not in dataset.covariates:
            err("UnknownCovariate", f"predictor {p.name!r} is not a panel covariate")
        elif p.aggregation == "value_at" and not years[0] <= p.year < config.t0:
            err("PredictorYearOutOfRange", f"predictor {p.name!r} year {p.year} not in pre-period", year=p.year)

    for name, mat in dataset.covariates.items():
        scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
        if not np.all(np.isfinite(mat)):
            issues.append(Issue("warning", "MissingCovariate", f"covariate {name!r} has missing values"))
        elif float(np.ptp(mat)) <= 1e-12 * scale:
            issues.append(Issue("warning", "NearConstantCovariate", f"covariate {name!r} is near-constant"))
    return ValidationReport(tuple(issues))


# ---------------------------------------------------------------------------
# study design
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class StudyDesign:
    dataset: PanelDataset
    config: StudyConfig
    donor_ids: tuple[str, ...]
    pre_years: tuple[int, ...]
    post_years: tuple[int, ...]
    training_years: tuple[int, ...]
    validation_years: tuple[int, ...]

    @property
    def treated_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.config.treated_ids))

    @property
    def t0(self) -> int:
        return self.config.t0

    @cached_property
    def predictor_table(self):
        from .scm import PredictorTable

        return PredictorTable.build(self)

    def with_config(self, **changes) -> "StudyDesign":
        from dataclasses import replace

        return build_study(self.dataset, replace(self.config, **changes))


def build_study(dataset: PanelDataset, config: StudyConfig) -> StudyDesign:
    report = validate_design(dataset, config)
    if not report.ok:
        msg = "; ".join(f"{i.code}: {i.message}" for i in report.errors)
        raise InvalidDesign(msg, report=report)
    years = dataset.years
    pre = tuple(y for y in years if y < config.t0)
    post = tuple(y for y in years if y >= config.t0)
    te = config.training_end if config.training_end is not None else default_training_end(pre)
    training = tuple(y for y in pre if y <= te)
    validation = tuple(y for y in pre if y > te)
    donors = tuple(sorted(_donor_candidates(dataset, config)))
    return StudyDesign(dataset, config, donors, pre, post, training, validation)
