"""Mechanism regressions and weight diagnostics.

Per-unit post-period losses are regressed on regional characteristics with
republic fixed effects and republic-clustered standard errors; donor
weights are checked against Benford's first-digit law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .io import parse_floats
from .errors import (
    Collinear,
    MissingColumn,
    NonNumericValue,
    SharesNotNormalized,
    TooFewClusters,
    TooFewWeights,
)

SHARE_PREFIX = "share_"


# ---------------------------------------------------------------------------
# ethnic composition
# ---------------------------------------------------------------------------
def ethnic_indices(shares: Sequence[float], tol: float = 1e-6) -> tuple[float, float, float]:
    """``(fractionalization, HHI, polarization)`` of a group-share vector.

    Fractionalization is ``1 - sum s^2``, concentration is ``sum s^2`` and
    polarization is ``4 sum s^2 (1 - s)``, which peaks at 1 for two equal
    groups.  Fractionalization is computed as ``1 - HHI`` so the two sum to
    one exactly.
    """
    s = np.asarray(shares, dtype=float)
    if s.size == 0 or np.any(s < 0) or not np.all(np.isfinite(s)) or abs(s.sum() - 1.0) > tol:
        raise SharesNotNormalized(f"group shares must be non-negative and sum to 1 (sum={s.sum():.12g})")
    s2 = s * s
    hhi = float(s2.sum())
    return 1.0 - hhi, hhi, float(4.0 * np.sum(s2 * (1.0 - s)))


@dataclass(frozen=True)
class RegionFeatures:
    unit_id: str
    republic_id: str
    group_shares: tuple[float, ...] = ()
    ln_popdensity_pre: float = math.nan
    ln_popdensity_post: float = math.nan
    ln_popsize_pre: float = math.nan
    ln_popsize_post: float = math.nan
    latitude: float = math.nan
    inv_dist_coast: float = math.nan
    years_habsburg: float = math.nan
    years_ottoman: float = math.nan
    fraction_largest_minority: float = math.nan

    def __post_init__(self):
        object.__setattr__(self, "group_shares", tuple(float(x) for x in self.group_shares))
        if self.group_shares and abs(sum(self.group_shares) - 1.0) > 1e-9:
            raise SharesNotNormalized(f"{self.unit_id}: group shares sum to {sum(self.group_shares):.12g}")
        for name in ("years_habsburg", "years_ottoman"):
            v = getattr(self, name)
            if not math.isnan(v) and v < 0:
                raise ValueError(f"{self.unit_id}: {name} must be >= 0")

    def regressors(self) -> dict[str, float]:
        if self.group_shares:
            frac, hhi, pol = ethnic_indices(self.group_shares)
        else:
            frac = hhi = pol = math.nan
        return {
            "d_ln_popdensity": self.ln_popdensity_post - self.ln_popdensity_pre,
            "d_ln_popsize": self.ln_popsize_post - self.ln_popsize_pre,
            "fractionalization": frac,
            "hhi": hhi,
            "polarization": pol,
            "fraction_largest_minority": self.fraction_largest_minority,
            "latitude": self.latitude,
            "inv_dist_coast": self.inv_dist_coast,
            "years_habsburg": self.years_habsburg,
            "years_ottoman": self.years_ottoman,
        }


REGRESSORS = (
    "d_ln_popdensity",
    "d_ln_popsize",
    "fractionalization",
    "hhi",
    "polarization",
    "fraction_largest_minority",
    "latitude",
    "inv_dist_coast",
    "years_habsburg",
    "years_ottoman",
)

# Columns 1-10 enter one regressor each; column 11 enters them jointly.
# Fractionalization and HHI sum to one, so with fixed effects only one of
# them can enter the joint column.
TABLE2_SPECS: dict[int, tuple[str, ...]] = {i + 1: (r,) for i, r in enumerate(REGRESSORS)}
TABLE2_SPECS[11] = tuple(r for r in REGRESSORS if r != "hhi")

_NUMERIC_FIELDS = (
    "ln_popdensity_pre",
    "ln_popdensity_post",
    "ln_popsize_pre",
    "ln_popsize_post",
    "latitude",
    "inv_dist_coast",
    "years_habsburg",
    "years_ottoman",
    "fraction_largest_minority",
)


def load_features(path) -> list[RegionFeatures]:
    """One row per unit; ethnic shares in ``share_*`` columns, blanks as missing."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False, comment="#")
    for col in ("unit_id", "republic_id"):
        if col not in df.columns:
            raise MissingColumn(f"features table lacks column {col!r}")
    share_cols = [c for c in df.columns if c.startswith(SHARE_PREFIX)]

    def num(col):
        if col not in df.columns:
            return np.full(len(df), np.nan)
        raw = df[col].str.strip()
        vals = parse_floats(raw)
        bad = np.isnan(vals) & (raw != "").to_numpy()
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonNumericValue(f"features column {col!r} row {i + 2}: {raw.iloc[i]!r} is not numeric")
        return vals

    cols = {c: num(c) for c in _NUMERIC_FIELDS}
    shares = np.column_stack([num(c) for c in share_cols]) if share_cols else np.empty((len(df), 0))
    out = []
    for i, row in df.iterrows():
        sh = shares[i]
        sh = tuple(np.nan_to_num(sh, nan=0.0)) if share_cols and np.isfinite(sh).any() else ()
        out.append(RegionFeatures(
            unit_id=row["unit_id"].strip(),
            republic_id=row["republic_id"].strip(),
            group_shares=sh,
            **{c: float(cols[c][i]) for c in _NUMERIC_FIELDS},
        ))
    return out


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class RegressionResult:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    r2: float
    n: int
    n_fe_groups: int
    n_clusters: int
    units: tuple[str, ...] = ()
    dropped: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "coefficients": {n: {"coef": float(c), "se": float(s), "p": float(p)}
                             for n, c, s, p in zip(self.names, self.coef, self.se, self.pvalues)},
            "r2": self.r2, "n": self.n, "fe_groups": self.n_fe_groups, "clusters": self.n_clusters,
            "dropped": list(self.dropped),
        }


def _demean_by(X: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    sums = np.zeros((n_groups,) + X.shape[1:])
    np.add.at(sums, codes, X)
    return X - (sums / counts.reshape((-1,) + (1,) * (X.ndim - 1)))[codes]


def ols_cluster(
    y: np.ndarray,
    X: np.ndarray,
    *,
    fe: np.ndarray | None = None,
    clusters: np.ndarray | None = None,
    names: Sequence[str] | None = None,
) -> RegressionResult:
    """OLS with optional absorbed fixed effects and CR1 cluster-robust errors.

    Without ``fe`` an intercept is included.  The small-sample factor is
    ``G/(G-1) * (n-1)/(n-k)`` with ``k`` counting slopes plus fixed-effect
    dummies (or the intercept), i.e. the explicit dummy regression.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(p))
    if fe is not None:
        _, fe_codes = np.unique(np.asarray(fe), return_inverse=True)
        n_fe = int(fe_codes.max()) + 1
        Xt = _demean_by(X, fe_codes, n_fe)
        yt = _demean_by(y, fe_codes, n_fe)
        k = p + n_fe
    else:
        Xt = np.column_stack([np.ones(n), X])
        yt = y
        n_fe = 0
        k = p + 1
    if n < k + 1:
        raise Collinear(f"{n} observations cannot identify {k} parameters")
    if np.linalg.matrix_rank(Xt) < Xt.shape[1]:
        raise Collinear("regressors are perfectly collinear after fixed-effect absorption")
    XtX_inv = np.linalg.inv(Xt.T @ Xt)
    beta = XtX_inv @ Xt.T @ yt
    e = yt - Xt @ beta
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(e @ e) / sst if sst > 0 else 1.0

    if clusters is None:
        clusters = np.arange(n)
    _, cl = np.unique(np.asarray(clusters), return_inverse=True)
    G = int(cl.max()) + 1
    if G < 2:
        raise TooFewClusters("cluster-robust errors need at least 2 clusters")
    scores = np.zeros((G, Xt.shape[1]))
    np.add.at(scores, cl, Xt * e[:, None])
    V = (G / (G - 1)) * ((n - 1) / (n - k)) * XtX_inv @ (scores.T @ scores) @ XtX_inv
    se = np.sqrt(np.maximum(np.diag(V), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    pv = 2.0 * stats.t.sf(np.abs(t), G - 1)
    if fe is None:
        beta, se, pv = beta[1:], se[1:], pv[1:]
    return RegressionResult(names, beta, se, pv, min(max(r2, 0.0), 1.0), n, n_fe, G)


def gap_correlates(
    features: Sequence[RegionFeatures],
    gaps: Mapping[str, float],
    spec: Sequence[str] | int,
    *,
    fe: bool = True,
    cluster_by: str = "republic",
) -> RegressionResult:
    """Regress per-unit mean percent gaps on regional characteristics.

    ``spec`` is a list of regressor names or a Table 2 column number (1-11).
    Units lacking a gap or any selected regressor are dropped and listed.
    """
    names = TABLE2_SPECS[spec] if isinstance(spec, int) else tuple(spec)
    unknown = set(names) - set(REGRESSORS)
    if unknown:
        raise ValueError(f"unknown regressor(s): {sorted(unknown)}")
    rows, dropped = [], []
    for f in sorted(features, key=lambda f: f.unit_id):
        reg = f.regressors()
        vals = [reg[n] for n in names]
        g = gaps.get(f.unit_id, math.nan)
        if math.isfinite(g) and all(math.isfinite(v) for v in vals):
            rows.append((f.unit_id, f.republic_id, g, vals))
        else:
            dropped.append(f.unit_id)
    if not rows:
        raise Collinear("no complete observations")
    y = np.array([r[2] for r in rows])
    X = np.array([r[3] for r in rows])
    rep = np.array([r[1] for r in rows])
    if cluster_by == "republic":
        clusters = rep
    elif cluster_by == "unit":
        clusters = np.array([r[0] for r in rows])
    else:
        raise ValueError("cluster_by must be 'republic' or 'unit'")
    res = ols_cluster(y, X, fe=rep if fe else None, clusters=clusters, names=names)
    return RegressionResult(
        res.names, res.coef, res.se, res.pvalues, res.r2, res.n, res.n_fe_groups, res.n_clusters,
        tuple(r[0] for r in rows), tuple(dropped),
    )


def table2(features: Sequence[RegionFeatures], gaps: Mapping[str, float], **kwargs) -> dict[int, RegressionResult]:
    return {col: gap_correlates(features, gaps, col, **kwargs) for col in TABLE2_SPECS}


def table2_rows(results: Mapping[int, RegressionResult]):
    cols = sorted(results)
    header = ("row", *[f"({c})" for c in cols])
    rows = []
    for name in REGRESSORS:
        coef, se = [], []
        for c in cols:
            r = results[c]
            if name in r.names:
                i = r.names.index(name)
                coef.append(float(r.coef[i]))
                se.append(float(r.se[i]))
            else:
                coef.append(None)
                se.append(None)
        rows.append((name, *coef))
        rows.append((f"{name}_se", *se))
    rows.append(("fixed_effects", *["republic" if results[c].n_fe_groups else "none" for c in cols]))
    rows.append(("observations", *[results[c].n for c in cols]))
    rows.append(("r2", *[results[c].r2 for c in cols]))
    return header, rows


# ---------------------------------------------------------------------------
# Benford
# ---------------------------------------------------------------------------
BENFORD = np.log10(1.0 + 1.0 / np.arange(1, 10))
MIN_BENFORD_WEIGHTS = 45


@dataclass(frozen=True, eq=False)
class BenfordReport:
    counts: np.ndarray
    expected: np.ndarray
    chi2: float
    p_value: float
    n_weights: int

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / self.n_weights


def first_digit(x: float) -> int:
    """Leading significant digit of a positive finite number."""
    return int(f"{abs(x):.16e}"[0])


def benford_weights(fits_or_weights, sparsity_threshold: float = 1e-4) -> BenfordReport:
    """Chi-square test (8 df) of pooled donor-weight first digits against Benford's law.

    Accepts synthetic control fits or a flat collection of weights; only
    weights above ``sparsity_threshold`` count.
    """
    items = list(fits_or_weights)
    if items and hasattr(items[0], "weights"):
        w = np.concatenate([np.asarray(f.weights.w, dtype=float) for f in items])
    else:
        w = np.asarray(items, dtype=float)
    w = w[np.isfinite(w) & (w > sparsity_threshold)]
    if w.size < MIN_BENFORD_WEIGHTS:
        raise TooFewWeights(f"{w.size} weights above {sparsity_threshold:g}; at least {MIN_BENFORD_WEIGHTS} required")
    digits = np.fromiter((first_digit(x) for x in w), dtype=int, count=w.size)
    counts = np.bincount(digits, minlength=10)[1:].astype(float)
    expected = BENFORD * w.size
    chi2, p = stats.chisquare(counts, expected)
    return BenfordReport(counts, expected, float(chi2), float(p), int(w.size))


BENFORD_HEADER = ("digit", "observed", "expected", "observed_share", "benford_share")


def benford_rows(rep: BenfordReport):
    for d in range(9):
        yield (d + 1, int(rep.counts[d]), float(rep.expected[d]), float(rep.proportions[d]), float(BENFORD[d]))
