"""Synthetic control estimator.

Weights solve ``min (z1 - Z0 w)' V (z1 - Z0 w)`` over the unit simplex; the
diagonal ``V`` is cross-validated on a training/validation split of the
pre-period, and the final weights use the full pre-period predictors.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import qp
from .errors import (
    AllDropped,
    DegeneratePredictor,
    EmptyInput,
    NoConvergence,
    NonPositiveSynthetic,
    UnknownUnit,
)
from .panel import StudyDesign, default_lag_positions

LOGGER = logging.getLogger(__name__)

MAX_ITER = 5000
V_EVAL_BUDGET = 2000
SPARSITY_THRESHOLD = 1e-6
_ZERO_LOSS = 1e-20
_KKT_TOL = 1e-13
NM_XATOL = 1e-3
NM_FRTOL = 1e-8


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------
def _map_index(i: int, n_from: int, n_to: int) -> int:
    """Position ``i`` of an ``n_from`` window mapped to the same relative place in ``n_to``."""
    if n_from <= 1:
        return n_to - 1
    return int(round(i * (n_to - 1) / (n_from - 1)))


@dataclass(frozen=True, eq=False)
class PredictorTable:
    """Raw (unscaled) predictor values for every unit of a study.

    ``full`` aggregates over the whole pre-period, ``train`` over the
    training years, with year-specific predictors moved to the same
    relative position inside the training window.
    """

    names: tuple[str, ...]
    full: np.ndarray
    train: np.ndarray

    @classmethod
    def build(cls, design: StudyDesign) -> "PredictorTable":
        ds, cfg = design.dataset, design.config
        pre, train = design.pre_years, design.training_years
        pre_idx = np.array([ds.year_index(y) for y in pre])
        tr_idx = np.array([ds.year_index(y) for y in train])
        names, full_cols, train_cols = [], [], []

        preds = cfg.predictors
        if preds is None:
            from .panel import Predictor

            preds = tuple(Predictor(name) for name in ds.covariates)
        for p in preds:
            mat = ds.covariates[p.name]
            if p.aggregation == "mean":
                names.append(f"{p.name}:mean")
                full_cols.append(mat[:, pre_idx].mean(axis=1))
                train_cols.append(mat[:, tr_idx].mean(axis=1))
            elif p.aggregation == "value_at":
                i = pre.index(p.year)
                names.append(f"{p.name}@{p.year}")
                full_cols.append(mat[:, pre_idx[i]])
                train_cols.append(mat[:, tr_idx[_map_index(i, len(pre), len(train))]])
            else:  # static covariate, read at the start of the window
                names.append(p.name)
                full_cols.append(mat[:, pre_idx[0]])
                train_cols.append(mat[:, tr_idx[0]])

        if cfg.outcome_lag_years is not None:
            lag_pos = [pre.index(y) for y in cfg.outcome_lag_years]
        else:
            lag_pos = default_lag_positions(len(pre))
        for i in lag_pos:
            names.append(f"outcome@{pre[i]}")
            full_cols.append(ds.outcome[:, pre_idx[i]])
            train_cols.append(ds.outcome[:, tr_idx[_map_index(i, len(pre), len(train))]])
        full = np.column_stack(full_cols) if full_cols else np.empty((len(ds.units), 0))
        trn = np.column_stack(train_cols) if train_cols else np.empty((len(ds.units), 0))
        return cls(tuple(names), full, trn)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Inputs of one synthetic-control problem.

    ``z1``/``z0`` are full-pre-period predictors divided by their standard
    deviation across the target and its donors; ``z1_train``/``z0_train`` are
    the training-window counterparts used while choosing ``V``.  ``y0_*``
    arrays have one row per year and one column per donor.
    """

    unit_id: str
    donor_ids: tuple[str, ...]
    predictor_names: tuple[str, ...]
    z1: np.ndarray
    z0: np.ndarray
    z1_train: np.ndarray
    z0_train: np.ndarray
    z1_raw: np.ndarray
    z0_raw: np.ndarray
    years: tuple[int, ...]
    pre_years: tuple[int, ...]
    post_years: tuple[int, ...]
    training_years: tuple[int, ...]
    validation_years: tuple[int, ...]
    y1: np.ndarray
    y0: np.ndarray

    @property
    def K(self) -> int:
        return self.z0.shape[0]

    @property
    def J(self) -> int:
        return self.z0.shape[1]

    def _rows(self, years: Sequence[int]) -> slice:
        start = self.years.index(years[0]) if years else 0
        return slice(start, start + len(years))

    @property
    def y1_train(self):
        return self.y1[self._rows(self.training_years)]

    @property
    def y1_valid(self):
        return self.y1[self._rows(self.validation_years)]

    @property
    def y1_pre(self):
        return self.y1[self._rows(self.pre_years)]

    @property
    def y1_post(self):
        return self.y1[self._rows(self.post_years)]

    @property
    def y0_train(self):
        return self.y0[self._rows(self.training_years)]

    @property
    def y0_valid(self):
        return self.y0[self._rows(self.validation_years)]

    @property
    def y0_pre(self):
        return self.y0[self._rows(self.pre_years)]

    @property
    def y0_post(self):
        return self.y0[self._rows(self.post_years)]


@dataclass(frozen=True, eq=False)
class WeightVector:
    w: np.ndarray
    donor_ids: tuple[str, ...] = ()
    threshold: float = SPARSITY_THRESHOLD

    @property
    def active_support(self) -> np.ndarray:
        return np.flatnonzero(self.w > self.threshold)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.donor_ids, map(float, self.w)))


@dataclass(frozen=True, eq=False)
class VMatrix:
    v: np.ndarray
    validation_mse: float = float("nan")
    evaluations: int = 0


@dataclass(frozen=True, eq=False)
class GapSeries:
    years: tuple[int, ...]
    values: np.ndarray
    synthetic: np.ndarray

    @property
    def percent(self) -> np.ndarray:
        if np.any(self.synthetic <= 0):
            bad = [y for y, s in zip(self.years, self.synthetic) if s <= 0]
            raise NonPositiveSynthetic(f"synthetic level <= 0 in year(s) {bad[:5]}")
        return self.values / self.synthetic

    def window(self, years: Sequence[int]) -> "GapSeries":
        idx = [self.years.index(y) for y in years]
        return GapSeries(tuple(years), self.values[idx], self.synthetic[idx])


@dataclass(frozen=True, eq=False)
class SCMFit:
    unit_id: str
    weights: WeightVector
    v: VMatrix
    observed: np.ndarray
    synthetic_path: np.ndarray
    gaps: GapSeries
    pre_years: tuple[int, ...]
    post_years: tuple[int, ...]
    pre_rmspe: float
    post_rmspe: float
    predictor_names: tuple[str, ...]
    predictor_gap: np.ndarray
    relative_imbalance: float
    predictor_loss: float

    @property
    def rmspe_ratio(self) -> float:
        if self.pre_rmspe > 0:
            return self.post_rmspe / self.pre_rmspe
        return float("inf") if self.post_rmspe > 0 else float("nan")

    @property
    def post_gaps(self) -> GapSeries:
        return self.gaps.window(self.post_years)

    @property
    def mean_post_gap(self) -> float:
        return float(self.post_gaps.values.mean())

    @property
    def mean_post_percent(self) -> float:
        return float(self.post_gaps.percent.mean())

    @property
    def predictor_imbalance(self) -> dict[str, float]:
        return dict(zip(self.predictor_names, map(float, np.abs(self.predictor_gap))))


@dataclass(frozen=True, eq=False)
class AggregateEffect:
    per_unit: dict[str, tuple[float, float]]
    ate_level: float
    ate_percent: float
    post_years: tuple[int, ...]
    year_wise_level: np.ndarray
    year_wise_percent: np.ndarray

    @property
    def n_units(self) -> int:
        return len(self.per_unit)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------
def _scale(raw_target: np.ndarray, raw_donors: np.ndarray):
    stacked = np.vstack([raw_target[None, :], raw_donors])
    sd = stacked.std(axis=0)
    mag = np.max(np.abs(stacked), axis=0)
    degenerate = sd <= 1e-12 * np.maximum(mag, 1.0)
    return sd, degenerate


def assemble_design(design: StudyDesign, unit_id: str, donor_ids: Sequence[str] | None = None) -> DesignMatrices:
    """Predictor and outcome matrices for ``unit_id`` against its donors.

    ``donor_ids`` defaults to the study's donor pool; ``unit_id`` is always
    removed from its own pool.  Donors are put in id order, so the result
    does not depend on the order they are given in.  Predictors constant across the target and
    all donors are dropped with a warning.
    """
    ds = design.dataset
    if unit_id not in ds.unit_ids:
        raise UnknownUnit(f"unit {unit_id!r} is not in the panel")
    if donor_ids is None:
        if unit_id not in design.treated_ids and unit_id not in design.donor_ids:
            raise UnknownUnit(f"unit {unit_id!r} is neither treated nor a donor")
        donor_ids = design.donor_ids
    donors = tuple(sorted(d for d in set(donor_ids) if d != unit_id))
    table = design.predictor_table
    ti = ds.unit_index(unit_id)
    di = np.array([ds.unit_index(d) for d in donors], dtype=int)

    full_t, full_d = table.full[ti], table.full[di]
    tr_t, tr_d = table.train[ti], table.train[di]
    sd_f, deg_f = _scale(full_t, full_d)
    sd_t, deg_t = _scale(tr_t, tr_d)
    keep = ~(deg_f | deg_t)
    names = table.names
    if not keep.all():
        dropped = [n for n, k in zip(names, keep) if not k]
        if not keep.any():
            raise DegeneratePredictor(f"every predictor is constant for unit {unit_id!r}: {dropped}")
        warnings.warn(
            f"dropping predictor(s) constant across unit {unit_id!r} and its donors: {dropped}",
            stacklevel=2,
        )
        names = tuple(n for n, k in zip(names, keep) if k)

    z1 = full_t[keep] / sd_f[keep]
    z0 = (full_d[:, keep] / sd_f[keep]).T
    z1t = tr_t[keep] / sd_t[keep]
    z0t = (tr_d[:, keep] / sd_t[keep]).T
    return DesignMatrices(
        unit_id=unit_id,
        donor_ids=donors,
        predictor_names=names,
        z1=np.ascontiguousarray(z1),
        z0=np.ascontiguousarray(z0),
        z1_train=np.ascontiguousarray(z1t),
        z0_train=np.ascontiguousarray(z0t),
        z1_raw=full_t[keep].copy(),
        z0_raw=np.ascontiguousarray(full_d[:, keep].T),
        years=ds.years,
        pre_years=design.pre_years,
        post_years=design.post_years,
        training_years=design.training_years,
        validation_years=design.validation_years,
        y1=ds.outcome[ti].copy(),
        y0=np.ascontiguousarray(ds.outcome[di].T),
    )


def _path_scale(y: np.ndarray) -> float:
    s = float(np.sqrt(np.mean(y * y))) if y.size else 0.0
    return s if s > 0 else 1.0


def _solve(z0, z1, v, y0_path, y1_path, max_iter):
    s = _path_scale(y1_path)
    w, loss, status = qp.solve_weights_core(
        np.ascontiguousarray(z0),
        np.ascontiguousarray(z1),
        np.asarray(v, dtype=float),
        np.ascontiguousarray(y0_path / s),
        np.ascontiguousarray(y1_path / s),
        max_iter,
        _ZERO_LOSS,
        _KKT_TOL,
        np.empty(0),
    )
    if status != qp.CONVERGED:
        raise NoConvergence(f"weight solve hit the iteration cap ({max_iter})")
    return w, loss


def predictor_loss(design: DesignMatrices, w: np.ndarray, v: np.ndarray) -> float:
    r = design.z1 - design.z0 @ w
    return float(r @ (np.asarray(v) * r))


def solve_weights(design: DesignMatrices, v: VMatrix | np.ndarray, *, max_iter: int = MAX_ITER) -> WeightVector:
    """Simplex-constrained minimiser of the V-weighted predictor discrepancy.

    If several weight vectors attain the minimum (the target lies inside the
    donors' predictor hull), the one that best reproduces the pre-period
    outcome path is returned.
    """
    vv = v.v if isinstance(v, VMatrix) else np.asarray(v, dtype=float)
    w, _ = _solve(design.z0, design.z1, vv, design.y0_pre, design.y1_pre, max_iter)
    return WeightVector(w, design.donor_ids)


def v_from_coefficients(beta) -> np.ndarray:
    """``v_k = |beta_k| / sum |beta|``; uniform when every coefficient is zero."""
    a = np.abs(np.asarray(beta, dtype=float))
    tot = a.sum()
    if not np.isfinite(tot) or tot <= 0:
        return np.full(a.shape, 1.0 / a.size)
    return a / tot


def init_v_regression(design: DesignMatrices) -> VMatrix:
    """Regression-based starting ``V``.

    Donors' mean training-period outcomes are regressed on their (scaled)
    training predictors plus an intercept; the absolute slope
    coefficients, normalised to sum to one, give the diagonal.  A rank
    deficient regression falls back to uniform weights with a warning.
    """
    K = design.K
    if K == 1:
        return VMatrix(np.ones(1))
    Z = design.z0_train.T
    y = design.y0_train.mean(axis=0)
    X = np.column_stack([np.ones(len(y)), Z])
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        warnings.warn(
            f"V initialisation regression is rank deficient for unit {design.unit_id!r}; using uniform V",
            stacklevel=2,
        )
        return VMatrix(np.full(K, 1.0 / K))
    beta = np.linalg.lstsq(X, y, rcond=None)[0][1:]
    return VMatrix(v_from_coefficients(beta))


def validation_mse(design: DesignMatrices, v, *, max_iter: int = MAX_ITER) -> float:
    """Validation-period MSE of weights fitted on the training predictors."""
    vv = v.v if isinstance(v, VMatrix) else np.asarray(v, dtype=float)
    w, _ = _solve(design.z0_train, design.z1_train, vv, design.y0_train, design.y1_train, max_iter)
    e = design.y1_valid - design.y0_valid @ w
    return float(e @ e) / len(e)


def cross_validate_v(design: DesignMatrices, *, max_evals: int = V_EVAL_BUDGET, max_iter: int = MAX_ITER) -> VMatrix:
    """Choose ``V`` by out-of-sample fit on the validation years.

    Weights are re-solved on training predictors for each candidate. The
    search is Nelder-Mead over a softmax parameterisation, started from the
    regression initialisation and from uniform weights with half the
    evaluation budget each; the best point seen is returned.
    """
    K = design.K
    if K == 1:
        return VMatrix(np.ones(1), validation_mse(design, np.ones(1), max_iter=max_iter), 1)
    v_reg = init_v_regression(design).v
    v_uni = np.full(K, 1.0 / K)

    # Zero training loss at one positive V means zero loss at all of them,
    # with the same optimal face: the validation error does not depend on V.
    sv = np.sqrt(v_uni)
    w, _, status = qp.simplex_ls(design.z0_train * sv[:, None], design.z1_train * sv, np.empty(0), max_iter, _KKT_TOL)
    r = design.z0_train @ w - design.z1_train
    if status == qp.CONVERGED and float(r @ (v_uni * r)) <= _ZERO_LOSS * (1.0 + float(design.z1_train @ (v_uni * design.z1_train))):
        return VMatrix(v_reg, validation_mse(design, v_reg, max_iter=max_iter), 1)

    s = _path_scale(design.y1_valid)
    args = (
        np.ascontiguousarray(design.z0_train),
        np.ascontiguousarray(design.z1_train),
        np.ascontiguousarray(design.y0_valid / s),
        np.ascontiguousarray(design.y1_valid / s),
    )
    best_u, best_f, total = None, np.inf, 0
    budget = max_evals // 2
    for v0 in (v_reg, v_uni):
        u0 = qp.inverse_softmax_ext(v0)
        u, f, evals, status = qp.nelder_mead_v(*args, u0, budget, max_iter, _KKT_TOL, NM_XATOL, NM_FRTOL)
        if status != qp.CONVERGED:
            raise NoConvergence(f"weight solve hit the iteration cap during the V search ({design.unit_id})")
        total += evals
        if f < best_f:
            best_u, best_f = u, f
    return VMatrix(qp.softmax_ext(best_u), best_f * s * s, total)


def fit_unit(
    design: StudyDesign,
    unit_id: str,
    donor_ids: Sequence[str] | None = None,
    *,
    max_evals: int = V_EVAL_BUDGET,
    max_iter: int = MAX_ITER,
) -> SCMFit:
    """Synthetic control for one unit: cross-validated V, then full pre-period weights."""
    dm = assemble_design(design, unit_id, donor_ids)
    v = cross_validate_v(dm, max_evals=max_evals, max_iter=max_iter)
    wv = solve_weights(dm, v, max_iter=max_iter)
    return _finish_fit(dm, wv, v)


def fit_from_weights(design: DesignMatrices, w: np.ndarray, v: VMatrix | None = None) -> SCMFit:
    v = v if v is not None else VMatrix(np.full(design.K, 1.0 / design.K))
    return _finish_fit(design, WeightVector(np.asarray(w, dtype=float), design.donor_ids), v)


def _finish_fit(dm: DesignMatrices, wv: WeightVector, v: VMatrix) -> SCMFit:
    w = wv.w
    synthetic = dm.y0 @ w
    gaps = dm.y1 - synthetic
    pre = dm._rows(dm.pre_years)
    post = dm._rows(dm.post_years)
    pre_rmspe = float(np.sqrt(np.mean(gaps[pre] ** 2)))
    post_rmspe = float(np.sqrt(np.mean(gaps[post] ** 2))) if dm.post_years else float("nan")
    zgap = dm.z1_raw - dm.z0_raw @ w
    sd = np.vstack([dm.z1_raw[None, :], dm.z0_raw.T]).std(axis=0)
    denom = np.maximum(np.abs(dm.z1_raw), sd)
    rel = float(np.mean(np.abs(zgap) / np.where(denom > 0, denom, 1.0)))
    return SCMFit(
        unit_id=dm.unit_id,
        weights=wv,
        v=v,
        observed=dm.y1,
        synthetic_path=synthetic,
        gaps=GapSeries(dm.years, gaps, synthetic),
        pre_years=dm.pre_years,
        post_years=dm.post_years,
        pre_rmspe=pre_rmspe,
        post_rmspe=post_rmspe,
        predictor_names=dm.predictor_names,
        predictor_gap=zgap,
        relative_imbalance=rel,
        predictor_loss=predictor_loss(dm, w, v.v),
    )


def _fit_task(args):
    design, unit_id, donors, kwargs = args
    return fit_unit(design, unit_id, donors, **kwargs)


def fit_units(
    design: StudyDesign,
    unit_ids: Sequence[str] | None = None,
    *,
    workers: int = 1,
    **kwargs,
) -> list[SCMFit]:
    """Fit several units; results come back in ``unit_id`` order regardless of ``workers``."""
    ids = sorted(unit_ids if unit_ids is not None else design.treated_ids)
    tasks = [(design, u, None, kwargs) for u in ids]
    from .parallel import pmap

    return pmap(_fit_task, tasks, workers=workers)


def filter_fits(fits: Sequence[SCMFit], multiplier: float = 2.0, passes: int = 2):
    """Drop poorly fitting units in two passes.

    Each pass takes the median pre-period RMSPE of the currently retained
    fits as the benchmark and drops fits above ``multiplier`` times it.
    Returns ``(retained, dropped)``, both in input order.
    """
    if not fits:
        raise EmptyInput("no fits to filter")
    retained = list(fits)
    dropped: list[SCMFit] = []
    for _ in range(passes):
        bench = float(np.median([f.pre_rmspe for f in retained]))
        keep = [f for f in retained if f.pre_rmspe <= multiplier * bench]
        dropped += [f for f in retained if f.pre_rmspe > multiplier * bench]
        retained = keep
        if not retained:
            raise AllDropped("every fit exceeds the pre-period error threshold")
    order = {id(f): i for i, f in enumerate(fits)}
    dropped.sort(key=lambda f: order[id(f)])
    return retained, dropped


def aggregate_ate(fits: Sequence[SCMFit], post_years: Sequence[int] | None = None) -> AggregateEffect:
    """Equal-weight average of per-unit mean post-period gaps."""
    if not fits:
        raise EmptyInput("no fits to aggregate")
    years = tuple(post_years) if post_years is not None else fits[0].post_years
    if not years:
        raise EmptyInput("no post-period years")
    levels, pcts, per_unit = [], [], {}
    for f in sorted(fits, key=lambda f: f.unit_id):
        g = f.gaps.window(years)
        lv, pc = g.values, g.percent
        levels.append(lv)
        pcts.append(pc)
        per_unit[f.unit_id] = (float(lv.mean()), float(pc.mean()))
    levels = np.vstack(levels)
    pcts = np.vstack(pcts)
    return AggregateEffect(
        per_unit=per_unit,
        ate_level=float(np.mean([v[0] for v in per_unit.values()])),
        ate_percent=float(np.mean([v[1] for v in per_unit.values()])),
        post_years=years,
        year_wise_level=levels.mean(axis=0),
        year_wise_percent=pcts.mean(axis=0),
    )


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------
def weights_rows(fits: Sequence[SCMFit]):
    for f in sorted(fits, key=lambda f: f.unit_id):
        w = f.weights.w
        order = sorted(range(len(w)), key=lambda j: (-w[j], f.weights.donor_ids[j]))
        for j in order:
            if w[j] > 0:
                yield (f.unit_id, f.weights.donor_ids[j], float(w[j]))


def gaps_rows(fits: Sequence[SCMFit]):
    for f in sorted(fits, key=lambda f: f.unit_id):
        syn = f.synthetic_path
        for t, y in enumerate(f.gaps.years):
            pct = float(f.gaps.values[t] / syn[t]) if syn[t] > 0 else float("nan")
            yield (f.unit_id, y, float(f.observed[t]), float(syn[t]), float(f.gaps.values[t]), pct)


WEIGHTS_HEADER = ("unit_id", "donor_id", "weight")
GAPS_HEADER = ("unit_id", "year", "observed", "synthetic", "gap", "percent_gap")
