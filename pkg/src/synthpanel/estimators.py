"""Alternative panel estimators: two-way fixed effects, interactive fixed
effects, matrix completion and synthetic difference-in-differences.

All estimators share one treatment date, take the outcome matrix of the
treated units and the donor pool from a :class:`StudyDesign`, and report the
average post-period effect in outcome units.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import qp
from .errors import (
    CollinearDesign,
    EmptyInput,
    GridExhausted,
    NoConvergence,
    SVDFailure,
    TooFewDonors,
    TooFewPairs,
    WindowTooShort,
)
from .panel import StudyDesign

N_PERM = 500
N_BOOT = 1000
PLACEBO_TOL = 1e-8  # soft-impute tolerance for placebo refits


class DegenerateWeights(UserWarning):
    """All time-weight mass sits on a single pre-period year."""


@dataclass(frozen=True)
class PanelBlock:
    """Outcome matrix with treated rows first, then donors."""

    Y: np.ndarray
    n_treated: int
    n_pre: int
    treated_ids: tuple[str, ...]
    donor_ids: tuple[str, ...]
    years: tuple[int, ...]

    @property
    def Ytr(self) -> np.ndarray:
        return self.Y[: self.n_treated]

    @property
    def Yco(self) -> np.ndarray:
        return self.Y[self.n_treated :]

    @property
    def post_years(self) -> tuple[int, ...]:
        return self.years[self.n_pre :]

    def placebo(self, pseudo: np.ndarray) -> "PanelBlock":
        """Donors only, with rows ``pseudo`` (donor indices) playing the treated units."""
        rest = np.setdiff1d(np.arange(len(self.donor_ids)), pseudo)
        Yco = self.Yco
        return PanelBlock(
            np.vstack([Yco[pseudo], Yco[rest]]),
            len(pseudo),
            self.n_pre,
            tuple(self.donor_ids[i] for i in pseudo),
            tuple(self.donor_ids[i] for i in rest),
            self.years,
        )

    def bootstrap(self, rows: np.ndarray) -> "PanelBlock":
        """Donors resampled by index (with repetition); treated rows unchanged."""
        return PanelBlock(
            np.vstack([self.Ytr, self.Yco[rows]]),
            self.n_treated,
            self.n_pre,
            self.treated_ids,
            tuple(self.donor_ids[i] for i in rows),
            self.years,
        )


def panel_block(design: StudyDesign, treated_ids: Sequence[str] | None = None) -> PanelBlock:
    ds = design.dataset
    treated = tuple(sorted(treated_ids)) if treated_ids is not None else design.treated_ids
    if not treated:
        raise EmptyInput("no treated units")
    rows = [ds.unit_index(u) for u in treated] + [ds.unit_index(u) for u in design.donor_ids]
    return PanelBlock(
        ds.outcome[rows].copy(), len(treated), len(design.pre_years), treated, design.donor_ids, ds.years
    )


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def _permutation_draws(block: PanelBlock, n: int, seed: int):
    n_co, n_tr = len(block.donor_ids), block.n_treated
    if n_co <= n_tr:
        raise TooFewDonors(f"placebo reassignment needs more than {n_tr} donors; have {n_co}")
    rng = _rng(seed)
    for _ in range(n):
        yield np.sort(rng.choice(n_co, n_tr, replace=False))


def _exceedance_p(stat: float, reference: np.ndarray) -> float:
    reference = reference[np.isfinite(reference)]
    if reference.size == 0:
        return math.nan
    return float(np.mean(np.abs(reference) > abs(stat)))


@dataclass(frozen=True, eq=False)
class DiDEstimate:
    att_level: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    method: str
    att_series: np.ndarray | None = None
    n_draws: int = 0
    detail: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# two-way fixed effects
# ---------------------------------------------------------------------------
def _double_demean(X: np.ndarray) -> np.ndarray:
    return X - X.mean(axis=1, keepdims=True) - X.mean(axis=0, keepdims=True) + X.mean()


def _did_coef(block: PanelBlock) -> float:
    """TWFE treated-by-post coefficient; on a balanced block it is the difference of mean changes."""
    p = block.n_pre
    tr, co = block.Ytr, block.Yco
    return float((tr[:, p:].mean() - tr[:, :p].mean()) - (co[:, p:].mean() - co[:, :p].mean()))


def twfe_did(
    design: StudyDesign | PanelBlock,
    *,
    n_perm: int = N_PERM,
    seed: int = 0,
    level: float = 0.95,
) -> DiDEstimate:
    """Outcome on unit and year effects plus a treated-by-post indicator.

    Standard errors are clustered by unit (CR1 small-sample factor with the
    full dummy count); the p-value compares the coefficient with ``n_perm``
    placebo reassignments of treatment among donors.
    """
    block = design if isinstance(design, PanelBlock) else panel_block(design)
    N, T = block.Y.shape
    D = np.zeros((N, T))
    D[: block.n_treated, block.n_pre :] = 1.0
    Dd = _double_demean(D)
    sxx = float((Dd * Dd).sum())
    if sxx <= 1e-12 * D.size:
        raise CollinearDesign("treated-by-post indicator has no variation net of unit and year effects")
    Yd = _double_demean(block.Y)
    beta = float((Dd * Yd).sum() / sxx)
    resid = Yd - beta * Dd
    scores = (Dd * resid).sum(axis=1)
    n, k, G = N * T, N + T, N
    if n > k and G > 1:
        meat = float(scores @ scores)
        se = math.sqrt(G / (G - 1) * (n - 1) / (n - k) * meat) / sxx
        crit = stats.t.ppf(0.5 + level / 2, G - 1)
        lo, hi = beta - crit * se, beta + crit * se
    else:
        se = lo = hi = math.nan
    p = math.nan
    draws = 0
    if n_perm > 0 and len(block.donor_ids) > block.n_treated:
        ref = np.array([_did_coef(block.placebo(idx)) for idx in _permutation_draws(block, n_perm, seed)])
        p, draws = _exceedance_p(beta, ref), n_perm
    return DiDEstimate(beta, se, lo, hi, p, "twfe_did", n_draws=draws, detail={"clusters": G})


# ---------------------------------------------------------------------------
# interactive fixed effects
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FactorModelFit:
    r: int
    factors: np.ndarray
    loadings: np.ndarray
    att_series: np.ndarray
    att_level: float
    se: float
    bootstrap_ci: tuple[float, float]
    n_boot: int
    p_value: float
    cv_mse: dict[int, float]
    counterfactual: np.ndarray
    unit_att: dict[str, float]
    post_years: tuple[int, ...]


def _svd(X: np.ndarray):
    try:
        return np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDFailure(f"SVD did not converge: {exc}") from exc


def _ife_core(block: PanelBlock, r: int):
    """Factors from donors (all years); treated loadings from their pre-period rows.

    On a complete donor matrix the alternating least squares fixed point is
    the rank-``r`` truncated SVD of the two-way demeaned outcomes, used here
    directly.  Factors are scaled so that ``F'F / T = I``.
    """
    Yco, Ytr, p = block.Yco, block.Ytr, block.n_pre
    T = Yco.shape[1]
    mu = Yco.mean()
    alpha = Yco.mean(axis=1) - mu
    xi = Yco.mean(axis=0) - mu
    if r > 0:
        U, S, Vt = _svd(Yco - mu - alpha[:, None] - xi[None, :])
        F = math.sqrt(T) * Vt[:r].T
        lam_co = U[:, :r] * S[:r] / math.sqrt(T)
    else:
        F = np.zeros((T, 0))
        lam_co = np.zeros((Yco.shape[0], 0))
    X = np.column_stack([np.ones(p), F[:p]])
    target = (Ytr[:, :p] - mu - xi[:p]).T
    coef = np.linalg.lstsq(X, target, rcond=None)[0]
    alpha_tr, lam_tr = coef[0], coef[1:].T
    cf = mu + xi[None, :] + alpha_tr[:, None] + lam_tr @ F.T
    return F, lam_co, lam_tr, cf, X, target


def _ife_att(block: PanelBlock, r: int) -> float:
    cf = _ife_core(block, r)[3]
    return float((block.Ytr[:, block.n_pre :] - cf[:, block.n_pre :]).mean())


def _loo_mse(X: np.ndarray, target: np.ndarray) -> float:
    """Leave-one-period-out prediction error of the treated pre-period regressions."""
    H = X @ np.linalg.pinv(X)
    h = np.diag(H)
    if np.any(h >= 1 - 1e-10):
        return math.inf
    e = target - H @ target
    return float(np.mean((e / (1 - h)[:, None]) ** 2))


def ife_gsc(
    design: StudyDesign | PanelBlock,
    r_max: int = 5,
    n_boot: int = N_BOOT,
    *,
    r: int | None = None,
    n_perm: int = N_PERM,
    seed: int = 0,
    level: float = 0.95,
) -> FactorModelFit:
    """Generalized synthetic control with interactive fixed effects.

    The factor count is chosen by leave-one-period-out cross-validation on
    the treated units' pre-period (ties, including errors at round-off
    level, go to the smaller ``r``) unless ``r``
    is given.  The confidence interval is a percentile bootstrap over donors;
    the p-value comes from placebo reassignment of treatment among donors.
    """
    block = design if isinstance(design, PanelBlock) else panel_block(design)
    n_co, p = len(block.donor_ids), block.n_pre
    top = r_max if r is None else r
    if n_co <= top + 1:
        raise TooFewDonors(f"{n_co} donors; at least {top + 2} needed for r = {top}")
    if p <= top + 1:
        raise WindowTooShort(f"{p} pre-period years; at least {top + 2} needed for r = {top}")

    cv: dict[int, float] = {}
    if r is None:
        for rr in range(r_max + 1):
            _, _, _, _, X, target = _ife_core(block, rr)
            cv[rr] = _loo_mse(X, target)
        # errors at round-off level count as ties, whatever their order
        floor = 1e-10 * float(np.mean((target - target.mean(axis=0)) ** 2))
        best = min(cv.values())
        r = min(rr for rr, v in cv.items() if v <= best * (1 + 1e-12) + floor)
    F, lam_co, lam_tr, cf, _, _ = _ife_core(block, r)
    gaps = block.Ytr[:, p:] - cf[:, p:]
    series = gaps.mean(axis=0)
    att = float(series.mean())

    rng = _rng(seed)
    boot = np.empty(n_boot)
    for b in range(n_boot):
        boot[b] = _ife_att(block.bootstrap(rng.integers(0, n_co, n_co)), r)
    if n_boot > 1:
        a = (1 - level) / 2
        ci = (float(np.quantile(boot, a)), float(np.quantile(boot, 1 - a)))
        se = float(boot.std(ddof=1))
    else:
        ci, se = (math.nan, math.nan), math.nan
    pval = math.nan
    if n_perm > 0 and n_co > block.n_treated + top + 1:
        ref = np.array([_ife_att(block.placebo(idx), r) for idx in _permutation_draws(block, n_perm, seed + 1)])
        pval = _exceedance_p(att, ref)
    return FactorModelFit(
        r=r,
        factors=F,
        loadings=np.vstack([lam_tr, lam_co]),
        att_series=series,
        att_level=att,
        se=se,
        bootstrap_ci=ci,
        n_boot=n_boot,
        p_value=pval,
        cv_mse=cv,
        counterfactual=cf,
        unit_att=dict(zip(block.treated_ids, map(float, gaps.mean(axis=1)))),
        post_years=block.post_years,
    )


# ---------------------------------------------------------------------------
# matrix completion
# ---------------------------------------------------------------------------
def _fe_part(Z: np.ndarray) -> np.ndarray:
    return Z.mean(axis=1, keepdims=True) + Z.mean(axis=0, keepdims=True) - Z.mean()


def _prox(Z: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Additive effects of ``Z`` plus singular-value thresholding of the rest."""
    U, S, Vt = _svd(_double_demean(Z))
    S = np.maximum(S - lam, 0.0)
    keep = S > 0
    L = (U[:, keep] * S[keep]) @ Vt[keep]
    return _fe_part(Z) + L, L


def _soft_impute_run(Y, observed, lam, x, max_iter, tol):
    scale = max(float(np.linalg.norm(Y[observed])), 1e-300)
    z, t = x, 1.0
    for _ in range(max_iter):
        new, L = _prox(np.where(observed, Y, z), lam)
        step = new - x
        if float(np.linalg.norm(step)) <= tol * scale:
            return new, L
        if float(np.sum((z - new) * step)) > 0.0:  # momentum points uphill: restart
            t = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = new + ((t - 1.0) / t_next) * step
        x, t = new, t_next
    raise NoConvergence(f"soft-impute did not converge in {max_iter} iterations (lambda={lam:g})")


def soft_impute(
    Y: np.ndarray,
    observed: np.ndarray,
    lam: float,
    *,
    start: np.ndarray | None = None,
    max_iter: int = 20000,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit ``Y ~ a_i + b_t + L`` on observed cells with nuclear penalty ``lam`` on ``L``.

    The additive effects are unpenalised.  Iterations are soft-impute steps
    (proximal gradient with unit step) with Nesterov momentum and adaptive
    restart.  Without ``start`` the solve is warm-started along a decreasing
    ``lambda`` path from the largest singular value, four steps per decade;
    for small ``lam`` a cold start would stop at once, since the proximal
    step is then nearly the identity.  Returns ``(fit, L)``; ``fit`` covers
    every cell.
    """
    if start is not None:
        return _soft_impute_run(Y, observed, lam, start.copy(), max_iter, tol)
    x = np.where(observed, Y, Y[observed].mean())
    if math.isfinite(lam) and lam > 0:
        smax = float(_svd(_double_demean(x))[1][0])
        if lam < smax:
            n = int(math.ceil(4 * math.log10(smax / lam))) + 1
            for step_lam in np.geomspace(smax, lam, n)[:-1]:
                x = _soft_impute_run(Y, observed, float(step_lam), x, max_iter, max(tol, 1e-8))[0]
    return _soft_impute_run(Y, observed, lam, x, max_iter, tol)


def default_lambda_grid(Y: np.ndarray, observed: np.ndarray, n: int = 16, ratio: float = 1e-5) -> np.ndarray:
    """Geometric grid from the largest singular value of the demeaned, mean-filled matrix downwards."""
    Z = np.where(observed, Y, Y[observed].mean())
    smax = float(_svd(_double_demean(Z))[1][0])
    return smax * np.geomspace(1.0, ratio, n)


def _mc_cv(Y, observed, grid, rng, holdout, repeats):
    cells = np.argwhere(observed)
    errs = np.zeros((repeats, len(grid)))
    base = np.zeros(repeats)
    for rep in range(repeats):
        pick = rng.choice(len(cells), max(1, int(round(holdout * len(cells)))), replace=False)
        held = np.zeros_like(observed)
        held[tuple(cells[pick].T)] = True
        train = observed & ~held
        fit = soft_impute(Y, train, math.inf)[0]  # additive effects only
        base[rep] = float(np.mean((Y[held] - fit[held]) ** 2))
        start = fit
        for k, lam in enumerate(grid):
            start = soft_impute(Y, train, lam, start=start)[0]
            errs[rep, k] = float(np.mean((Y[held] - start[held]) ** 2))
    return errs.mean(axis=0), float(base.mean())


def _mc_att(block: PanelBlock, lam: float, start=None, tol: float = 1e-10) -> tuple[float, np.ndarray, np.ndarray]:
    observed = np.ones(block.Y.shape, dtype=bool)
    observed[: block.n_treated, block.n_pre :] = False
    fit, L = soft_impute(block.Y, observed, lam, start=start, tol=tol)
    eff = block.Ytr[:, block.n_pre :] - fit[: block.n_treated, block.n_pre :]
    return float(eff.mean()), fit, eff


def matrix_completion_att(
    design: StudyDesign | PanelBlock,
    lambda_grid: Sequence[float] | None = None,
    *,
    holdout: float = 0.1,
    repeats: int = 5,
    n_perm: int = N_PERM,
    seed: int = 0,
    level: float = 0.95,
) -> DiDEstimate:
    """Nuclear-norm matrix completion of the treated post-period cells.

    ``lambda`` is chosen from the grid (default: relative to the largest
    singular value) by the mean squared error on randomly held-out
    untreated cells.  The standard error and p-value come from placebo
    reassignment of treatment among donors at the chosen ``lambda``.
    """
    block = design if isinstance(design, PanelBlock) else panel_block(design)
    Y = block.Y
    observed = np.ones(Y.shape, dtype=bool)
    observed[: block.n_treated, block.n_pre :] = False
    grid = np.sort(np.asarray(
        default_lambda_grid(Y, observed) if lambda_grid is None else lambda_grid, dtype=float
    ))[::-1]
    if grid.size == 0:
        raise GridExhausted("empty lambda grid")
    rng = _rng(seed)
    cv, base = _mc_cv(Y, observed, grid, rng, holdout, repeats)
    finite = np.isfinite(cv)
    if not finite.any() or np.nanmin(cv) > base:
        raise GridExhausted("no lambda in the grid predicts held-out cells as well as additive effects alone")
    k = int(np.nanargmin(np.where(finite, cv, np.nan)))
    lam = float(grid[k])
    att, fit, eff = _mc_att(block, lam)

    se = lo = hi = pval = math.nan
    draws = 0
    if n_perm > 0 and len(block.donor_ids) > block.n_treated:
        donor_fit = fit[block.n_treated :]
        ref = []
        for idx in _permutation_draws(block, n_perm, seed + 1):
            rest = np.setdiff1d(np.arange(len(block.donor_ids)), idx)
            start = np.vstack([donor_fit[idx], donor_fit[rest]])
            ref.append(_mc_att(block.placebo(idx), lam, start, tol=PLACEBO_TOL)[0])
        ref = np.asarray(ref)
        se = float(ref.std(ddof=1)) if n_perm > 1 else math.nan
        z = stats.norm.ppf(0.5 + level / 2)
        lo, hi = att - z * se, att + z * se
        pval, draws = _exceedance_p(att, ref), n_perm
    return DiDEstimate(
        att, se, lo, hi, pval, "matrix_completion",
        att_series=eff.mean(axis=0), n_draws=draws,
        detail={"lambda": lam, "cv_mse": dict(zip(map(float, grid), map(float, cv))), "baseline_mse": base},
    )


# ---------------------------------------------------------------------------
# synthetic difference-in-differences
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class SDIDEstimate:
    unit_weights: np.ndarray
    time_weights: np.ndarray
    att_level: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    zeta: float
    donor_ids: tuple[str, ...]
    pre_years: tuple[int, ...]
    n_placebo: int = 0


def _noise_scale(Yco_pre: np.ndarray) -> float:
    if Yco_pre.shape[1] < 2:
        return 0.0
    d = np.diff(Yco_pre, axis=1).ravel()
    return float(d.std(ddof=1)) if d.size > 1 else 0.0


def _simplex_ridge(A: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    """``min ||M(A w - b)||^2 + ridge^2 ||w||^2`` on the simplex, ``M`` demeaning the rows (free intercept)."""
    J = A.shape[1]
    if J == 1:
        return np.ones(1)
    Ac = A - A.mean(axis=0, keepdims=True)
    bc = b - b.mean()
    G = np.vstack([Ac, ridge * np.eye(J)])
    y = np.concatenate([bc, np.zeros(J)])
    w, _, status = qp.simplex_ls(np.ascontiguousarray(G), y, np.empty(0), 5000, 1e-13)
    if status != qp.CONVERGED:
        raise NoConvergence("simplex weight solve hit the iteration cap")
    return w


def _sdid_weights(block: PanelBlock, zeta_multiplier: float):
    p = block.n_pre
    Yco, Ytr = block.Yco, block.Ytr
    n_co, n_post = Yco.shape[0], Yco.shape[1] - p
    sigma = _noise_scale(Yco[:, :p])
    zeta = zeta_multiplier * (block.n_treated * n_post) ** 0.25 * sigma
    omega = _simplex_ridge(Yco[:, :p].T, Ytr[:, :p].mean(axis=0), zeta * math.sqrt(p))
    lam = _simplex_ridge(Yco[:, :p], Yco[:, p:].mean(axis=1), 1e-6 * sigma * math.sqrt(n_co))
    return omega, lam, zeta


def _sdid_tau(block: PanelBlock, omega: np.ndarray, lam: np.ndarray) -> float:
    p = block.n_pre
    tr = block.Ytr.mean(axis=0)
    co = block.Yco
    d_tr = tr[p:].mean() - lam @ tr[:p]
    d_co = co[:, p:].mean(axis=1) - co[:, :p] @ lam
    return float(d_tr - omega @ d_co)


def sdid(
    design: StudyDesign | PanelBlock,
    *,
    weights: str = "optimal",
    n_placebo: int = 200,
    seed: int = 0,
    zeta_multiplier: float = 1.0,
    level: float = 0.95,
) -> SDIDEstimate:
    """Synthetic difference-in-differences.

    Unit weights match the treated pre-period trend up to a constant, with
    ridge penalty ``zeta^2 T_pre`` where ``zeta = (N_tr T_post)^(1/4)`` times
    the standard deviation of donors' first-differenced pre-period outcomes.
    Time weights match donors' post-period means from their pre-period
    outcomes.  ``weights="uniform"`` forces equal weights, which reproduces
    the two-way fixed-effects estimate.  The standard error is the placebo
    standard deviation over ``n_placebo`` reassignments among donors.
    """
    block = design if isinstance(design, PanelBlock) else panel_block(design)
    p, n_co = block.n_pre, len(block.donor_ids)
    if weights not in ("optimal", "uniform"):
        raise ValueError("weights must be 'optimal' or 'uniform'")
    if weights == "uniform":
        omega, lam, zeta = np.full(n_co, 1.0 / n_co), np.full(p, 1.0 / p), math.nan
    else:
        omega, lam, zeta = _sdid_weights(block, zeta_multiplier)
        if p > 4 and lam.max() >= 1 - 1e-9:
            warnings.warn("all time-weight mass on one pre-period year", DegenerateWeights, stacklevel=2)
    tau = _sdid_tau(block, omega, lam)

    se = lo = hi = pval = math.nan
    if n_placebo > 1 and n_co > block.n_treated:
        ref = []
        for idx in _permutation_draws(block, n_placebo, seed):
            pb = block.placebo(idx)
            if weights == "uniform":
                w_o = np.full(len(pb.donor_ids), 1.0 / len(pb.donor_ids))
                w_l = lam
            else:
                w_o, w_l, _ = _sdid_weights(pb, zeta_multiplier)
            ref.append(_sdid_tau(pb, w_o, w_l))
        ref = np.asarray(ref)
        se = float(math.sqrt(np.mean((ref - ref.mean()) ** 2)))
        z = stats.norm.ppf(0.5 + level / 2)
        lo, hi = tau - z * se, tau + z * se
        pval = float(2 * stats.norm.sf(abs(tau) / se)) if se > 0 else math.nan
    return SDIDEstimate(
        omega, lam, tau, se, lo, hi, pval, zeta, block.donor_ids, block.years[:p],
        n_placebo=n_placebo if n_placebo > 1 else 0,
    )


def sdid_unit_effects(design: StudyDesign, **kwargs) -> dict[str, float]:
    """SDID effect of each treated unit estimated on its own (no standard errors)."""
    kwargs.setdefault("n_placebo", 0)
    return {u: sdid(panel_block(design, [u]), **kwargs).att_level for u in design.treated_ids}


# ---------------------------------------------------------------------------
# concordance
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ConcordanceReport:
    n: int
    pearson_r: float
    pearson_p: float
    spearman_rho: float
    spearman_p: float
    units: tuple[str, ...] = ()


def estimator_concordance(a, b) -> ConcordanceReport:
    """Pearson and rank correlation of per-unit effects from two estimators.

    ``a`` and ``b`` are mappings keyed by unit (paired on common keys) or
    equal-length sequences.
    """
    if isinstance(a, Mapping) and isinstance(b, Mapping):
        units = tuple(sorted(set(a) & set(b)))
        x = np.array([a[u] for u in units], dtype=float)
        y = np.array([b[u] for u in units], dtype=float)
    else:
        x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if x.shape != y.shape:
            raise TooFewPairs("effect vectors have different lengths")
        units = ()
    if x.size < 3:
        raise TooFewPairs(f"{x.size} paired units; at least 3 required")
    pr = stats.pearsonr(x, y)
    sr = stats.spearmanr(x, y)
    return ConcordanceReport(x.size, float(pr[0]), float(pr[1]), float(sr[0]), float(sr[1]), units)


# ---------------------------------------------------------------------------
# table 1
# ---------------------------------------------------------------------------
ESTIMATORS = ("twfe_did", "ife_gsc", "matrix_completion", "sdid")
TABLE1_STATS = ("att", "se", "ci_low", "ci_high", "p_value")


def subsamples(design: StudyDesign) -> dict[str, tuple[str, ...]]:
    """``full`` plus one group of treated units per country, in sorted order."""
    groups: dict[str, list[str]] = {}
    for u in design.treated_ids:
        groups.setdefault(design.dataset.unit(u).country or "", []).append(u)
    out = {"full": design.treated_ids}
    if len(groups) > 1:
        out.update({c or "unassigned": tuple(v) for c, v in sorted(groups.items())})
    return out


def _cells(name: str, est) -> dict[str, float]:
    if name == "ife_gsc":
        return {"att": est.att_level, "se": est.se, "ci_low": est.bootstrap_ci[0],
                "ci_high": est.bootstrap_ci[1], "p_value": est.p_value}
    return {"att": est.att_level, "se": est.se, "ci_low": est.ci_low,
            "ci_high": est.ci_high, "p_value": est.p_value}


def run_estimator(name: str, block: PanelBlock, seed: int, **opts):
    if name == "twfe_did":
        return twfe_did(block, seed=seed, n_perm=opts.get("n_perm", N_PERM))
    if name == "ife_gsc":
        return ife_gsc(block, r_max=opts.get("r_max", 5), n_boot=opts.get("n_boot", N_BOOT),
                       n_perm=opts.get("n_perm", N_PERM), seed=seed)
    if name == "matrix_completion":
        return matrix_completion_att(block, opts.get("lambda_grid"), n_perm=opts.get("n_perm", N_PERM), seed=seed)
    if name == "sdid":
        return sdid(block, n_placebo=opts.get("n_placebo", 200), seed=seed)
    raise ValueError(f"unknown estimator {name!r}")


def _cell_task(args):
    name, block, seed, opts = args
    return _cells(name, run_estimator(name, block, seed, **opts))


def table1(
    design: StudyDesign, *, seed: int, estimators: Sequence[str] = ESTIMATORS, workers: int = 1, **opts
):
    """Every estimator on the full sample and on each country's treated units.

    Returns ``{estimator: {sample: {stat: value}}}``.  Each cell uses a seed
    derived from ``seed`` and its position, so cells are reproducible on
    their own and the result does not depend on ``workers``.
    """
    from .parallel import pmap

    samples = subsamples(design)
    children = np.random.SeedSequence(int(seed)).spawn(len(estimators) * len(samples))
    tasks, keys = [], []
    for i, (name, (sample, ids)) in enumerate((n, s) for n in estimators for s in samples.items()):
        cell_seed = int(children[i].generate_state(1)[0])
        tasks.append((name, panel_block(design, ids), cell_seed, opts))
        keys.append((name, sample))
    cells = pmap(_cell_task, tasks, workers=workers, chunksize=1)
    out: dict[str, dict[str, dict[str, float]]] = {name: {} for name in estimators}
    for (name, sample), cell in zip(keys, cells):
        out[name][sample] = cell
    return out


def table1_rows(result: dict):
    samples = list(next(iter(result.values())).keys())
    header = ("estimator", "statistic", *samples)
    rows = []
    for name, cols in result.items():
        for stat in TABLE1_STATS:
            rows.append((name, stat, *[cols[s][stat] for s in samples]))
    return header, rows
