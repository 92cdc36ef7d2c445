"""Placebo-based inference for synthetic control fits.

In-space placebos refit the estimator with each donor falsely treated; the
treated units join the donor pool for those fits.  P-values count placebo
gaps strictly larger in magnitude than the treated gap, among placebos whose
pre-period fit is no worse than ``multiplier`` times the treated unit's.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import scm
from .errors import (
    EmptyAfterFilter,
    FakeT0NotBeforeTrueT0,
    NotEnoughDonors,
    SynthPanelError,
    TooFewDraws,
    WindowTooShort,
)
from .panel import StudyDesign, build_study
from .parallel import pmap

LOGGER = logging.getLogger(__name__)

MODES = ("exhaustive", "sampled")
STATISTICS = ("gap", "rmspe_ratio")
MIN_PRE_YEARS_INTIME = 5


@dataclass(frozen=True, eq=False)
class PermutationPlan:
    """Which donors to treat as pseudo-treated.

    ``exhaustive`` uses every donor once (``n_draws`` must equal the pool
    size); ``sampled`` draws ``n_draws`` donors without replacement using
    ``seed``.  The fits themselves are deterministic, so the draw order is
    the only random element.
    """

    design: StudyDesign
    n_draws: int
    seed: int = 0
    mode: str = "exhaustive"
    statistic: str = "rmspe_ratio"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.mode == "exhaustive" and self.n_draws != len(self.design.donor_ids):
            raise ValueError(
                f"exhaustive mode needs n_draws == donor pool size ({len(self.design.donor_ids)})"
            )
        if self.mode == "sampled" and self.n_draws > len(self.design.donor_ids):
            raise NotEnoughDonors(
                f"{self.n_draws} draws requested but only {len(self.design.donor_ids)} donors available"
            )

    @classmethod
    def exhaustive(cls, design: StudyDesign, **kwargs) -> "PermutationPlan":
        return cls(design, len(design.donor_ids), mode="exhaustive", **kwargs)

    def pseudo_units(self) -> list[str]:
        donors = list(self.design.donor_ids)
        if self.mode == "exhaustive":
            return donors
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        return [donors[i] for i in rng.permutation(len(donors))[: self.n_draws]]

    def pool_for(self, pseudo_unit: str) -> tuple[str, ...]:
        """Donors plus the treated units, minus the pseudo-treated unit itself."""
        pool = set(self.design.donor_ids) | set(self.design.treated_ids)
        pool.discard(pseudo_unit)
        return tuple(sorted(pool))

    def echo(self) -> dict:
        return {"n_draws": self.n_draws, "seed": self.seed, "mode": self.mode, "statistic": self.statistic}


@dataclass(frozen=True, eq=False)
class PlaceboDraw:
    draw_id: int
    pseudo_unit: str
    gaps: np.ndarray
    pre_rmspe: float
    post_rmspe: float
    weights: np.ndarray | None = None

    @property
    def rmspe_ratio(self) -> float:
        if self.pre_rmspe > 0:
            return self.post_rmspe / self.pre_rmspe
        return math.inf if self.post_rmspe > 0 else math.nan


@dataclass(frozen=True, eq=False)
class PlaceboDistribution:
    post_years: tuple[int, ...]
    draws: tuple[PlaceboDraw, ...]
    plan: dict
    failures: tuple[tuple[int, str, str], ...] = ()

    def __len__(self) -> int:
        return len(self.draws)

    def retained(self, max_pre_rmspe: float) -> list[PlaceboDraw]:
        return [d for d in self.draws if d.pre_rmspe <= max_pre_rmspe]

    def gap_matrix(self, draws: Sequence[PlaceboDraw] | None = None) -> np.ndarray:
        draws = self.draws if draws is None else draws
        if not draws:
            return np.empty((0, len(self.post_years)))
        return np.vstack([d.gaps for d in draws])


@dataclass(frozen=True, eq=False)
class PValueSeries:
    unit_id: str
    years: tuple[int, ...]
    p: np.ndarray
    j_effective: int
    p_rmspe_ratio: float

    @property
    def floor(self) -> float:
        """Smallest non-zero attainable p-value."""
        return 1.0 / self.j_effective


@dataclass(frozen=True, eq=False)
class EmpiricalCI:
    unit_id: str
    years: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray
    level: float


def _placebo_task(args):
    draw_id, design, unit, pool, fit_kwargs = args
    try:
        fit = scm.fit_unit(design, unit, pool, **fit_kwargs)
    except SynthPanelError as exc:
        return draw_id, unit, None, f"{type(exc).__name__}: {exc}"
    draw = PlaceboDraw(
        draw_id, unit, fit.post_gaps.values.copy(), fit.pre_rmspe, fit.post_rmspe, fit.weights.w.copy()
    )
    return draw_id, unit, draw, None


def run_permutation_engine(plan: PermutationPlan, *, workers: int = 1, **fit_kwargs) -> PlaceboDistribution:
    """Refit every pseudo-treated donor with the standard pipeline.

    Fits that raise a package error are skipped and logged; results are
    ordered by draw index whatever the number of workers.
    """
    design = plan.design
    design.predictor_table  # build once before the design is shipped to workers
    tasks = [(i, design, u, plan.pool_for(u), fit_kwargs) for i, u in enumerate(plan.pseudo_units())]
    results = pmap(_placebo_task, tasks, workers=workers)
    draws, failures = [], []
    for draw_id, unit, draw, err in results:
        if draw is None:
            LOGGER.warning("placebo draw %d (%s) skipped: %s", draw_id, unit, err)
            failures.append((draw_id, unit, err))
        else:
            draws.append(draw)
    return PlaceboDistribution(design.post_years, tuple(draws), plan.echo(), tuple(failures))


def _retained_for(treated_fit: scm.SCMFit, dist: PlaceboDistribution, multiplier: float):
    kept = dist.retained(multiplier * treated_fit.pre_rmspe)
    if not kept:
        raise EmptyAfterFilter(
            f"no placebo has pre-RMSPE within {multiplier}x that of {treated_fit.unit_id!r}"
        )
    return kept


def placebo_pvalues(
    treated_fit: scm.SCMFit, dist: PlaceboDistribution, fit_filter_multiplier: float = 2.0
) -> PValueSeries:
    """Per-year and RMSPE-ratio permutation p-values.

    ``p_t = #{|placebo gap_t| > |treated gap_t|} / J_eff`` where ``J_eff``
    counts placebos passing the fit filter (applied once, not per year).
    """
    kept = _retained_for(treated_fit, dist, fit_filter_multiplier)
    j = len(kept)
    treated = np.abs(treated_fit.gaps.window(dist.post_years).values)
    placebo = np.abs(dist.gap_matrix(kept))
    p = (placebo > treated[None, :]).sum(axis=0) / j
    ratio = treated_fit.rmspe_ratio
    p_ratio = sum(d.rmspe_ratio > ratio for d in kept) / j
    return PValueSeries(treated_fit.unit_id, dist.post_years, p, j, float(p_ratio))


def min_draws(level: float) -> int:
    """Fewest draws for which both tails of a ``level`` band are resolved."""
    return math.ceil(1.0 / (1.0 - level) - 1e-9)


def empirical_ci(
    treated_fit: scm.SCMFit,
    dist: PlaceboDistribution,
    level: float = 0.95,
    fit_filter_multiplier: float = 2.0,
) -> EmpiricalCI:
    """Confidence band by inverting the placebo gap distribution.

    The placebo gaps approximate the estimation error under the null, so
    the effect lies in ``[gap - q_hi, gap - q_lo]`` with ``q_lo``/``q_hi`` the
    two-sided ``level`` quantiles (linear interpolation between order
    statistics).
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    kept = _retained_for(treated_fit, dist, fit_filter_multiplier)
    need = min_draws(level)
    if len(kept) < need:
        raise TooFewDraws(f"{len(kept)} retained placebo draws; level {level} needs at least {need}")
    g = dist.gap_matrix(kept)
    a = (1.0 - level) / 2.0
    q_lo = np.quantile(g, a, axis=0, method="linear")
    q_hi = np.quantile(g, 1.0 - a, axis=0, method="linear")
    gap = treated_fit.gaps.window(dist.post_years).values
    return EmpiricalCI(treated_fit.unit_id, dist.post_years, gap - q_hi, gap - q_lo, level)


# ---------------------------------------------------------------------------
# in-time placebo
# ---------------------------------------------------------------------------
def fake_design(design: StudyDesign, fake_t0: int) -> StudyDesign:
    """The study re-dated to ``fake_t0`` on data that ends before the real onset."""
    if fake_t0 >= design.t0:
        raise FakeT0NotBeforeTrueT0(f"fake t0 {fake_t0} must precede the true t0 {design.t0}")
    n_pre = sum(1 for y in design.dataset.years if y < fake_t0)
    if n_pre < MIN_PRE_YEARS_INTIME:
        raise WindowTooShort(
            f"fake t0 {fake_t0} leaves {n_pre} pre-period year(s); at least {MIN_PRE_YEARS_INTIME} required"
        )
    cfg = design.config
    lags = cfg.outcome_lag_years
    if lags is not None:
        lags = tuple(y for y in lags if y < fake_t0) or None
    te = cfg.training_end if cfg.training_end is not None and cfg.training_end < fake_t0 - 1 else None
    new_cfg = replace(cfg, t0=fake_t0, training_end=te, outcome_lag_years=lags)
    return build_study(design.dataset.truncate(design.t0 - 1), new_cfg)


@dataclass(frozen=True, eq=False)
class InTimeResult:
    fake_t0: int
    fits: tuple[scm.SCMFit, ...]
    pvalues: tuple[PValueSeries, ...]
    distribution: PlaceboDistribution
    untestable: tuple[str, ...] = ()  # no placebo passed the fit filter

    def share_significant(self, alpha: float = 0.05) -> float:
        if not self.pvalues:
            return float("nan")
        ps = np.concatenate([p.p for p in self.pvalues])
        return float(np.mean(ps < alpha))


def in_time_placebo(
    design: StudyDesign,
    fake_t0: int,
    unit_id: str | None = None,
    *,
    workers: int = 1,
    fit_filter_multiplier: float = 2.0,
    **fit_kwargs,
) -> tuple[scm.SCMFit, PValueSeries]:
    """Fit ``unit_id`` (default: the first treated unit) as if treated at ``fake_t0``.

    P-values over the fake post window come from an exhaustive in-space
    placebo run on the re-dated design.
    """
    res = in_time_placebo_all(
        design, fake_t0, [unit_id or design.treated_ids[0]],
        workers=workers, fit_filter_multiplier=fit_filter_multiplier, **fit_kwargs,
    )
    if res.untestable:
        raise EmptyAfterFilter(
            f"no placebo has pre-RMSPE within {fit_filter_multiplier}x that of {res.untestable[0]!r}"
        )
    return res.fits[0], res.pvalues[0]


def in_time_placebo_all(
    design: StudyDesign,
    fake_t0: int,
    unit_ids: Sequence[str] | None = None,
    *,
    workers: int = 1,
    fit_filter_multiplier: float = 2.0,
    **fit_kwargs,
) -> InTimeResult:
    """In-time placebo for several treated units sharing one placebo distribution.

    A unit whose fake pre-period fit is so close that no placebo passes the
    fit filter gets no p-values; it is logged and listed in ``untestable``.
    """
    fd = fake_design(design, fake_t0)
    ids = sorted(unit_ids if unit_ids is not None else fd.treated_ids)
    fits = scm.fit_units(fd, ids, workers=workers, **fit_kwargs)
    dist = run_permutation_engine(PermutationPlan.exhaustive(fd), workers=workers, **fit_kwargs)
    pvals, untestable = [], []
    for f in fits:
        try:
            pvals.append(placebo_pvalues(f, dist, fit_filter_multiplier))
        except EmptyAfterFilter as err:
            LOGGER.warning("in-time p-values for %s skipped: %s", f.unit_id, err)
            untestable.append(f.unit_id)
    return InTimeResult(fake_t0, tuple(fits), tuple(pvals), dist, tuple(untestable))


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Throughput:
    n_fits: int
    seconds: float
    n_failed: int

    @property
    def fits_per_second(self) -> float:
        return self.n_fits / self.seconds if self.seconds > 0 else math.inf


def measure_throughput(designs, n_fits: int, *, seed: int = 0, workers: int = 1, **fit_kwargs) -> Throughput:
    """Time ``n_fits`` placebo fits, cycling exhaustively through the designs' donors.

    ``designs`` is an iterable of :class:`StudyDesign` (for example one per
    seeded simulated panel); it is consumed until ``n_fits`` fits are done.
    """
    done = failed = 0
    start = time.perf_counter()
    for design in designs:
        n = min(n_fits - done, len(design.donor_ids))
        if n == len(design.donor_ids):
            plan = PermutationPlan.exhaustive(design)
        else:
            plan = PermutationPlan(design, n, seed=seed, mode="sampled")
        dist = run_permutation_engine(plan, workers=workers, **fit_kwargs)
        done += len(dist.draws) + len(dist.failures)
        failed += len(dist.failures)
        if done >= n_fits:
            break
    return Throughput(done, time.perf_counter() - start, failed)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------
PLACEBO_HEADER = ("draw_id", "pseudo_unit", "year", "gap")
PVALUE_HEADER = ("unit_id", "year", "p", "j_effective")
CI_HEADER = ("unit_id", "year", "lower", "upper")


def placebo_rows(dist: PlaceboDistribution):
    for d in dist.draws:
        for y, g in zip(dist.post_years, d.gaps):
            yield (d.draw_id, d.pseudo_unit, y, float(g))


def pvalue_rows(series: Sequence[PValueSeries]):
    for s in series:
        for y, p in zip(s.years, s.p):
            yield (s.unit_id, y, float(p), s.j_effective)


def ci_rows(cis: Sequence[EmpiricalCI]):
    for c in cis:
        for y, lo, hi in zip(c.years, c.lower, c.upper):
            yield (c.unit_id, y, float(lo), float(hi))
