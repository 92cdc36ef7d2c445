import numpy as np
import pytest

from synthpanel import inference as inf
from synthpanel import scm, simgen
from synthpanel.errors import (
    EmptyAfterFilter,
    FakeT0NotBeforeTrueT0,
    NotEnoughDonors,
    TooFewDraws,
    WindowTooShort,
)

from conftest import design_for, fake_fit, small_spec


def fake_dist(gaps, pre_rmspe=1.0, start=2000):
    """Placebo distribution from a (J, T) gap matrix."""
    gaps = np.atleast_2d(np.asarray(gaps, float))
    years = tuple(range(start, start + gaps.shape[1]))
    pre = np.broadcast_to(np.asarray(pre_rmspe, float), (gaps.shape[0],))
    draws = tuple(
        inf.PlaceboDraw(i, f"D{i:03d}", g, float(p), float(np.sqrt(np.mean(g**2))))
        for i, (g, p) in enumerate(zip(gaps, pre))
    )
    return inf.PlaceboDistribution(years, draws, {})


# -- p-values ------------------------------------------------------------------
def test_two_exceedances_in_hundred():
    g = np.linspace(-4, 4, 100)
    g[[7, 50]] = [-9.0, 6.0]
    p = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=(-5.0,)), fake_dist(g[:, None]))
    assert p.j_effective == 100
    assert p.p[0] == pytest.approx(0.02)


def test_extreme_gap_gives_zero_with_floor():
    dist = fake_dist(np.linspace(-1, 1, 50)[:, None])
    p = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=(-3.0,)), dist)
    assert p.p[0] == 0.0
    assert p.floor == pytest.approx(1 / 50)


def test_zero_gap_gives_one():
    rng = np.random.default_rng(0)
    p = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=(0.0,)), fake_dist(rng.normal(size=(40, 1))))
    assert p.p[0] == 1.0


def test_ties_do_not_exceed():
    p = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=(2.0,)), fake_dist([[2.0], [-2.0], [3.0], [1.0]]))
    assert p.p[0] == pytest.approx(0.25)


def test_fit_filter_sets_j_effective():
    gaps = np.full((10, 1), 5.0)
    pre = [1.0] * 6 + [2.0] * 2 + [2.5] * 2  # the last two exceed 2x
    p = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=(-1.0,)), fake_dist(gaps, pre))
    assert p.j_effective == 8
    assert p.p[0] == 1.0
    with pytest.raises(EmptyAfterFilter):
        inf.placebo_pvalues(fake_fit("T", 0.1, post_gap=(-1.0,)), fake_dist(gaps, pre))


def test_rmspe_ratio_pvalue():
    rng = np.random.default_rng(1)
    dist = fake_dist(rng.normal(size=(20, 5)))
    big = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=[10.0] * 5), dist)
    assert big.p_rmspe_ratio == 0.0
    ratios = sorted(d.rmspe_ratio for d in dist.draws)
    mid = fake_fit("T", 1.0, post_gap=[1.0] * 5, post_rmspe=ratios[14] + 1e-9)
    assert inf.placebo_pvalues(mid, dist).p_rmspe_ratio == pytest.approx(5 / 20)


def test_pvalues_are_multiples_and_monotone():
    rng = np.random.default_rng(2)
    dist = fake_dist(rng.normal(size=(37, 6)))
    prev = None
    for scale in (0.0, 0.5, 1.0, 2.0, 4.0):
        p = inf.placebo_pvalues(fake_fit("T", 1.0, post_gap=scale * np.ones(6)), dist)
        k = p.p * p.j_effective
        np.testing.assert_allclose(k, np.round(k), atol=1e-12)
        assert np.all((0 <= p.p) & (p.p <= 1))
        if prev is not None:
            assert np.all(p.p <= prev)
        prev = p.p


# -- confidence bands ------------------------------------------------------------
def test_ci_collapses_on_zero_placebos():
    ci = inf.empirical_ci(fake_fit("T", 1.0, post_gap=(-2.0, -3.0)), fake_dist(np.zeros((25, 2))))
    np.testing.assert_array_equal(ci.lower, [-2.0, -3.0])
    np.testing.assert_array_equal(ci.upper, [-2.0, -3.0])


def test_ci_uniform_half_width():
    dist = fake_dist(np.linspace(-1, 1, 21)[:, None])
    ci = inf.empirical_ci(fake_fit("T", 1.0, post_gap=(-4.0,)), dist)
    assert (ci.upper[0] - ci.lower[0]) / 2 == pytest.approx(0.95, abs=1e-12)
    assert (ci.upper[0] + ci.lower[0]) / 2 == pytest.approx(-4.0)


def test_ci_nested_levels():
    rng = np.random.default_rng(3)
    dist = fake_dist(rng.standard_t(3, size=(150, 4)))
    fit = fake_fit("T", 1.0, post_gap=(-1.0, 0.0, 2.0, 0.5))
    a = inf.empirical_ci(fit, dist, 0.95)
    b = inf.empirical_ci(fit, dist, 0.99)
    assert np.all(b.lower <= a.lower) and np.all(a.upper <= b.upper)
    assert np.all(a.lower <= a.upper)


def test_ci_needs_enough_draws():
    with pytest.raises(TooFewDraws):
        inf.empirical_ci(fake_fit("T", 1.0), fake_dist(np.zeros((19, 1))))
    with pytest.raises(TooFewDraws):
        inf.empirical_ci(fake_fit("T", 1.0), fake_dist(np.zeros((50, 1))), level=0.99)
    assert inf.min_draws(0.95) == 20 and inf.min_draws(0.99) == 100


# -- permutation engine ------------------------------------------------------------
def test_plan_validation(small_design):
    design, _ = small_design
    with pytest.raises(ValueError):
        inf.PermutationPlan(design, 5, mode="exhaustive")
    with pytest.raises(NotEnoughDonors):
        inf.PermutationPlan(design, len(design.donor_ids) + 1, mode="sampled")
    with pytest.raises(ValueError):
        inf.PermutationPlan(design, 3, mode="sampled", statistic="t")


def test_pool_returns_treated_and_drops_self(small_design):
    design, _ = small_design
    plan = inf.PermutationPlan.exhaustive(design)
    d = design.donor_ids[4]
    pool = plan.pool_for(d)
    assert d not in pool
    assert set(design.treated_ids) <= set(pool)
    assert len(pool) == len(design.donor_ids) - 1 + len(design.treated_ids)


def test_sampled_draws_deterministic(small_design):
    design, _ = small_design
    a = inf.PermutationPlan(design, 8, seed=7, mode="sampled").pseudo_units()
    b = inf.PermutationPlan(design, 8, seed=7, mode="sampled").pseudo_units()
    c = inf.PermutationPlan(design, 8, seed=8, mode="sampled").pseudo_units()
    assert a == b and a != c
    assert len(set(a)) == 8


def test_exhaustive_over_ten_donors():
    design, _ = design_for(small_spec(seed=4, n_units=13, n_treated=3))
    dist = inf.run_permutation_engine(inf.PermutationPlan.exhaustive(design))
    assert len(dist) + len(dist.failures) == 10
    assert sorted(d.pseudo_unit for d in dist.draws) == sorted(design.donor_ids)
    for d in dist.draws:
        assert d.rmspe_ratio == pytest.approx(d.post_rmspe / d.pre_rmspe)


def test_placebo_matches_direct_fit(small_design):
    design, _ = small_design
    plan = inf.PermutationPlan(design, 2, seed=1, mode="sampled")
    dist = inf.run_permutation_engine(plan)
    d = dist.draws[0]
    direct = scm.fit_unit(design, d.pseudo_unit, plan.pool_for(d.pseudo_unit))
    np.testing.assert_array_equal(d.gaps, direct.post_gaps.values)


def test_worker_count_irrelevant(small_design):
    design, _ = small_design
    plan = inf.PermutationPlan(design, 6, seed=3, mode="sampled")
    a = inf.run_permutation_engine(plan, workers=1)
    b = inf.run_permutation_engine(plan, workers=3)
    assert [d.pseudo_unit for d in a.draws] == [d.pseudo_unit for d in b.draws]
    for x, y in zip(a.draws, b.draws):
        assert x.gaps.tobytes() == y.gaps.tobytes()
        assert x.pre_rmspe == y.pre_rmspe


@pytest.mark.slow
def test_null_placebo_gaps_centred():
    means = []
    for seed in range(100):
        design, _ = design_for(small_spec(seed=1000 + seed))
        dist = inf.run_permutation_engine(inf.PermutationPlan(design, 3, seed=seed, mode="sampled"))
        means.append(dist.gap_matrix().mean())
    means = np.asarray(means)
    assert abs(means.mean()) <= 3 * means.std(ddof=1) / np.sqrt(len(means))


# -- in-time placebo ---------------------------------------------------------------
def test_fake_t0_must_precede(small_design):
    design, _ = small_design
    with pytest.raises(FakeT0NotBeforeTrueT0):
        inf.in_time_placebo(design, design.t0)
    with pytest.raises(WindowTooShort):
        inf.fake_design(design, design.dataset.years[4])
    fd = inf.fake_design(design, design.dataset.years[5])
    assert fd.post_years[-1] == design.t0 - 1


def test_in_time_structure(small_design):
    design, _ = small_design
    fake = design.dataset.years[10]
    fit, p = inf.in_time_placebo(design, fake)
    assert fit.unit_id == design.treated_ids[0]
    assert fit.post_years == tuple(range(fake, design.t0))
    assert p.years == fit.post_years
    res = inf.in_time_placebo_all(design, fake)
    assert [f.unit_id for f in res.fits] == sorted(design.treated_ids)
    assert len(res.distribution) + len(res.distribution.failures) == len(design.donor_ids)


@pytest.mark.slow
@pytest.mark.filterwarnings("ignore::UserWarning")
def test_in_time_window_is_quiet():
    # the effect only starts at t0, so the fake window has nothing to find
    pct = []
    for seed in range(1, 6):
        spec = simgen.DGPSpec(seed=seed, effect="-38pct")
        design, _ = design_for(spec)
        fd = inf.fake_design(design, 1970)
        pct += [f.mean_post_percent for f in scm.fit_units(fd)]
    assert abs(np.mean(pct)) < 0.02
    assert np.median(np.abs(pct)) < 0.02


def test_throughput_counts_fits(small_design):
    design, _ = small_design
    tp = inf.measure_throughput([design], 5, seed=0)
    assert tp.n_fits == 5 and tp.fits_per_second > 0


def test_tables(small_design):
    design, _ = small_design
    dist = inf.run_permutation_engine(inf.PermutationPlan(design, 20, seed=0, mode="sampled"))
    fit = scm.fit_unit(design, "T001")
    rows = list(inf.placebo_rows(dist))
    assert len(rows) == len(dist) * len(design.post_years)
    assert len(rows[0]) == len(inf.PLACEBO_HEADER)
    p = inf.placebo_pvalues(fit, dist)
    assert len(list(inf.pvalue_rows([p]))) == len(design.post_years)
    ci = inf.empirical_ci(fit, dist, fit_filter_multiplier=np.inf)
    assert all(r[2] <= r[3] for r in inf.ci_rows([ci]))


def test_in_time_unit_without_comparable_placebos(small_design):
    design, _ = small_design
    fake = design.dataset.years[10]
    # a multiplier of zero leaves no placebo for any unit
    res = inf.in_time_placebo_all(design, fake, fit_filter_multiplier=0.0)
    assert res.untestable == tuple(sorted(design.treated_ids))
    assert res.pvalues == () and np.isnan(res.share_significant())
    with pytest.raises(EmptyAfterFilter):
        inf.in_time_placebo(design, fake, fit_filter_multiplier=0.0)
