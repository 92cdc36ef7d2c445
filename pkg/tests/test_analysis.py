import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synthpanel import analysis as an
from synthpanel.errors import (
    Collinear,
    MissingColumn,
    NonNumericValue,
    SharesNotNormalized,
    TooFewClusters,
    TooFewWeights,
)

from oracles import sandwich_cr1


# -- ethnic indices ----------------------------------------------------------------
@pytest.mark.parametrize(
    "shares, expected",
    [((1.0,), (0.0, 1.0, 0.0)), ((0.5, 0.5), (0.5, 0.5, 1.0)), ((1 / 3,) * 3, (2 / 3, 1 / 3, 8 / 9))],
)
def test_ethnic_examples(shares, expected):
    np.testing.assert_allclose(an.ethnic_indices(shares), expected, atol=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=20).filter(lambda v: sum(v) > 0))
def test_fractionalization_plus_hhi_is_one(raw):
    s = np.asarray(raw) / np.sum(raw)
    frac, hhi, pol = an.ethnic_indices(s)
    assert frac + hhi == 1.0
    assert 0.0 <= pol <= 1.0 + 1e-12


@pytest.mark.parametrize("shares", [(0.5, 0.6), (-0.1, 1.1), (), (math.nan, 1.0)])
def test_shares_rejected(shares):
    with pytest.raises(SharesNotNormalized):
        an.ethnic_indices(shares)


# -- regression ----------------------------------------------------------------------
def test_exact_fe_fit():
    rng = np.random.default_rng(0)
    rep = np.repeat(["A", "B", "C"], 5)
    x = rng.normal(size=15)
    y = 2.0 * x + np.select([rep == "A", rep == "B"], [1.0, -3.0], 7.5)
    res = an.ols_cluster(y, x, fe=rep, clusters=rep, names=["x"])
    assert res.coef[0] == pytest.approx(2.0, abs=1e-9)
    assert res.r2 == pytest.approx(1.0, abs=1e-12)
    assert res.n_fe_groups == 3 and res.n_clusters == 3


EIGHT = dict(
    y=np.array([1.0, 2.5, 2.0, 4.5, 3.0, 5.5, 4.0, 7.0]),
    x=np.array([0.5, 1.0, 1.5, 2.0, 1.0, 2.5, 2.0, 3.5]),
    z=np.array([1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]),
    g=np.array(["a"] * 4 + ["b"] * 4),
)


def test_sandwich_eight_rows_no_fe():
    X = np.column_stack([EIGHT["x"], EIGHT["z"]])
    res = an.ols_cluster(EIGHT["y"], X, clusters=EIGHT["g"])
    beta, se = sandwich_cr1(EIGHT["y"], np.column_stack([np.ones(8), X]), list(EIGHT["g"]))
    np.testing.assert_allclose(res.coef, beta[1:], rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.se, se[1:], rtol=0, atol=1e-9)


def test_sandwich_eight_rows_with_fe():
    res = an.ols_cluster(EIGHT["y"], EIGHT["x"], fe=EIGHT["g"], clusters=EIGHT["g"])
    dummies = np.column_stack([EIGHT["g"] == "a", EIGHT["g"] == "b"]).astype(float)
    beta, se = sandwich_cr1(EIGHT["y"], np.column_stack([EIGHT["x"], dummies]), list(EIGHT["g"]))
    assert res.coef[0] == pytest.approx(beta[0], abs=1e-12)
    assert res.se[0] == pytest.approx(se[0], abs=1e-9)


def test_regression_errors():
    with pytest.raises(TooFewClusters):
        an.ols_cluster(EIGHT["y"], EIGHT["x"], clusters=np.zeros(8))
    with pytest.raises(Collinear):
        an.ols_cluster(EIGHT["y"], np.column_stack([EIGHT["x"], 2 * EIGHT["x"]]), clusters=EIGHT["g"])
    with pytest.raises(Collinear):
        an.ols_cluster(EIGHT["y"][:2], EIGHT["x"][:2], clusters=EIGHT["g"][:2])


def features(n=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sh = rng.dirichlet(np.ones(3))
        out.append(an.RegionFeatures(
            f"U{i:02d}", f"R{i % 3}", tuple(sh / sh.sum()),
            ln_popdensity_pre=rng.normal(), ln_popdensity_post=rng.normal(),
            ln_popsize_pre=rng.normal(), ln_popsize_post=rng.normal(),
            latitude=40 + rng.normal(), inv_dist_coast=rng.uniform(),
            years_habsburg=rng.integers(0, 400), years_ottoman=rng.integers(0, 400),
            fraction_largest_minority=rng.uniform(0, 0.4),
        ))
    return out


def test_gap_correlates_drops_incomplete():
    feats = features()
    gaps = {f.unit_id: -0.3 + 0.1 * f.latitude / 40 for f in feats}
    del gaps["U03"]
    res = an.gap_correlates(feats, gaps, ["latitude"])
    assert res.dropped == ("U03",)
    assert res.n == 11 and res.n_clusters == 3
    assert res.coef[0] == pytest.approx(0.1 / 40)


def test_table2_columns():
    feats = features(15, seed=1)
    gaps = {f.unit_id: float(np.random.default_rng(i).normal()) for i, f in enumerate(feats)}
    res = an.table2(feats, gaps, fe=False, cluster_by="unit")
    assert sorted(res) == list(range(1, 12))
    assert res[4].names == ("hhi",)
    assert "hhi" not in res[11].names and len(res[11].names) == 9
    header, rows = an.table2_rows(res)
    assert header[1] == "(1)" and len(header) == 12
    assert rows[-2][0] == "observations"


def test_load_features(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text(
        "unit_id,republic_id,share_a,share_b,latitude,years_ottoman\n"
        "U1,R1,0.25,0.75,45.1,100\n"
        "U2,R2,,,44.0,\n"
    )
    a, b = an.load_features(p)
    assert a.group_shares == (0.25, 0.75) and a.latitude == 45.1
    assert b.group_shares == () and math.isnan(b.years_ottoman)
    assert math.isnan(a.inv_dist_coast)
    p.write_text("unit_id,republic_id,latitude\nU1,R1,north\n")
    with pytest.raises(NonNumericValue, match="north"):
        an.load_features(p)
    p.write_text("unit_id,latitude\nU1,4\n")
    with pytest.raises(MissingColumn):
        an.load_features(p)


# -- Benford -----------------------------------------------------------------------------
def benford_exact(n=9000):
    counts = np.floor(an.BENFORD * n).astype(int)
    counts[0] += n - counts.sum()
    rng = np.random.default_rng(0)
    w = [(d + rng.uniform()) * 10.0 ** -rng.integers(1, 4) for d, c in zip(range(1, 10), counts) for _ in range(c)]
    return np.asarray(w)


def test_benford_exact_sample():
    rep = an.benford_weights(benford_exact())
    assert rep.n_weights == 9000
    assert rep.chi2 < 1.0
    assert rep.p_value > 0.5


def test_benford_all_ones():
    w = np.random.default_rng(1).uniform(0.1, 0.2, 200)
    rep = an.benford_weights(w)
    assert rep.counts[0] == 200
    assert rep.p_value < 0.001


def test_benford_too_few():
    with pytest.raises(TooFewWeights):
        an.benford_weights(np.full(10, 0.1))
    with pytest.raises(TooFewWeights):
        an.benford_weights(np.full(100, 1e-6))  # all below the sparsity threshold


@pytest.mark.parametrize("x, d", [(0.00731, 7), (1.0, 1), (9.99, 9), (0.1, 1), (123456.0, 1), (2e-300, 2)])
def test_first_digit(x, d):
    assert an.first_digit(x) == d


def test_benford_rows():
    rep = an.benford_weights(benford_exact(900))
    rows = list(an.benford_rows(rep))
    assert [r[0] for r in rows] == list(range(1, 10))
    assert sum(r[1] for r in rows) == 900
