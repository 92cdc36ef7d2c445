from pathlib import Path

import numpy as np
import pytest

from synthpanel import estimators, scm, simgen
from synthpanel.panel import PanelDataset, StudyConfig, Unit, build_study

REPO = Path(__file__).resolve().parents[1]
DATA = REPO / "data"


def small_spec(seed=0, **kw):
    base = dict(n_units=30, n_treated=3, n_years=30, t0_index=18, seed=seed)
    base.update(kw)
    return simgen.DGPSpec(**base)


def design_for(spec, **cfg):
    ds, truth = simgen.simulate_panel(spec)
    return build_study(ds, simgen.study_config_for(spec, **cfg)), truth


def make_dataset(outcome, years=None, ids=None, covariates=None, countries=None):
    outcome = np.asarray(outcome, dtype=float)
    n, t = outcome.shape
    ids = ids or [f"U{i:02d}" for i in range(n)]
    years = years or list(range(2000, 2000 + t))
    countries = countries or [""] * n
    units = tuple(Unit(u, u, c) for u, c in zip(ids, countries))
    return PanelDataset(units, tuple(years), outcome, covariates or {})


def block(Y, n_treated, n_pre, start=2000):
    """Estimator input with the first ``n_treated`` rows treated from column ``n_pre`` on."""
    Y = np.asarray(Y, dtype=float)
    N, T = Y.shape
    return estimators.PanelBlock(
        Y, n_treated, n_pre,
        tuple(f"T{i}" for i in range(n_treated)),
        tuple(f"D{i}" for i in range(N - n_treated)),
        tuple(range(start, start + T)),
    )


def factor_block(seed, N=30, T=20, n_treated=3, n_pre=12, r=2, effect=-1.5, noise=0.0):
    """Additive effects plus a rank-``r`` term; returns the block and the untreated matrix."""
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(N, r)) @ rng.normal(size=(r, T))
    Y = 5 + rng.normal(size=(N, 1)) + rng.normal(size=(1, T)).cumsum(axis=1) + L
    Y += noise * rng.normal(size=(N, T))
    cf = Y.copy()
    Y[:n_treated, n_pre:] += effect
    return block(Y, n_treated, n_pre), cf


def fake_fit(unit, pre_rmspe, post_gap=(-1.0,), synthetic=(10.0,), post_rmspe=None, start=2000):
    """Minimal fit carrying only what filtering, inference and aggregation read."""
    gap = np.asarray(post_gap, float)
    post = tuple(range(start, start + len(gap)))
    g = scm.GapSeries(post, gap, np.asarray(synthetic, float) * np.ones_like(gap))
    if post_rmspe is None:
        post_rmspe = float(np.sqrt(np.mean(gap**2)))
    return scm.SCMFit(
        unit, scm.WeightVector(np.ones(1)), scm.VMatrix(np.ones(1)), np.zeros(len(post)),
        g.synthetic, g, (), post, pre_rmspe, post_rmspe, (), np.zeros(0), 0.0, 0.0,
    )


@pytest.fixture(scope="session")
def small_design():
    return design_for(small_spec(seed=11))


@pytest.fixture(scope="session")
def example_config():
    return DATA / "example_study.json"


@pytest.fixture
def clone_design():
    """Treated unit ``T`` equals donor ``D2`` in every year and covariate."""
    rng = np.random.default_rng(5)
    n_don, n_years = 8, 24
    base = 100 + np.cumsum(rng.normal(1, 1, (n_don, n_years)), axis=1)
    x = rng.normal(size=(n_don, 1)) * np.ones((1, n_years))
    outcome = np.vstack([base[2], base])
    cov = {"x": np.vstack([x[2], x])}
    ids = ["T"] + [f"D{i}" for i in range(n_don)]
    ds = make_dataset(outcome, ids=ids, covariates=cov)
    return build_study(ds, StudyConfig(frozenset({"T"}), t0=2016))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
