"""Latent-factor panel simulator with injected treatment effects.

Untreated potential outcomes follow

    log Y_it = base + delta_t + theta_t . Z_i + lambda_t . mu_i + eps_it

and treated units are multiplied by ``1 + effect_t`` from ``t0`` on, so
percent effects compose multiplicatively and levels stay positive.  The
returned :class:`Truth` carries the exact injected effect.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidSpec
from .panel import PanelDataset, Unit

EFFECT_KINDS = ("none", "constant", "ramp", "transitory")


@dataclass(frozen=True)
class EffectSpec:
    """Per-post-year proportional effect.

    ``constant``: ``magnitude`` every post year.  ``ramp``: linear from 0 to
    ``magnitude`` over ``ramp_years`` years (endpoint reached in the last ramp
    year), flat afterwards.  ``transitory``: ``magnitude * recovery ** k`` in
    post year ``k``.
    """

    kind: str = "none"
    magnitude: float = 0.0
    ramp_years: int = 10
    recovery: float = 0.8

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise InvalidSpec(f"unknown effect kind {self.kind!r}")
        if self.magnitude <= -1.0:
            raise InvalidSpec("proportional effect must exceed -100%")
        if self.kind == "ramp" and self.ramp_years < 1:
            raise InvalidSpec("ramp_years must be >= 1")
        if self.kind == "transitory" and not 0.0 <= self.recovery <= 1.0:
            raise InvalidSpec("recovery rate must lie in [0, 1]")

    def series(self, n_post: int) -> np.ndarray:
        k = np.arange(n_post, dtype=float)
        if self.kind == "none":
            return np.zeros(n_post)
        if self.kind == "constant":
            return np.full(n_post, float(self.magnitude))
        if self.kind == "ramp":
            if self.ramp_years == 1:
                return np.full(n_post, float(self.magnitude))
            return self.magnitude * np.minimum(k / (self.ramp_years - 1), 1.0)
        return self.magnitude * self.recovery**k

    @classmethod
    def parse(cls, text: str) -> "EffectSpec":
        """Parse ``none``, ``-38pct``, ``ramp:-40pct:10`` or ``transitory:-60pct:0.8``."""
        text = text.strip().lower()
        if text in ("", "none", "0", "0pct"):
            return cls()

        def pct(tok: str) -> float:
            m = re.fullmatch(r"([+-]?\d+(?:\.\d+)?)(pct|%)?", tok)
            if not m:
                raise InvalidSpec(f"cannot parse effect magnitude {tok!r}")
            val = float(m.group(1))
            return val / 100.0 if m.group(2) else val

        parts = text.split(":")
        if len(parts) == 1:
            return cls("constant", pct(parts[0]))
        kind = parts[0]
        if kind == "constant" and len(parts) == 2:
            return cls("constant", pct(parts[1]))
        if kind == "ramp" and len(parts) in (2, 3):
            return cls("ramp", pct(parts[1]), ramp_years=int(parts[2]) if len(parts) == 3 else 10)
        if kind == "transitory" and len(parts) in (2, 3):
            return cls("transitory", pct(parts[1]), recovery=float(parts[2]) if len(parts) == 3 else 0.8)
        raise InvalidSpec(f"cannot parse effect spec {text!r}")


@dataclass(frozen=True)
class DGPSpec:
    """Simulation parameters.

    Defaults mirror a 1950-2015 panel with onset in 1988: 100 units, 10
    treated, 66 years, two latent factors and three static predictors.
    ``treated_spread`` scales the dispersion of treated units' attributes
    relative to donors (values below 1 keep them inside the donor hull;
    1 makes all units exchangeable). With ``log_space=False`` the untreated
    outcome is ``exp(base_level) * (1 + index)``, linear in the attributes.
    """

    n_units: int = 100
    n_treated: int = 10
    n_years: int = 66
    t0_index: int = 38
    r_true: int = 2
    n_covariates: int = 3
    start_year: int = 1950
    base_level: float = 8.5
    growth: float = 0.025
    delta_sd: float = 0.02
    theta_sd: float = 0.15
    theta_drift_sd: float = 0.01
    lambda_sd: float = 0.03
    mu_scale: float = 1.0
    noise_sd: float = 0.01
    treated_spread: float = 0.6
    effect: EffectSpec = field(default_factory=EffectSpec)
    effect_dispersion: float = 0.0
    log_space: bool = True
    n_countries: int = 10
    n_republics: int = 5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.effect, str):
            object.__setattr__(self, "effect", EffectSpec.parse(self.effect))
        if self.n_units < 2 or not 0 <= self.n_treated < self.n_units:
            raise InvalidSpec("need 0 <= n_treated < n_units and n_units >= 2")
        if not 0 < self.t0_index < self.n_years:
            raise InvalidSpec("t0_index must lie strictly inside (0, n_years)")
        if self.noise_sd < 0 or self.mu_scale < 0 or self.treated_spread < 0:
            raise InvalidSpec("dispersion parameters must be non-negative")
        if self.r_true < 0 or self.n_covariates < 0:
            raise InvalidSpec("r_true and n_covariates must be non-negative")
        if self.effect_dispersion < 0:
            raise InvalidSpec("effect_dispersion must be non-negative")

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(range(self.start_year, self.start_year + self.n_years))

    @property
    def t0(self) -> int:
        return self.start_year + self.t0_index

    def with_seed(self, seed: int) -> "DGPSpec":
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class Truth:
    """Injected effect for each treated unit over the post years."""

    treated_ids: tuple[str, ...]
    post_years: tuple[int, ...]
    effect_level: np.ndarray
    effect_percent: np.ndarray
    untreated: np.ndarray

    @property
    def att_percent(self) -> float:
        return float(self.effect_percent.mean())

    @property
    def att_level(self) -> float:
        return float(self.effect_level.mean())


def unit_ids(spec: DGPSpec) -> tuple[list[str], list[str]]:
    treated = [f"T{i + 1:03d}" for i in range(spec.n_treated)]
    donors = [f"D{i + 1:03d}" for i in range(spec.n_units - spec.n_treated)]
    return treated, donors


def _components(spec: DGPSpec):
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    T, N, K, r = spec.n_years, spec.n_units, spec.n_covariates, spec.r_true
    nt = spec.n_treated
    delta = np.cumsum(spec.growth + spec.delta_sd * rng.standard_normal(T))
    theta0 = spec.theta_sd * rng.standard_normal(K)
    theta = theta0 + np.cumsum(spec.theta_drift_sd * rng.standard_normal((T, K)), axis=0)
    lam = 0.1 * rng.standard_normal(r) + np.cumsum(spec.lambda_sd * rng.standard_normal((T, r)), axis=0)
    Z = rng.standard_normal((N, K))
    mu = spec.mu_scale * rng.standard_normal((N, r))
    Z[:nt] *= spec.treated_spread
    mu[:nt] *= spec.treated_spread
    eps = spec.noise_sd * rng.standard_normal((N, T))
    unit_scale = np.exp(spec.effect_dispersion * rng.standard_normal(nt))
    index = delta[None, :] + Z @ theta.T + mu @ lam.T + eps
    # level mode stays linear in (Z, mu) so convex replication is exact
    untreated = np.exp(spec.base_level + index) if spec.log_space else np.exp(spec.base_level) * (1.0 + index)
    effect_pct = spec.effect.series(T - spec.t0_index)[None, :] * unit_scale[:, None]
    return untreated, Z, effect_pct


def simulate_panel(spec: DGPSpec) -> tuple[PanelDataset, Truth]:
    """Generate the observed panel and the exact injected effect."""
    untreated, Z, effect_pct = _components(spec)
    nt, t0 = spec.n_treated, spec.t0_index
    if np.any(effect_pct <= -1.0):
        raise InvalidSpec("effect dispersion produced an effect at or below -100%")
    observed = untreated.copy()
    observed[:nt, t0:] = untreated[:nt, t0:] * (1.0 + effect_pct)
    level = observed[:nt, t0:] - untreated[:nt, t0:]

    treated, donors = unit_ids(spec)
    ids = treated + donors
    units = []
    for i, uid in enumerate(ids):
        if i < nt:
            country = f"R{i % max(spec.n_republics, 1) + 1}"
        else:
            country = f"C{(i - nt) % max(spec.n_countries, 1) + 1:02d}"
        units.append(Unit(uid, f"region {uid}", country, capital_flag=False))
    covariates = {
        f"z{k + 1}": np.repeat(Z[:, k : k + 1], spec.n_years, axis=1) for k in range(spec.n_covariates)
    }
    meta = {
        "source": "synthpanel.simgen",
        "seed": str(spec.seed),
        "outcome_units": "per-capita output, simulated",
    }
    dataset = PanelDataset(tuple(units), spec.years, observed, covariates, meta)
    truth = Truth(
        tuple(treated), spec.years[t0:], level, effect_pct.copy(), untreated[:nt].copy()
    )
    return dataset, truth


def true_att(spec: DGPSpec) -> Truth:
    """The injected effect alone, without assembling a panel.

    Levels depend on the untreated paths, which are regenerated from the
    seed; the result matches :func:`simulate_panel` exactly.
    """
    untreated, _, effect_pct = _components(spec)
    nt, t0 = spec.n_treated, spec.t0_index
    level = untreated[:nt, t0:] * (1.0 + effect_pct) - untreated[:nt, t0:]
    treated, _ = unit_ids(spec)
    return Truth(tuple(treated), spec.years[t0:], level, effect_pct.copy(), untreated[:nt].copy())


def study_config_for(spec: DGPSpec, **overrides):
    from .panel import StudyConfig

    treated, _ = unit_ids(spec)
    kwargs = dict(treated_ids=frozenset(treated), t0=spec.t0)
    kwargs.update(overrides)
    return StudyConfig(**kwargs)
