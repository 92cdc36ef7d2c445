"""Command-line front end.

Every subcommand reads a JSON study configuration (``--config``), writes
its tables atomically under ``--out`` and finishes with ``manifest.json``
listing the inputs, parameters and every emitted file with its digest.

Exit status: 0 on success, 1 when the input fails validation, 2 on any
other error.  Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, estimators, inference, scm, simgen
from .errors import PanelError, SynthPanelError, InvalidDesign
from .io import dumps_json, fmt, sha256_file, write_json, write_table
from .panel import load_config, load_panel, validate_design, build_study, write_panel

LOGGER = logging.getLogger("synthpanel")

CONFIG_EXTRA_KEYS = ("panel", "features", "effects")
STOCHASTIC = ("placebo", "did", "gsc", "mc", "sdid", "table1", "simulate")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _ValidationFailed(Exception):
    """Raised when ``validate`` finds errors; the report is already written."""


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------
class Run:
    """Output directory, stage timings and the manifest for one invocation."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.outputs: list[str] = []
        self.inputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.config_hash: str | None = None
        self.extra: dict = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def add_input(self, label: str, path) -> None:
        self.inputs[label] = sha256_file(path)

    def table(self, name: str, header, rows) -> None:
        write_table(self.out / name, header, rows)
        self._register(name)

    def json(self, name: str, obj) -> None:
        write_json(self.out / name, obj)
        self._register(name)

    def _register(self, name: str) -> None:
        if name not in self.outputs:
            self.outputs.append(name)

    def manifest(self) -> dict:
        a = self.args
        params = {
            k: getattr(a, k)
            for k in ("draws", "fake_t0", "donor_filter", "effect", "estimators", "boot", "level")
            if getattr(a, k, None) is not None
        }
        return {
            "tool": "synthpanel",
            "version": __version__,
            "subcommand": a.command,
            "seed": a.seed,
            "config_sha256": self.config_hash,
            "parameters": params,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": [
                {"path": n, "sha256": sha256_file(self.out / n)} for n in sorted(self.outputs)
            ],
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            **self.extra,
        }

    def write_manifest(self) -> None:
        write_json(self.out / "manifest.json", self.manifest())


def _canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=sorted)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load(run: Run):
    """Configuration, panel and study design, with flag overrides applied."""
    args = run.args
    if args.config is None:
        raise PanelError("--config is required for this subcommand")
    cfg_path = Path(args.config)
    config, raw = load_config(cfg_path, extra_keys=CONFIG_EXTRA_KEYS)
    run.add_input("config", cfg_path)
    if args.donor_filter is not None:
        from dataclasses import replace

        config = replace(config, donor_filter=frozenset(_split(args.donor_filter)))
    if "panel" not in raw:
        raise PanelError("configuration lacks the 'panel' key")
    panel_path = _resolve(cfg_path.parent, raw["panel"])
    dataset = load_panel(panel_path)
    run.add_input("panel", panel_path)
    effective = dict(raw, **config.to_dict())
    run.config_hash = _canonical_hash(effective)
    return config, raw, dataset, cfg_path.parent


def _design(run: Run):
    config, raw, dataset, base = _load(run)
    with run.stage("validate"):
        design = build_study(dataset, config)
    return design, raw, base


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_validate(run: Run) -> None:
    config, _, dataset, _ = _load(run)
    with run.stage("validate"):
        report = validate_design(dataset, config)
    body = report.to_dict()
    body["n_units"] = len(dataset.units)
    body["years"] = [dataset.years[0], dataset.years[-1]]
    run.json("validation.json", body)
    for issue in report.issues:
        print(f"{issue.severity}: {issue.code}: {issue.message}")
    print(f"{len(report.errors)} error(s), {len(report.warnings)} warning(s)")
    if not report.ok:
        run.write_manifest()
        raise _ValidationFailed()


def _fit_summary(fits, retained_ids) -> list[tuple]:
    rows = []
    for f in fits:
        rows.append((
            f.unit_id, f.pre_rmspe, f.post_rmspe, f.rmspe_ratio, f.mean_post_gap,
            f.mean_post_percent, len(f.weights.active_support), f.relative_imbalance,
            int(f.unit_id in retained_ids),
        ))
    return rows


EFFECTS_HEADER = (
    "unit_id", "pre_rmspe", "post_rmspe", "rmspe_ratio", "mean_post_gap",
    "mean_post_percent", "n_active_donors", "relative_imbalance", "retained",
)


def cmd_fit(run: Run) -> None:
    design, _, _ = _design(run)
    with run.stage("fit"):
        fits = scm.fit_units(design, design.treated_ids, workers=run.args.workers)
        retained, dropped = scm.filter_fits(fits)
        agg = scm.aggregate_ate(retained)
    kept = {f.unit_id for f in retained}
    run.table("gaps.csv", scm.GAPS_HEADER, scm.gaps_rows(fits))
    run.table("weights.csv", scm.WEIGHTS_HEADER, scm.weights_rows(fits))
    run.table("effects.csv", EFFECTS_HEADER, _fit_summary(fits, kept))
    run.json("fit.json", {
        "ate_level": agg.ate_level,
        "ate_percent": agg.ate_percent,
        "n_fitted": len(fits),
        "n_retained": agg.n_units,
        "dropped": [f.unit_id for f in dropped],
        "post_years": list(agg.post_years),
        "year_wise_level": agg.year_wise_level,
        "year_wise_percent": agg.year_wise_percent,
        "v": {f.unit_id: dict(zip(f.predictor_names, map(float, f.v.v))) for f in fits},
    })
    print(f"ATE {fmt(agg.ate_level)} ({fmt(100 * agg.ate_percent)}%) over {agg.n_units} of {len(fits)} units")


def _plan(run: Run, design):
    n = run.args.draws
    if n is not None and n > len(design.donor_ids):
        LOGGER.warning("%d draws requested but only %d donors; running every donor once", n, len(design.donor_ids))
    if n is None or n >= len(design.donor_ids):
        return inference.PermutationPlan.exhaustive(design, seed=run.args.seed)
    return inference.PermutationPlan(design, n, seed=run.args.seed, mode="sampled")


def _pvalues_and_cis(fits, dist, level):
    pvals, cis, skipped = [], [], {}
    for f in fits:
        try:
            pvals.append(inference.placebo_pvalues(f, dist))
        except SynthPanelError as exc:
            skipped[f.unit_id] = f"{exc.code}: {exc}"
            continue
        try:
            cis.append(inference.empirical_ci(f, dist, level=level))
        except SynthPanelError as exc:
            skipped[f.unit_id] = f"{exc.code}: {exc}"
    return pvals, cis, skipped


def cmd_placebo(run: Run) -> None:
    design, _, _ = _design(run)
    args = run.args
    with run.stage("fit"):
        fits = scm.fit_units(design, design.treated_ids, workers=args.workers)
    plan = _plan(run, design)
    with run.stage("placebo"):
        dist = inference.run_permutation_engine(plan, workers=args.workers)
    pvals, cis, skipped = _pvalues_and_cis(fits, dist, args.level)
    run.table("placebo_gaps.csv", inference.PLACEBO_HEADER, inference.placebo_rows(dist))
    run.table("pvalues.csv", inference.PVALUE_HEADER, inference.pvalue_rows(pvals))
    run.table("ci.csv", inference.CI_HEADER, inference.ci_rows(cis))
    run.json("placebo.json", {
        "plan": plan.echo(),
        "n_draws": len(dist.draws),
        "failures": [{"draw_id": i, "unit": u, "error": e} for i, u, e in dist.failures],
        "rmspe_ratio_p": {p.unit_id: p.p_rmspe_ratio for p in pvals},
        "j_effective": {p.unit_id: p.j_effective for p in pvals},
        "skipped": skipped,
        "level": args.level,
    })
    n_fits = len(dist.draws) + len(dist.failures)
    secs = run.timings["placebo"]
    run.timings["placebo_fits_per_second"] = n_fits / secs if secs > 0 else float("inf")
    print(f"{n_fits} placebo fits, {fmt(run.timings['placebo_fits_per_second'])} fits/s")


def cmd_intime(run: Run) -> None:
    design, _, _ = _design(run)
    args = run.args
    if args.fake_t0 is None:
        raise PanelError("intime needs --fake-t0")
    with run.stage("intime"):
        res = inference.in_time_placebo_all(design, args.fake_t0, workers=args.workers)
    run.table("gaps.csv", scm.GAPS_HEADER, scm.gaps_rows(res.fits))
    run.table("pvalues.csv", inference.PVALUE_HEADER, inference.pvalue_rows(res.pvalues))
    run.json("intime.json", {
        "fake_t0": res.fake_t0,
        "share_significant_5pct": res.share_significant(0.05),
        "mean_fake_post_percent": {f.unit_id: f.mean_post_percent for f in res.fits},
        "rmspe_ratio_p": {p.unit_id: p.p_rmspe_ratio for p in res.pvalues},
        "untestable": list(res.untestable),
        "n_placebo_draws": len(res.distribution.draws),
    })
    print(f"fake t0 {res.fake_t0}: {fmt(100 * res.share_significant(0.05))}% of years with p < 0.05")


ESTIMATOR_HEADER = ("estimator", "att", "se", "ci_low", "ci_high", "p_value", "n_draws")


def _estimate_out(run: Run, name: str, label: str, est, n: int, extra: dict) -> None:
    cells = estimators._cells(name, est)
    run.table(f"{label}.csv", ESTIMATOR_HEADER, [(name, *[cells[k] for k in estimators.TABLE1_STATS], n)])
    run.json(f"{label}.json", {"estimator": name, **cells, "n_draws": n, **extra})
    print(f"{name}: ATT {fmt(cells['att'])} (se {fmt(cells['se'])}, p {fmt(cells['p_value'])})")


def cmd_did(run: Run) -> None:
    design, _, _ = _design(run)
    n = run.args.draws if run.args.draws is not None else estimators.N_PERM
    with run.stage("did"):
        est = estimators.twfe_did(design, n_perm=n, seed=run.args.seed, level=run.args.level)
    _estimate_out(run, "twfe_did", "did", est, est.n_draws, {"clusters": est.detail.get("clusters")})


def cmd_gsc(run: Run) -> None:
    design, _, _ = _design(run)
    a = run.args
    n = a.draws if a.draws is not None else estimators.N_PERM
    boot = a.boot if a.boot is not None else estimators.N_BOOT
    with run.stage("gsc"):
        est = estimators.ife_gsc(design, n_boot=boot, n_perm=n, seed=a.seed, level=a.level)
    _estimate_out(run, "ife_gsc", "gsc", est, n, {
        "r": est.r,
        "cv_mse": {str(k): v for k, v in est.cv_mse.items()},
        "unit_att": est.unit_att,
        "post_years": list(est.post_years),
        "att_series": est.att_series,
    })


def cmd_mc(run: Run) -> None:
    design, _, _ = _design(run)
    a = run.args
    n = a.draws if a.draws is not None else estimators.N_PERM
    with run.stage("mc"):
        est = estimators.matrix_completion_att(design, n_perm=n, seed=a.seed, level=a.level)
    _estimate_out(run, "matrix_completion", "mc", est, est.n_draws, {"detail": est.detail, "att_series": est.att_series})


def cmd_sdid(run: Run) -> None:
    design, _, _ = _design(run)
    a = run.args
    n = a.draws if a.draws is not None else 200
    with run.stage("sdid"):
        est = estimators.sdid(design, n_placebo=n, seed=a.seed, level=a.level)
    rows = [("unit", d, float(w)) for d, w in zip(est.donor_ids, est.unit_weights)]
    rows += [("time", y, float(w)) for y, w in zip(est.pre_years, est.time_weights)]
    run.table("sdid_weights.csv", ("kind", "id", "weight"), rows)
    _estimate_out(run, "sdid", "sdid", est, est.n_placebo, {"zeta": est.zeta})


def cmd_table1(run: Run) -> None:
    design, _, _ = _design(run)
    a = run.args
    names = tuple(_split(a.estimators)) if a.estimators else estimators.ESTIMATORS
    unknown = set(names) - set(estimators.ESTIMATORS)
    if unknown:
        raise PanelError(f"unknown estimator(s): {', '.join(sorted(unknown))}")
    opts = {}
    if a.draws is not None:
        opts.update(n_perm=a.draws, n_placebo=a.draws)
    if a.boot is not None:
        opts["n_boot"] = a.boot
    with run.stage("table1"):
        result = estimators.table1(design, seed=a.seed, estimators=names, workers=a.workers, **opts)
    header, rows = estimators.table1_rows(result)
    run.table("table1.csv", header, rows)
    run.json("table1.json", result)
    print(f"table1: {len(names)} estimator(s) x {len(header) - 2} sample(s)")


def _read_effects(path) -> dict[str, float]:
    import pandas as pd

    df = pd.read_csv(path)
    for col in ("unit_id", "mean_post_percent"):
        if col not in df.columns:
            raise PanelError(f"effects table {path} lacks column {col!r}")
    if "retained" in df.columns:
        df = df[df["retained"] == 1]
    return dict(zip(df["unit_id"].astype(str), df["mean_post_percent"].astype(float)))


def cmd_mechanisms(run: Run) -> None:
    design, raw, base = _design(run)
    a = run.args
    feat = a.features or raw.get("features")
    if feat is None:
        raise PanelError("mechanisms needs a features table (--features or the 'features' config key)")
    feat_path = Path(a.features) if a.features else _resolve(base, feat)
    features = analysis.load_features(feat_path)
    run.add_input("features", feat_path)
    eff = a.effects or raw.get("effects")
    if eff is not None:
        eff_path = Path(a.effects) if a.effects else _resolve(base, eff)
        gaps = _read_effects(eff_path)
        run.add_input("effects", eff_path)
    else:
        with run.stage("fit"):
            fits = scm.fit_units(design, design.treated_ids, workers=a.workers)
            retained, _ = scm.filter_fits(fits)
        gaps = {f.unit_id: f.mean_post_percent for f in retained}
    results, failed = {}, {}
    with run.stage("regressions"):
        for col in analysis.TABLE2_SPECS:
            try:
                results[col] = analysis.gap_correlates(
                    features, gaps, col, fe=not a.no_fe, cluster_by=a.cluster
                )
            except SynthPanelError as exc:
                failed[str(col)] = f"{exc.code}: {exc}"
    if not results:
        raise analysis.Collinear("no Table 2 column could be estimated: " + "; ".join(failed.values()))
    header, rows = analysis.table2_rows(results)
    run.table("table2.csv", header, rows)
    columns = [{"column": c, **r.as_dict()} for c, r in sorted(results.items())]
    run.json("table2.json", {"columns": columns, "failed": failed})
    print(f"table2: {len(results)} column(s) estimated, {len(failed)} failed")


def cmd_benford(run: Run) -> None:
    design, _, _ = _design(run)
    a = run.args
    with run.stage("fit"):
        fits = scm.fit_units(design, design.treated_ids, workers=a.workers)
    pooled = [f.weights.w for f in fits]
    if a.with_placebos:
        with run.stage("placebo"):
            dist = inference.run_permutation_engine(
                inference.PermutationPlan.exhaustive(design), workers=a.workers
            )
        pooled += [d.weights for d in dist.draws]
    rep = analysis.benford_weights(np.concatenate(pooled), a.threshold)
    run.table("benford.csv", analysis.BENFORD_HEADER, analysis.benford_rows(rep))
    run.json("benford.json", {
        "chi2": rep.chi2, "p_value": rep.p_value, "n_weights": rep.n_weights,
        "n_fits": len(pooled), "threshold": a.threshold,
    })
    print(f"Benford chi2 {fmt(rep.chi2)} on {rep.n_weights} weights, p = {fmt(rep.p_value)}")


def cmd_simulate(run: Run) -> None:
    a = run.args
    spec = simgen.DGPSpec(
        n_units=a.units, n_treated=a.treated, n_years=a.years, t0_index=a.t0_index,
        noise_sd=a.noise_sd, effect=a.effect or "-38pct", effect_dispersion=a.effect_dispersion,
        start_year=a.start_year, seed=a.seed,
    )
    with run.stage("simulate"):
        dataset, truth = simgen.simulate_panel(spec)
    run.out.mkdir(parents=True, exist_ok=True)
    write_panel(dataset, run.out / "panel.csv")
    run._register("panel.csv")
    rows = []
    for i, u in enumerate(truth.treated_ids):
        for j, y in enumerate(truth.post_years):
            rows.append((u, y, float(truth.untreated[i, spec.t0_index + j]),
                         float(truth.effect_level[i, j]), float(truth.effect_percent[i, j])))
    run.table("truth.csv", ("unit_id", "year", "untreated", "effect_level", "effect_percent"), rows)
    cfg = simgen.study_config_for(spec).to_dict()
    cfg["panel"] = "panel.csv"
    run.json("study.json", cfg)
    run.extra["truth"] = {"att_level": truth.att_level, "att_percent": truth.att_percent}
    run.config_hash = _canonical_hash(cfg)
    print(f"simulated {spec.n_units} units x {spec.n_years} years; true ATT {fmt(100 * truth.att_percent)}%")


COMMANDS = {
    "validate": (cmd_validate, "check a panel and study configuration"),
    "fit": (cmd_fit, "per-unit synthetic control fits and the aggregate effect"),
    "placebo": (cmd_placebo, "in-space placebo p-values and confidence bands"),
    "intime": (cmd_intime, "in-time placebo at a fake onset year"),
    "did": (cmd_did, "two-way fixed-effects difference-in-differences"),
    "gsc": (cmd_gsc, "generalized synthetic control (interactive fixed effects)"),
    "mc": (cmd_mc, "matrix completion with nuclear-norm penalty"),
    "sdid": (cmd_sdid, "synthetic difference-in-differences"),
    "table1": (cmd_table1, "all panel estimators side by side"),
    "mechanisms": (cmd_mechanisms, "regress per-unit gaps on regional characteristics"),
    "benford": (cmd_benford, "first-digit test on donor weights"),
    "simulate": (cmd_simulate, "generate a seeded panel with a known effect"),
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON study configuration")
    common.add_argument("--seed", type=_u64, help="random seed (required for stochastic subcommands)")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes (0 = all cores)")
    common.add_argument("--out", default="results", help="output directory (default: results)")
    common.add_argument("--donor-filter", help="comma-separated unit ids or countries allowed as donors")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="synthpanel", description="Synthetic control and panel estimators for regional output losses."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("placebo", "did", "gsc", "mc", "sdid", "table1"):
            p.add_argument("--draws", type=_positive, help="placebo / permutation draws")
            p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
        if name == "intime":
            p.add_argument("--fake-t0", type=int, help="fake onset year inside the pre-period")
        if name in ("gsc", "table1"):
            p.add_argument("--boot", type=_positive, help="bootstrap replications for gsc")
        if name == "table1":
            p.add_argument("--estimators", help="comma-separated subset of " + ",".join(estimators.ESTIMATORS))
        if name == "mechanisms":
            p.add_argument("--features", help="regional features table (overrides the config)")
            p.add_argument("--effects", help="effects.csv from a previous fit (default: refit)")
            p.add_argument("--no-fe", action="store_true", help="omit republic fixed effects")
            p.add_argument("--cluster", choices=("republic", "unit"), default="republic")
        if name == "benford":
            p.add_argument("--with-placebos", action="store_true", help="pool weights from placebo fits too")
            p.add_argument("--threshold", type=float, default=1e-4, help="ignore weights at or below this")
        if name == "simulate":
            p.add_argument("--effect", help="effect spec, e.g. -38pct, ramp:-40pct:10 (default -38pct)")
            p.add_argument("--units", type=int, default=100)
            p.add_argument("--treated", type=int, default=10)
            p.add_argument("--years", type=int, default=66)
            p.add_argument("--t0-index", type=int, default=38)
            p.add_argument("--start-year", type=int, default=1950)
            p.add_argument("--noise-sd", type=float, default=0.01)
            p.add_argument("--effect-dispersion", type=float, default=0.0)
    return parser


def _error_payload(exc: BaseException) -> dict:
    module = "cli"
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        path = Path(frame.filename)
        if path.parent.name == "synthpanel" and path.stem not in ("errors", "cli"):
            module = path.stem
            break
    code = getattr(exc, "code", None) or type(exc).__name__
    body = {"error": code, "module": module, "message": str(exc)}
    report = getattr(exc, "context", {}).get("report")
    if report is not None:
        body["issues"] = [vars(i) for i in report.errors]
    return body


def _join_negative_values(argv: list[str]) -> list[str]:
    """Let ``--effect -38pct`` through; argparse would read ``-38pct`` as a flag."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok == "--effect" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--effect={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_join_negative_values(argv))
    if args.command in STOCHASTIC and args.seed is None:
        parser.error(f"{args.command} is stochastic and needs --seed")
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    np.seterr(all="ignore")
    run = Run(args)
    fn = COMMANDS[args.command][0]
    try:
        with run.stage("total"):
            fn(run)
        run.write_manifest()
        return EXIT_OK
    except _ValidationFailed:
        return EXIT_INVALID
    except (PanelError, InvalidDesign, FileNotFoundError, json.JSONDecodeError) as exc:
        sys.stderr.write(dumps_json(_error_payload(exc)))
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported, never a bare traceback
        LOGGER.debug("unhandled error", exc_info=True)
        sys.stderr.write(dumps_json(_error_payload(exc)))
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
