"""Command-line front end: estimate from CSV, run the study, render reports.

Every command is deterministic given its flags, input files, and the seed;
the resolved configuration is echoed into the header of every output file.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data_model import DataError, UNIT_BOUNDS, bound_outcomes, load_csv
from .estimators import (
    NuisanceFit,
    estimate_aipw,
    estimate_daipw,
    estimate_dtmle,
    estimate_tmle,
    estimate_unadjusted,
)
from .learners import fit_stacking
from .simulation import (
    ALL_ESTIMATORS,
    RNG_DESCRIPTION,
    SCENARIOS,
    _lasso_order4_learner,
    _main_terms_learner,
    run_study,
    true_theta,
)
from .smoothing import SmoothingConfig

log = logging.getLogger("driftdr")

THETA0_REFERENCE = 0.2328
THETA0_TOLERANCE = 0.005

METRIC_PANELS = ("coverage", "scaled_abs_bias", "scaled_rmse", "se_ratio")


def _setup_logging():
    level = os.environ.get("DRIFTDR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _config_header(cfg: dict) -> list[str]:
    lines = [f"# driftdr {__version__}", f"# rng: {RNG_DESCRIPTION}"]
    for key in sorted(cfg):
        lines.append(f"# {key}: {cfg[key]}")
    return lines


@click.group()
@click.version_option(__version__)
def main():
    """Doubly robust estimation of arm-specific means with outcomes missing at random."""
    _setup_logging()


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _stacking_nuisance(d, seed: int, trunc: float) -> tuple[NuisanceFit, dict]:
    """Default nuisance stack for observed data: g_A by main-terms logistic
    regression, g_M and m by a stacked ensemble of main-terms logistic
    regression and the lasso over fourth-order interactions."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(101,))))
    library = [
        ("main_terms", lambda X, y, r: _main_terms_learner(X, y)),
        ("lasso_order4", lambda X, y, r: _lasso_order4_learner(X, y, r)),
    ]
    a, mm = d.a, d.m
    arm = a == 1
    comp = arm & (mm == 1)
    gA_fit = _main_terms_learner(d.w, a.astype(float))
    gM_fit = fit_stacking(library, d.w[arm], mm[arm].astype(float), rng=rng)
    m_fit = fit_stacking(library, d.w[comp], d.y_filled[comp], rng=rng)
    summary = {
        "g_A": {"kind": gA_fit.kind, "separation_flagged": bool(gA_fit.separation_flagged)},
        "g_M": {"kind": gM_fit.kind, "members": gM_fit.member_names, "weights": [float(w) for w in gM_fit.weights]},
        "m": {"kind": m_fit.kind, "members": m_fit.member_names, "weights": [float(w) for w in m_fit.weights]},
    }
    fit = NuisanceFit(g_A=gA_fit.predict, g_M=gM_fit.predict, m=m_fit.predict, truncation_bound=trunc)
    return fit, summary


def _result_payload(res) -> dict:
    fluct = res.diagnostics.get("fluctuation")
    diag = {k: v for k, v in res.diagnostics.items() if k != "fluctuation"}
    if fluct is not None:
        diag["fluctuation"] = {
            "iterations": fluct.iteration,
            "converged": fluct.converged,
            "tolerance": fluct.tolerance,
            "max_eps": fluct.max_eps,
            "separation_flagged": fluct.separation_flagged,
        }
    return {
        "theta_hat": res.theta_hat,
        "sigma_hat": res.sigma_hat,
        "ci": [res.ci[0], res.ci[1]],
        "drift_hat": res.drift_hat,
        "diagnostics": diag,
    }


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False), help="Input CSV file.")
@click.option("--arm-col", required=True, help="Treatment-arm column.")
@click.option("--outcome-col", required=True, help="Outcome column.")
@click.option("--miss-col", default=None, help="0/1 missingness-indicator column.")
@click.option("--derive-missing", is_flag=True, help="Treat blank outcome cells as missing.")
@click.option("--covariates", required=True, help="Comma-separated covariate columns.")
@click.option(
    "--estimators",
    default="unadjusted,aipw,tmle,daipw,dtmle",
    help="Comma-separated subset of unadjusted,aipw,tmle,daipw,dtmle.",
)
@click.option("--alpha", default=0.05, show_default=True, help="Two-sided CI level.")
@click.option("--trunc", default=0.01, show_default=True, help="Propensity truncation bound.")
@click.option("--seed", default=1, show_default=True, help="Master seed.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output JSON path.")
def estimate(data, arm_col, outcome_col, miss_col, derive_missing, covariates, estimators, alpha, trunc, seed, out):
    """Estimate per-arm outcome means from a trial CSV.

    Also writes a plot-data CSV (same stem, .csv suffix) with one row per
    arm x estimator.
    """
    if not 0.0 < alpha < 0.5:
        _fail("--alpha must lie in (0, 0.5)")
    if miss_col is None and not derive_missing:
        _fail("one of --miss-col or --derive-missing is required")
    cov_cols = [c.strip() for c in covariates.split(",") if c.strip()]
    est_list = [e.strip() for e in estimators.split(",") if e.strip()]
    bad = set(est_list) - set(ALL_ESTIMATORS)
    if bad:
        _fail(f"unknown estimators: {', '.join(sorted(bad))}")
    cfg = {
        "command": "estimate",
        "data": data,
        "arm_col": arm_col,
        "outcome_col": outcome_col,
        "miss_col": miss_col,
        "derive_missing": derive_missing,
        "covariates": ",".join(cov_cols),
        "estimators": ",".join(est_list),
        "alpha": alpha,
        "trunc": trunc,
        "seed": seed,
    }

    # discover arm labels first so multi-arm columns are handled
    try:
        with open(data, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or arm_col not in reader.fieldnames:
                raise DataError(f"missing column {arm_col!r}")
            arms = sorted({(row[arm_col] or "").strip() for row in reader})
    except (OSError, DataError) as exc:
        _fail(str(exc))
    if not arms or arms == [""]:
        _fail(f"column {arm_col!r} contains no arm labels")

    results = {}
    try:
        for arm_label in arms:
            d = load_csv(
                data,
                arm_col=arm_col,
                outcome_col=outcome_col,
                covariate_cols=cov_cols,
                miss_col=miss_col,
                derive_missing=derive_missing,
                arm_value=arm_label,
            )
            yobs = d.y_observed
            if yobs.size and yobs.min() >= 0.0 and yobs.max() <= 1.0:
                db, bounds = d, UNIT_BOUNDS
            else:
                db, bounds = bound_outcomes(d, "auto")
            arm_out = {"bounds": {"lo": bounds.lo, "hi": bounds.hi, "source": bounds.source}}
            needs_nuisance = set(est_list) - {"unadjusted"}
            values = None
            if needs_nuisance:
                nuisance, summary = _stacking_nuisance(db, seed, trunc)
                values = nuisance.eval(db)
                arm_out["nuisance"] = summary
            smoothing = SmoothingConfig()
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(202,))))
            for est in est_list:
                if est == "unadjusted":
                    res = estimate_unadjusted(db, alpha=alpha, bounds=bounds)
                elif est == "aipw":
                    res = estimate_aipw(db, values, alpha=alpha, bounds=bounds)
                elif est == "tmle":
                    res = estimate_tmle(db, values, alpha=alpha, bounds=bounds)
                elif est == "daipw":
                    res = estimate_daipw(db, values, alpha=alpha, bounds=bounds, smoothing=smoothing, rng=rng)
                else:
                    res = estimate_dtmle(
                        db, values, alpha=alpha, bounds=bounds, smoothing=smoothing, rng=rng, truncation_bound=trunc
                    )
                arm_out[est] = _result_payload(res)
            results[arm_label] = arm_out
    except (DataError, ValueError) as exc:
        _fail(str(exc))

    payload = {"config": cfg, "arms": results}
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    plot_path = out_path.with_suffix(".csv")
    with open(plot_path, "w", newline="", encoding="utf-8") as fh:
        for line in _config_header(cfg):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["arm", "estimator", "theta_hat", "ci_lo", "ci_hi"])
        for arm_label in arms:
            for est in est_list:
                r = results[arm_label][est]
                writer.writerow([arm_label, est, repr(r["theta_hat"]), repr(r["ci"][0]), repr(r["ci"][1])])
    click.echo(f"wrote {out_path} and {plot_path}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

REPLICATE_COLUMNS = [
    "scenario",
    "n",
    "rep",
    "estimator",
    "theta_hat",
    "sigma_hat",
    "ci_lo",
    "ci_hi",
    "covered",
    "converged",
]

AGGREGATE_COLUMNS = [
    "scenario",
    "n",
    "estimator",
    "reps",
    "coverage",
    "scaled_abs_bias",
    "scaled_rmse",
    "se_ratio",
]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


@main.command()
@click.option("--scenarios", default="a,b,c,d", show_default=True, help="Comma-separated scenario letters.")
@click.option("--n-grid", default="200,800,1800,3200", show_default=True, help="Comma-separated sample sizes.")
@click.option("--reps", default=500, show_default=True, help="Replicates per (scenario, n) cell.")
@click.option(
    "--estimators",
    default="unadjusted,aipw,tmle,daipw,dtmle",
    show_default=True,
    help="Comma-separated estimator subset.",
)
@click.option("--seed", default=1, show_default=True, help="Master seed.")
@click.option("--jobs", default=1, show_default=True, help="Concurrent replicate workers.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--check-theta0", is_flag=True, help="Validate the simulation truth against its reference value.")
def simulate(scenarios, n_grid, reps, estimators, seed, jobs, out_dir, check_theta0):
    """Run the Monte Carlo study and write replicate + aggregate CSVs."""
    scen_list = [s.strip() for s in scenarios.split(",") if s.strip()]
    bad = set(scen_list) - set(SCENARIOS)
    if bad:
        _fail(f"unknown scenarios: {', '.join(sorted(bad))}")
    try:
        ns = [int(x) for x in n_grid.split(",") if x.strip()]
    except ValueError:
        _fail("--n-grid must be comma-separated integers")
    est_list = [e.strip() for e in estimators.split(",") if e.strip()]
    unknown = set(est_list) - set(ALL_ESTIMATORS)
    if unknown:
        _fail(f"unknown estimators: {', '.join(sorted(unknown))}")
    cfg = {
        "command": "simulate",
        "scenarios": ",".join(scen_list),
        "n_grid": ",".join(str(n) for n in ns),
        "reps": reps,
        "estimators": ",".join(est_list),
        "seed": seed,
        "jobs": jobs,
    }
    outdir = Path(out_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    if check_theta0:
        tv = true_theta(draws=10_000_000)
        click.echo(f"theta0 = {tv.theta0:.4f} (reference {THETA0_REFERENCE} +/- {THETA0_TOLERANCE})")
        click.echo(f"naive complete-case contrast = {tv.naive_contrast:.4f}")
        if abs(tv.theta0 - THETA0_REFERENCE) > THETA0_TOLERANCE:
            _fail(
                f"simulation truth {tv.theta0:.4f} misses the reference value "
                f"{THETA0_REFERENCE} +/- {THETA0_TOLERANCE}"
            )

    rep_path = outdir / "replicates.csv"
    agg_path = outdir / "aggregate.csv"
    with open(rep_path, "w", newline="", encoding="utf-8") as fh:
        for line in _config_header(cfg):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(REPLICATE_COLUMNS)
        fh.flush()

        def log_row(row: dict):
            writer.writerow([_fmt(row[c]) for c in REPLICATE_COLUMNS])
            fh.flush()

        try:
            report = run_study(
                scenarios=scen_list,
                n_grid=ns,
                reps=reps,
                estimators=est_list,
                seed=seed,
                jobs=jobs,
                replicate_log=log_row,
                progress=lambda msg: click.echo(msg),
            )
        except (ValueError, RuntimeError) as exc:
            _fail(str(exc))

    with open(agg_path, "w", newline="", encoding="utf-8") as fh:
        for line in _config_header(cfg):
            fh.write(line + "\n")
        fh.write(f"# theta0: {report.theta0!r}\n")
        fh.write(f"# efficiency_bound: {report.bound!r}\n")
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for row in report.aggregate():
            writer.writerow([_fmt(row[c]) for c in AGGREGATE_COLUMNS])
    if report.failures:
        click.echo(f"{len(report.failures)} replicate(s) failed and were excluded")
    click.echo(f"wrote {rep_path} and {agg_path}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _read_aggregate(path: Path) -> tuple[list[str], list[dict]]:
    header_lines = []
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            data_lines = []
            for line in fh:
                if line.startswith("#"):
                    header_lines.append(line.rstrip("\n"))
                else:
                    data_lines.append(line)
        reader = csv.DictReader(data_lines)
        missing = set(AGGREGATE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"aggregate file lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            rows.append(row)
    except OSError as exc:
        raise DataError(str(exc)) from None
    if not rows:
        raise DataError("aggregate file contains no rows")
    return header_lines, rows


def _panel_svg(rows: list[dict], metric: str) -> str:
    """A minimal static line chart: one line per (scenario, estimator)."""
    width, height, pad = 640, 400, 50
    ns = sorted({int(r["n"]) for r in rows})
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for r in rows:
        key = (r["scenario"], r["estimator"])
        series.setdefault(key, []).append((int(r["n"]), float(r[metric])))
    values = [v for pts in series.values() for (_, v) in pts if np.isfinite(v)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo

    def sx(n):
        i = ns.index(n)
        return pad + (width - 2 * pad) * (i / max(len(ns) - 1, 1))

    def sy(v):
        return height - pad - (height - 2 * pad) * ((v - lo) / span)

    palette = ["#1b6ca8", "#c23b22", "#2e7d32", "#6a1b9a", "#ef6c00", "#37474f", "#00838f", "#ad1457"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{metric}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for n in ns:
        parts.append(
            f'<text x="{sx(n):.1f}" y="{height - pad + 18}" text-anchor="middle" font-size="10">{n}</text>'
        )
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * span
        parts.append(f'<text x="{pad - 6}" y="{sy(v):.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    for ci, (key, pts) in enumerate(sorted(series.items())):
        pts = sorted(pts)
        color = palette[ci % len(palette)]
        path = " ".join(f"{sx(n):.1f},{sy(v):.1f}" for n, v in pts if np.isfinite(v))
        if path:
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * ci}" font-size="9" fill="{color}">'
            f"{key[0]}/{key[1]}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Aggregate CSV.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--svg", is_flag=True, help="Also emit static SVG line charts.")
def report(in_path, out_dir, svg):
    """Render per-metric panel CSVs and a plain-text summary from an aggregate CSV."""
    try:
        header_lines, rows = _read_aggregate(Path(in_path))
    except DataError as exc:
        _fail(str(exc))
    outdir = Path(out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = {"command": "report", "in": in_path, "svg": svg}

    for metric in METRIC_PANELS:
        panel = outdir / f"panel_{metric}.csv"
        with open(panel, "w", newline="", encoding="utf-8") as fh:
            for line in _config_header(cfg):
                fh.write(line + "\n")
            writer = csv.writer(fh)
            writer.writerow(["scenario", "n", "estimator", "value"])
            for r in rows:
                writer.writerow([r["scenario"], r["n"], r["estimator"], r[metric]])
        if svg:
            (outdir / f"panel_{metric}.svg").write_text(_panel_svg(rows, metric), encoding="utf-8")

    summary = outdir / "summary.txt"
    with open(summary, "w", encoding="utf-8") as fh:
        for line in _config_header(cfg):
            fh.write(line + "\n")
        for line in header_lines:
            fh.write(line + "\n")
        cols = ["scenario", "n", "estimator", "reps"] + list(METRIC_PANELS)
        widths = {c: max(len(c), max(len(_round(r[c])) for r in rows)) for c in cols}
        fh.write("  ".join(c.ljust(widths[c]) for c in cols) + "\n")
        for r in rows:
            fh.write("  ".join(_round(r[c]).ljust(widths[c]) for c in cols) + "\n")
    click.echo(f"wrote panels and {summary}")


def _round(cell: str) -> str:
    try:
        v = float(cell)
    except (TypeError, ValueError):
        return str(cell)
    if float(v).is_integer() and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.4f}"


if __name__ == "__main__":
    main()
