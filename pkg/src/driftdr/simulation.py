"""Data-generating process, estimation scenarios, and the Monte Carlo driver.

Randomness uses the counter-based Philox generator; every replicate owns an
independent stream derived as
``SeedSequence(master_seed, spawn_key=(scenario_index, n, replicate))``, so
any single replicate is reproducible in isolation and replicates may run in
parallel without shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .data_model import Dataset, UNIT_BOUNDS
from .estimators import (
    EstimateResult,
    NuisanceFit,
    estimate_aipw,
    estimate_daipw,
    estimate_dtmle,
    estimate_tmle,
    estimate_unadjusted,
)
from .learners import (
    DesignSpec,
    FittedLearner,
    expand_design,
    fit_logistic_irls,
    fit_logistic_lasso,
)
from .smoothing import SmoothingConfig

__all__ = [
    "DgpConfig",
    "Scenario",
    "SCENARIOS",
    "ScenarioReport",
    "TrueValues",
    "generate",
    "true_theta",
    "efficiency_bound",
    "run_study",
    "replicate_seed_sequence",
    "RNG_DESCRIPTION",
]

RNG_DESCRIPTION = (
    "numpy Philox (counter-based); replicate streams from "
    "SeedSequence(master_seed, spawn_key=(scenario_index, n, replicate))"
)

COVARIATE_NAMES = ["w1", "w2", "w3", "w4", "w5", "w6"]

ALL_ESTIMATORS = ("unadjusted", "aipw", "tmle", "daipw", "dtmle")


@dataclass(frozen=True)
class DgpConfig:
    n: int
    seed: int
    arm_prob: float = 0.5
    w5_uses_eps6: bool = False  # alternate reading of the W5 structural equation

    def __post_init__(self):
        if self.n < 50:
            raise ValueError("n must be at least 50")


@dataclass(frozen=True)
class Scenario:
    id: str
    m_consistent: bool
    gM_consistent: bool


SCENARIOS = {
    "a": Scenario("a", True, True),
    "b": Scenario("b", True, False),
    "c": Scenario("c", False, True),
    "d": Scenario("d", False, False),
}


def _covariates(eps: np.ndarray, w5_uses_eps6: bool) -> np.ndarray:
    e1, e2, e3, e4, e5, e6 = eps
    w1 = np.log(e1 + 1.0)
    w2 = e2 / (1.0 + e1**2)
    w3 = e1 + 1.0 / (e3 + 1.0)
    w4 = np.sqrt(e2 + e4)
    w5 = e5 * (e6 if w5_uses_eps6 else e4)
    w6 = 1.0 / (e2 + e6 + 1.0)
    return np.stack([w1, w2, w3, w4, w5, w6], axis=1)


def logit_missingness(a, W: np.ndarray) -> np.ndarray:
    w1, w2, w3, w4, w5, w6 = W.T
    return (
        2.0
        - w1
        + 4.0 * w2
        - 2.0 * w4
        + 3.0 * w2 * w6
        + 3.0 * w1 * w5 * w6
        - a * (1.5 - 4.0 * w1 + 4.0 * w2 + 2.0 * w3 - 7.0 * w1 * w2 - 3.0 * w2 * w4 * w5)
    )


def logit_outcome(a, W: np.ndarray) -> np.ndarray:
    w1, w2, w3, w4, w5, w6 = W.T
    return (
        -0.5
        - w1
        - w2
        + w4
        + 2.0 * w2 * w6
        + 2.0 * w1 * w5 * w6
        - a * (2.0 - w1 + 3.0 * w2 + w3 - 6.0 * w1 * w2 - 4.0 * w2 * w4 * w5)
    )


def generate(cfg: DgpConfig) -> Dataset:
    """Draw one trial dataset from the structural equations."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    return _generate_with(rng, cfg.n, cfg.arm_prob, cfg.w5_uses_eps6)


def _generate_with(rng: np.random.Generator, n: int, arm_prob: float, w5_uses_eps6: bool) -> Dataset:
    eps = rng.uniform(size=(6, n))
    W = _covariates(eps, w5_uses_eps6)
    a = (rng.uniform(size=n) < arm_prob).astype(int)
    gm = expit(logit_missingness(a, W))
    m = (rng.uniform(size=n) < gm).astype(int)
    m0 = expit(logit_outcome(a, W))
    ydraw = (rng.uniform(size=n) < m0).astype(float)
    y = np.where(m == 1, ydraw, np.nan)
    return Dataset(W, a, m, y, COVARIATE_NAMES)


@dataclass(frozen=True)
class TrueValues:
    theta0: float
    naive_contrast: float


def true_theta(
    draws: int = 10_000_000,
    seed: int = 20_170_613,
    w5_uses_eps6: bool = False,
    chunk: int = 1_000_000,
) -> TrueValues:
    """Monte Carlo value of the target mean and the complete-case arm contrast.

    The contrast E(Y | A=1, M=1) - E(Y | A=0, M=1) exposes the selection
    bias induced by informative missingness.
    """
    if draws < 1_000_000:
        raise ValueError("at least 1e6 draws are required")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    s_theta = 0.0
    s_num1 = s_den1 = s_num0 = s_den0 = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        eps = rng.uniform(size=(6, k))
        W = _covariates(eps, w5_uses_eps6)
        m1 = expit(logit_outcome(1, W))
        m0 = expit(logit_outcome(0, W))
        g1 = expit(logit_missingness(1, W))
        g0 = expit(logit_missingness(0, W))
        s_theta += m1.sum()
        s_num1 += (m1 * g1).sum()
        s_den1 += g1.sum()
        s_num0 += (m0 * g0).sum()
        s_den0 += g0.sum()
        done += k
    return TrueValues(
        theta0=s_theta / draws,
        naive_contrast=s_num1 / s_den1 - s_num0 / s_den0,
    )


def efficiency_bound(
    draws: int = 10_000_000,
    seed: int = 20_170_614,
    w5_uses_eps6: bool = False,
    arm_prob: float = 0.5,
    chunk: int = 1_000_000,
    force_observed: bool = False,
    known_g: float | None = None,
) -> float:
    """Monte Carlo variance of the efficient influence function at the truth.

    ``force_observed``/``known_g`` specialize the formula for diagnostic
    cross-checks (no missingness, known propensity).
    """
    if draws < 1_000_000:
        raise ValueError("at least 1e6 draws are required")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    theta0 = true_theta(draws=max(draws, 1_000_000), seed=seed + 1, w5_uses_eps6=w5_uses_eps6).theta0
    s = 0.0
    s2 = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        eps = rng.uniform(size=(6, k))
        W = _covariates(eps, w5_uses_eps6)
        a = (rng.uniform(size=k) < arm_prob).astype(float)
        m1w = expit(logit_outcome(a, W))
        gm = expit(logit_missingness(a, W))
        m = np.ones(k) if force_observed else (rng.uniform(size=k) < gm).astype(float)
        y = (rng.uniform(size=k) < m1w).astype(float)
        mbar = expit(logit_outcome(1, W))
        if known_g is not None:
            g = np.full(k, known_g)
        else:
            g = arm_prob * expit(logit_missingness(1, W))
        D = a * m / g * (y - mbar) + mbar - theta0
        s += D.sum()
        s2 += (D * D).sum()
        done += k
    mean = s / draws
    return s2 / draws - mean * mean


# ---------------------------------------------------------------------------
# Nuisance fitting per scenario
# ---------------------------------------------------------------------------

MAIN_TERMS = DesignSpec(interaction_order=1, include_intercept=True)
ORDER4_NOINT = DesignSpec(interaction_order=4, include_intercept=False)
ORDER4_WITHINT = DesignSpec(interaction_order=4, include_intercept=True)


def _main_terms_learner(W: np.ndarray, y: np.ndarray) -> FittedLearner:
    X = expand_design(W, MAIN_TERMS)
    return fit_logistic_irls(X, y, design=MAIN_TERMS)


def _lasso_order4_learner(W: np.ndarray, y: np.ndarray, rng: np.random.Generator, folds: int = 5) -> FittedLearner:
    X = expand_design(W, ORDER4_NOINT)
    fit = fit_logistic_lasso(X, y, folds=folds, rng=rng)
    # coefficients carry a leading intercept, matching the with-intercept design
    fit.design = ORDER4_WITHINT
    return fit


def fit_scenario_nuisance(
    d: Dataset,
    scenario: Scenario,
    rng: np.random.Generator,
    truncation: float = 0.01,
    lasso_folds: int = 5,
) -> NuisanceFit:
    """Fit (g_A, g_M, m) the way the study prescribes for one scenario.

    Consistent components use the lasso over all interactions of W up to
    fourth order; inconsistent components use main-terms logistic
    regression. The treatment mechanism is always estimated by main-terms
    logistic regression, even though it is known by design, to adjust for
    chance covariate imbalance.
    """
    a, mm = d.a, d.m
    arm = a == 1
    comp = arm & (mm == 1)
    gA_fit = _main_terms_learner(d.w, a.astype(float))
    if scenario.gM_consistent:
        gM_fit = _lasso_order4_learner(d.w[arm], mm[arm].astype(float), rng, lasso_folds)
    else:
        gM_fit = _main_terms_learner(d.w[arm], mm[arm].astype(float))
    if scenario.m_consistent:
        m_fit = _lasso_order4_learner(d.w[comp], d.y_filled[comp], rng, lasso_folds)
    else:
        m_fit = _main_terms_learner(d.w[comp], d.y_filled[comp])
    return NuisanceFit(
        g_A=gA_fit.predict,
        g_M=gM_fit.predict,
        m=m_fit.predict,
        truncation_bound=truncation,
    )


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------


def replicate_seed_sequence(master_seed: int, scenario_id: str, n: int, k: int) -> np.random.SeedSequence:
    """The documented stream-derivation rule for replicate k."""
    sidx = ord(scenario_id) - ord("a")
    return np.random.SeedSequence(master_seed, spawn_key=(sidx, n, k))


@dataclass
class ScenarioReport:
    """Replicate-level records plus aggregated metrics of a study run."""

    master_seed: int
    theta0: float
    bound: float
    rng_description: str = RNG_DESCRIPTION
    replicates: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Per (scenario, n, estimator) metrics: coverage, scaled bias,
        scaled relative RMSE, and the sigma-hat ratio."""
        groups: dict[tuple, list[dict]] = {}
        for row in self.replicates:
            groups.setdefault((row["scenario"], row["n"], row["estimator"]), []).append(row)
        out = []
        for (scen, n, est), rows in sorted(groups.items()):
            th = np.array([r["theta_hat"] for r in rows])
            sg = np.array([r["sigma_hat"] for r in rows])
            covered = np.array([r["covered"] for r in rows], dtype=float)
            bias = th.mean() - self.theta0
            mse = np.mean((th - self.theta0) ** 2)
            sd = th.std(ddof=1) if len(th) > 1 else float("nan")
            out.append(
                {
                    "scenario": scen,
                    "n": n,
                    "estimator": est,
                    "reps": len(rows),
                    "coverage": float(covered.mean()),
                    "scaled_abs_bias": float(math.sqrt(n) * abs(bias)),
                    "scaled_rmse": float(math.sqrt(n * mse / self.bound)),
                    # sigma_hat estimates the asymptotic sd, so compare it to
                    # the replicate sd scaled back up by sqrt(n)
                    "se_ratio": float(sg.mean() / (math.sqrt(n) * sd))
                    if sd and not math.isnan(sd)
                    else float("nan"),
                }
            )
        return out

    @property
    def failure_fraction(self) -> float:
        total = len(self.replicates) + len(self.failures)
        return len(self.failures) / total if total else 0.0


def run_replicate(
    scenario_id: str,
    n: int,
    k: int,
    master_seed: int,
    estimators: Sequence[str] = ALL_ESTIMATORS,
    theta0: float | None = None,
    truncation: float = 0.01,
    kernel: str = "epanechnikov",
    max_iter: int = 100,
    alpha: float = 0.05,
    w5_uses_eps6: bool = False,
) -> list[dict]:
    """Run one simulation replicate; returns one record per estimator."""
    scenario = SCENARIOS[scenario_id]
    ss = replicate_seed_sequence(master_seed, scenario_id, n, k)
    rng = np.random.Generator(np.random.Philox(ss))
    d = _generate_with(rng, n, 0.5, w5_uses_eps6)
    nuisance = fit_scenario_nuisance(d, scenario, rng, truncation=truncation)
    values = nuisance.eval(d)
    smoothing = SmoothingConfig(kernel=kernel)
    out = []
    shared_lam = {}

    def record(res: EstimateResult):
        fluct = res.diagnostics.get("fluctuation")
        covered = bool(res.ci[0] <= theta0 <= res.ci[1]) if theta0 is not None else None
        out.append(
            {
                "scenario": scenario_id,
                "n": n,
                "rep": k,
                "estimator": res.estimator,
                "theta_hat": res.theta_hat,
                "sigma_hat": res.sigma_hat,
                "ci_lo": res.ci[0],
                "ci_hi": res.ci[1],
                "covered": covered,
                "converged": fluct.converged if fluct is not None else True,
            }
        )

    for est in estimators:
        if est == "unadjusted":
            record(estimate_unadjusted(d, alpha=alpha))
        elif est == "aipw":
            record(estimate_aipw(d, values, alpha=alpha))
        elif est == "tmle":
            record(estimate_tmle(d, values, alpha=alpha))
        elif est == "daipw":
            from .smoothing import fit_lambda

            lam = shared_lam.get("initial")
            if lam is None:
                lam = fit_lambda(d, values, config=smoothing, rng=rng)
                shared_lam["initial"] = lam
            record(estimate_daipw(d, values, alpha=alpha, smoothing=smoothing, rng=rng, lam=lam))
        elif est == "dtmle":
            record(
                estimate_dtmle(
                    d,
                    values,
                    max_iter=max_iter,
                    alpha=alpha,
                    smoothing=smoothing,
                    rng=rng,
                    truncation_bound=truncation,
                )
            )
        else:
            raise ValueError(f"unknown estimator {est!r}")
    return out


def run_study(
    scenarios: Iterable[str] = ("a", "b", "c", "d"),
    n_grid: Sequence[int] = (200, 800, 1800, 3200),
    reps: int = 500,
    estimators: Sequence[str] = ALL_ESTIMATORS,
    seed: int = 1,
    jobs: int = 1,
    truncation: float = 0.01,
    kernel: str = "epanechnikov",
    oracle_draws: int = 4_000_000,
    w5_uses_eps6: bool = False,
    replicate_log: Callable[[dict], None] | None = None,
    progress: Callable[[str], None] | None = None,
) -> ScenarioReport:
    """Run the full Monte Carlo study.

    The report is a pure function of the configuration and the master seed.
    Replicate failures are tallied and excluded from aggregates; more than
    1% failures triggers a study-level warning via ``progress``.
    """
    if reps < 2:
        raise ValueError("at least 2 replicates are required")
    tv = true_theta(draws=oracle_draws, w5_uses_eps6=w5_uses_eps6)
    bound = efficiency_bound(draws=oracle_draws, w5_uses_eps6=w5_uses_eps6)
    report = ScenarioReport(master_seed=seed, theta0=tv.theta0, bound=bound)
    tasks = [(s, n, k) for s in scenarios for n in n_grid for k in range(reps)]

    def one(task):
        s, n, k = task
        try:
            return task, run_replicate(
                s,
                n,
                k,
                master_seed=seed,
                estimators=estimators,
                theta0=tv.theta0,
                truncation=truncation,
                kernel=kernel,
                w5_uses_eps6=w5_uses_eps6,
            ), None
        except Exception as exc:  # noqa: BLE001 - tallied, not fatal
            return task, None, repr(exc)

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(
                ex.map(
                    _replicate_worker,
                    [
                        (s, n, k, seed, tuple(estimators), tv.theta0, truncation, kernel, w5_uses_eps6)
                        for (s, n, k) in tasks
                    ],
                    chunksize=4,
                )
            )
    else:
        results = [one(t) for t in tasks]

    last_block = None
    for (s, n, k), rows, err in results:
        if progress is not None and (s, n) != last_block:
            progress(f"scenario {s}, n={n}")
            last_block = (s, n)
        if err is not None:
            report.failures.append({"scenario": s, "n": n, "rep": k, "error": err})
            continue
        for row in rows:
            report.replicates.append(row)
            if replicate_log is not None:
                replicate_log(row)
    if progress is not None and report.failure_fraction > 0.01:
        progress(
            f"warning: {100 * report.failure_fraction:.1f}% of replicates failed and were excluded"
        )
    return report


def _replicate_worker(args):
    s, n, k, seed, estimators, theta0, truncation, kernel, w5_uses_eps6 = args
    try:
        return (s, n, k), run_replicate(
            s,
            n,
            k,
            master_seed=seed,
            estimators=estimators,
            theta0=theta0,
            truncation=truncation,
            kernel=kernel,
            w5_uses_eps6=w5_uses_eps6,
        ), None
    except Exception as exc:  # noqa: BLE001
        return (s, n, k), None, repr(exc)
