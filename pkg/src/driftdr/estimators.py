"""Estimator core: influence functions, AIPW, TMLE, drift-corrected variants.

All estimators operate on a dataset whose observed outcomes lie in [0, 1]
(see :func:`driftdr.data_model.bound_outcomes`); results carry both the
bounded-scale and back-transformed raw-scale values. Confidence intervals
are Wald-type, with the variance taken from the empirical second moment of
the estimated influence-function values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data_model import Dataset, ObservationRecord, OutcomeBounds, UNIT_BOUNDS
from .learners import irls_solve
from .smoothing import KernelSmoother, LambdaFit, SmoothingConfig, fit_lambda

__all__ = [
    "NuisanceFit",
    "NuisanceValues",
    "TiltingCovariates",
    "FluctuationState",
    "EstimateResult",
    "eif",
    "estimate_unadjusted",
    "estimate_aipw",
    "estimate_tmle",
    "estimate_drift",
    "estimate_daipw",
    "estimate_dtmle",
    "contrast",
    "stopping_tolerance",
    "zero_lambda_fit",
]

# Fitted outcome-regression values are clipped here before logits are taken.
M_CLIP = (0.0005, 0.9995)

DEFAULT_TRUNCATION = 0.01
DTMLE_MAX_ITER = 100

# Largest per-row logit shift one tilting iteration may apply.
STEP_CAP = 25.0


def stopping_tolerance(n: int) -> float:
    """Iteration stopping rule for the drift-corrected TMLE: 1e-4 * n^(-3/5)."""
    return 1e-4 * float(n) ** (-0.6)


@dataclass
class NuisanceValues:
    """Per-row nuisance evaluations, already truncated/clipped."""

    g_A: np.ndarray
    g_M: np.ndarray
    m: np.ndarray

    @property
    def g(self) -> np.ndarray:
        return self.g_A * self.g_M


@dataclass
class NuisanceFit:
    """The fitted triple (g_A, g_M, m) of prediction functions.

    Each component is a callable mapping the (n, p) covariate matrix to
    per-row predictions, or a bare float for a known constant. Evaluated
    propensities are truncated into [delta, 1 - delta], so g = g_A * g_M
    stays bounded away from zero.
    """

    g_A: Callable | float
    g_M: Callable | float
    m: Callable | float
    truncation_bound: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        if not 0.0 < self.truncation_bound < 0.5:
            raise ValueError("truncation_bound must lie in (0, 0.5)")

    def _component(self, fn, W: np.ndarray) -> np.ndarray:
        if callable(fn):
            out = np.asarray(fn(W), dtype=float)
        else:
            out = np.full(W.shape[0], float(fn))
        if out.shape != (W.shape[0],):
            raise ValueError("nuisance predictor returned a wrong-shaped array")
        return out

    def eval(self, d: Dataset) -> NuisanceValues:
        delta = self.truncation_bound
        gA = np.clip(self._component(self.g_A, d.w), delta, 1.0 - delta)
        gM = np.clip(self._component(self.g_M, d.w), delta, 1.0 - delta)
        m = np.clip(self._component(self.m, d.w), *M_CLIP)
        return NuisanceValues(gA, gM, m)


@dataclass
class TiltingCovariates:
    """Auxiliary covariates of the iterative tilting step."""

    W1: np.ndarray  # 1 / g(w)
    W2: np.ndarray  # r_A/gamma + r_M/gamma_M
    Z_A: np.ndarray  # e / g_A
    Z_M: np.ndarray  # e / g
    e: np.ndarray  # outcome-residual regression values (kept for the drift estimate)


@dataclass
class FluctuationState:
    """Convergence diagnostics of the iterative fluctuation."""

    eps_A: float = 0.0
    eps_M: float = 0.0
    eps_Y1: float = 0.0
    eps_Y2: float = 0.0
    iteration: int = 0
    converged: bool = False
    tolerance: float = 0.0
    separation_flagged: bool = False

    @property
    def max_eps(self) -> float:
        return max(abs(self.eps_A), abs(self.eps_M), abs(self.eps_Y1), abs(self.eps_Y2))


@dataclass
class EstimateResult:
    """Point estimate with influence-function-based Wald inference.

    ``theta_hat``, ``sigma_hat`` and ``ci`` are on the raw outcome scale;
    the ``*_bounded`` twins are on the [0, 1] analysis scale. ``if_values``
    are per-row influence-function evaluations on the bounded scale.
    """

    estimator: str
    n: int
    alpha: float
    theta_hat: float
    sigma_hat: float
    ci: tuple[float, float]
    theta_bounded: float
    sigma_bounded: float
    ci_bounded: tuple[float, float]
    if_values: np.ndarray
    bounds: OutcomeBounds
    drift_hat: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def if_values_raw(self) -> np.ndarray:
        return self.if_values * (self.bounds.hi - self.bounds.lo)


def _wald(
    name: str,
    theta_b: float,
    if_b: np.ndarray,
    alpha: float,
    bounds: OutcomeBounds,
    drift: float | None = None,
    diagnostics: dict | None = None,
) -> EstimateResult:
    n = len(if_b)
    sigma_b = float(np.sqrt(np.mean(if_b**2)))
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * sigma_b / np.sqrt(n)
    ci_b = (theta_b - half, theta_b + half)
    span = bounds.hi - bounds.lo
    return EstimateResult(
        estimator=name,
        n=n,
        alpha=alpha,
        theta_hat=bounds.lo + theta_b * span,
        sigma_hat=sigma_b * span,
        ci=(bounds.lo + ci_b[0] * span, bounds.lo + ci_b[1] * span),
        theta_bounded=theta_b,
        sigma_bounded=sigma_b,
        ci_bounded=ci_b,
        if_values=if_b,
        bounds=bounds,
        drift_hat=drift,
        diagnostics=diagnostics or {},
    )


def _eif_values(a, mm, yf, g, m, theta) -> np.ndarray:
    return a * mm / g * (yf - m) + m - theta


def _safe_logit(p: np.ndarray) -> np.ndarray:
    # guards against exact 0/1 from floating-point saturation of expit
    return logit(np.clip(p, 1e-12, 1.0 - 1e-12))


def eif(record: ObservationRecord, nuisance: NuisanceFit, theta: float) -> float:
    """Efficient influence function at one observation.

    When a * m = 0 the weighted residual term is zero regardless of the
    (absent) outcome.
    """
    W = np.asarray(record.w, dtype=float)[None, :]
    delta = nuisance.truncation_bound
    gA = float(np.clip(nuisance._component(nuisance.g_A, W)[0], delta, 1 - delta))
    gM = float(np.clip(nuisance._component(nuisance.g_M, W)[0], delta, 1 - delta))
    m = float(np.clip(nuisance._component(nuisance.m, W)[0], *M_CLIP))
    first = 0.0
    if record.a == 1 and record.m == 1:
        first = (record.y - m) / (gA * gM)
    return first + m - theta


def estimate_unadjusted(
    d: Dataset, alpha: float = 0.05, bounds: OutcomeBounds = UNIT_BOUNDS
) -> EstimateResult:
    """Complete-case empirical mean of the outcome in the target arm."""
    comp = (d.a == 1) & (d.m == 1)
    nsub = int(comp.sum())
    if nsub == 0:
        raise ValueError("no rows with a = 1 and observed outcome")
    ysub = d.y_filled[comp]
    theta = float(ysub.mean())
    phat = nsub / d.n
    if_b = np.where(comp, (d.y_filled - theta) / phat, 0.0)
    diagnostics = {"n_complete": nsub}
    if nsub == 1:
        diagnostics["degenerate_sigma"] = True
    return _wald("unadjusted", theta, if_b, alpha, bounds, diagnostics=diagnostics)


def estimate_aipw(
    d: Dataset,
    nuisance: NuisanceFit | NuisanceValues,
    alpha: float = 0.05,
    bounds: OutcomeBounds = UNIT_BOUNDS,
) -> EstimateResult:
    """Augmented IPW: the closed-form solution of the EIF estimating equation."""
    v = nuisance.eval(d) if isinstance(nuisance, NuisanceFit) else nuisance
    a, mm, yf = d.a, d.m, d.y_filled
    contrib = a * mm / v.g * (yf - v.m) + v.m
    theta = float(contrib.mean())
    if_b = _eif_values(a, mm, yf, v.g, v.m, theta)
    return _wald("aipw", theta, if_b, alpha, bounds)


def estimate_tmle(
    d: Dataset,
    nuisance: NuisanceFit | NuisanceValues,
    alpha: float = 0.05,
    bounds: OutcomeBounds = UNIT_BOUNDS,
) -> EstimateResult:
    """Classical TMLE: one logistic fluctuation of m on the covariate 1/g."""
    v = nuisance.eval(d) if isinstance(nuisance, NuisanceFit) else nuisance
    a, mm, yf = d.a, d.m, d.y_filled
    comp = (a == 1) & (mm == 1)
    if not comp.any():
        raise ValueError("the (A=1, M=1) subset is empty")
    H = 1.0 / v.g
    eps, flagged = irls_solve(H[comp][:, None], yf[comp], offset=_safe_logit(v.m[comp]))
    m_tilt = expit(_safe_logit(v.m) + eps[0] * H)
    theta = float(m_tilt.mean())
    if_b = _eif_values(a, mm, yf, v.g, m_tilt, theta)
    return _wald(
        "tmle",
        theta,
        if_b,
        alpha,
        bounds,
        diagnostics={"epsilon": float(eps[0]), "separation_flagged": flagged},
    )


def _lambda_arrays(lam: LambdaFit, v: NuisanceValues) -> TiltingCovariates:
    gamma_A = lam.gamma_A.predict(v.m)
    gamma_M = lam.gamma_M.predict(v.m)
    r_A = lam.r_A.predict(v.m)
    r_M = lam.r_M.predict(v.m)
    e = lam.e.predict(v.g)
    W1 = 1.0 / v.g
    W2 = r_A / (gamma_A * gamma_M) + r_M / gamma_M
    return TiltingCovariates(W1=W1, W2=W2, Z_A=e / v.g_A, Z_M=e / v.g, e=e)


def _drift_value(d: Dataset, v: NuisanceValues, t: TiltingCovariates) -> float:
    a, mm, yf = d.a, d.m, d.y_filled
    terms = (
        t.e / v.g_A * (a - v.g_A)
        + a * t.e / v.g * (mm - v.g_M)
        + a * mm * t.W2 * (yf - v.m)
    )
    return float(terms.mean())


def estimate_drift(d: Dataset, nuisance: NuisanceFit | NuisanceValues, lam: LambdaFit) -> float:
    """Plug-in estimate of the drift term from the fitted residual regressions."""
    v = nuisance.eval(d) if isinstance(nuisance, NuisanceFit) else nuisance
    return _drift_value(d, v, _lambda_arrays(lam, v))


def estimate_daipw(
    d: Dataset,
    nuisance: NuisanceFit | NuisanceValues,
    alpha: float = 0.05,
    bounds: OutcomeBounds = UNIT_BOUNDS,
    smoothing: SmoothingConfig = SmoothingConfig(),
    rng: np.random.Generator | None = None,
    lam: LambdaFit | None = None,
) -> EstimateResult:
    """Drift-corrected AIPW: the AIPW minus the estimated drift term.

    The Wald interval uses the drift-corrected influence function; it is
    flagged as a heuristic because the asymptotic guarantee is only
    established for the drift-corrected TMLE.
    """
    v = nuisance.eval(d) if isinstance(nuisance, NuisanceFit) else nuisance
    if lam is None:
        lam = fit_lambda(d, v, config=smoothing, rng=rng)
    t = _lambda_arrays(lam, v)
    beta = _drift_value(d, v, t)
    aipw = estimate_aipw(d, v, alpha=alpha, bounds=bounds)
    theta = aipw.theta_bounded - beta
    a, mm, yf = d.a, d.m, d.y_filled
    if_b = (
        _eif_values(a, mm, yf, v.g, v.m, theta)
        - a * mm * t.W2 * (yf - v.m)
        - a * t.Z_M * (mm - v.g_M)
        - t.Z_A * (a - v.g_A)
    )
    return _wald(
        "daipw",
        theta,
        if_b,
        alpha,
        bounds,
        drift=beta,
        diagnostics={"inference": "heuristic", "theta_aipw": aipw.theta_bounded},
    )


def estimate_dtmle(
    d: Dataset,
    nuisance: NuisanceFit | NuisanceValues,
    max_iter: int = DTMLE_MAX_ITER,
    alpha: float = 0.05,
    bounds: OutcomeBounds = UNIT_BOUNDS,
    smoothing: SmoothingConfig = SmoothingConfig(),
    rng: np.random.Generator | None = None,
    lam: LambdaFit | None = None,
    refit_bandwidths: bool = False,
    truncation_bound: float | None = None,
) -> EstimateResult:
    """Drift-corrected TMLE: iterative tilting of (m, g_M, g_A).

    Each pass refits the residual regressions against the current fits,
    solves the three no-intercept offset logistic fluctuations, updates and
    re-truncates the fits, and stops once every fitted tilting parameter is
    below 1e-4 * n^(-3/5) in magnitude. Kernel bandwidths are selected on
    the first pass and then held fixed unless ``refit_bandwidths`` is set.
    Passing ``lam`` pins the residual regressions across iterations (used by
    the degenerate-correction diagnostics).
    """
    if isinstance(nuisance, NuisanceFit):
        v0 = nuisance.eval(d)
        delta = nuisance.truncation_bound
    else:
        v0 = nuisance
        delta = truncation_bound if truncation_bound is not None else DEFAULT_TRUNCATION
    a, mm, yf = d.a, d.m, d.y_filled
    n = d.n
    comp = (a == 1) & (mm == 1)
    if comp.sum() < 5:
        raise ValueError("the (A=1, M=1) subset is too small for the drift-corrected TMLE")
    arm = a == 1
    tol = stopping_tolerance(n)

    gA = v0.g_A.copy()
    gM = v0.g_M.copy()
    mh = v0.m.copy()
    bw = None
    state = FluctuationState(tolerance=tol)
    t = None
    lam_fit = lam
    best = None  # (max_eps, gA, gM, mh, t) of the iterate closest to solving the scores
    for it in range(1, max_iter + 1):
        cur = NuisanceValues(gA, gM, mh)
        if lam is None:
            lam_fit = fit_lambda(
                d,
                cur,
                config=smoothing,
                rng=rng,
                bandwidths_opt=None if (refit_bandwidths or bw is None) else bw,
            )
            if bw is None:
                bw = lam_fit.bandwidths_opt
        t = _lambda_arrays(lam_fit, cur)

        # identically-zero covariates contribute no score; skip them so the
        # degenerate case reduces to the classical TMLE fit bit-for-bit
        if np.any(t.W2[comp] != 0.0):
            eps_Y, f1 = irls_solve(
                np.column_stack([t.W1[comp], t.W2[comp]]), yf[comp], offset=_safe_logit(mh[comp])
            )
        else:
            e1, f1 = irls_solve(t.W1[comp][:, None], yf[comp], offset=_safe_logit(mh[comp]))
            eps_Y = np.array([e1[0], 0.0])
        if np.any(t.Z_M[arm] != 0.0):
            eps_M, f2 = irls_solve(
                t.Z_M[arm][:, None], mm[arm].astype(float), offset=_safe_logit(gM[arm])
            )
        else:
            eps_M, f2 = np.zeros(1), False
        if np.any(t.Z_A != 0.0):
            eps_A, f3 = irls_solve(t.Z_A[:, None], a.astype(float), offset=_safe_logit(gA))
        else:
            eps_A, f3 = np.zeros(1), False
        state.separation_flagged |= f1 or f2 or f3

        state.eps_Y1, state.eps_Y2 = float(eps_Y[0]), float(eps_Y[1])
        state.eps_M = float(eps_M[0])
        state.eps_A = float(eps_A[0])
        state.iteration = it
        if best is None or state.max_eps < best[0]:
            best = (state.max_eps, gA.copy(), gM.copy(), mh.copy(), t)
        if state.max_eps < tol:
            # stop before applying: the current fits already solve the
            # estimating equations within tolerance
            state.converged = True
            break

        # damp runaway steps: the auxiliary covariates are unbounded, so an
        # unrestricted MLE step can move the fits arbitrarily far in one
        # iteration; cap the per-row logit shift (inactive near a solution)
        shift_Y = eps_Y[0] * t.W1 + eps_Y[1] * t.W2
        shift_M = eps_M[0] * t.Z_M
        shift_A = eps_A[0] * t.Z_A
        for shift in (shift_Y, shift_M, shift_A):
            smax = float(np.abs(shift).max())
            if smax > STEP_CAP:
                shift *= STEP_CAP / smax
        mh = expit(_safe_logit(mh) + shift_Y)
        gM = np.clip(expit(_safe_logit(gM) + shift_M), delta, 1.0 - delta)
        gA = np.clip(expit(_safe_logit(gA) + shift_A), delta, 1.0 - delta)

    if not state.converged and best is not None:
        # the trajectory did not settle; fall back to the iterate whose
        # fitted tilting parameters were smallest
        _, gA, gM, mh, t = best
        diag_best_eps = best[0]
    else:
        diag_best_eps = state.max_eps

    final = NuisanceValues(gA, gM, mh)
    theta = float(mh.mean())
    D_Y = a * mm * t.W2 * (yf - mh)
    D_M = a * t.Z_M * (mm - gM)
    D_A = t.Z_A * (a - gA)
    if_b = _eif_values(a, mm, yf, final.g, mh, theta) - D_Y - D_M - D_A
    drift = _drift_value(d, final, t)
    diagnostics = {
        "fluctuation": state,
        "best_max_eps": diag_best_eps,
        "scores": {
            "D_Y": float(D_Y.mean()),
            "D_M": float(D_M.mean()),
            "D_A": float(D_A.mean()),
        },
        "covariate_max": float(
            max(np.abs(t.W1).max(), np.abs(t.W2).max(), np.abs(t.Z_M).max(), np.abs(t.Z_A).max())
        ),
    }
    if not state.converged:
        diagnostics["warning"] = (
            f"fluctuation did not converge within {max_iter} iterations; "
            "confidence interval computed from the best iterate"
        )
    return _wald("dtmle", theta, if_b, alpha, bounds, drift=drift, diagnostics=diagnostics)


def contrast(r1: EstimateResult, r0: EstimateResult, alpha: float | None = None) -> EstimateResult:
    """Arm contrast: difference of estimates with differenced influence functions."""
    if r1.n != r0.n:
        raise ValueError("contrast requires results computed on the same dataset (n mismatch)")
    alpha = alpha if alpha is not None else r1.alpha
    theta = r1.theta_hat - r0.theta_hat
    ifd = r1.if_values_raw - r0.if_values_raw
    n = r1.n
    sigma = float(np.sqrt(np.mean(ifd**2)))
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * sigma / np.sqrt(n)
    raw_bounds = OutcomeBounds(0.0, 1.0, "already_unit")
    return EstimateResult(
        estimator=f"contrast[{r1.estimator}]",
        n=n,
        alpha=alpha,
        theta_hat=theta,
        sigma_hat=sigma,
        ci=(theta - half, theta + half),
        theta_bounded=theta,
        sigma_bounded=sigma,
        ci_bounded=(theta - half, theta + half),
        if_values=ifd,
        bounds=raw_bounds,
        diagnostics={"arm1": r1.estimator, "arm0": r0.estimator},
    )


def zero_lambda_fit(reference: NuisanceValues) -> LambdaFit:
    """A degenerate residual-regression fit that predicts zero everywhere.

    Forces the drift-corrected estimators back to their classical versions;
    used by reduction diagnostics and tests.
    """

    def flat(value: float, clip=None) -> KernelSmoother:
        xs = np.linspace(0.0, 1.0, 5)
        ys = np.full(5, value)
        return KernelSmoother(
            kernel="epanechnikov", bandwidth_opt=10.0, bandwidth=10.0, xs=xs, ys=ys, clip=clip
        )

    return LambdaFit(
        gamma_A=flat(0.5, clip=(0.0005, 0.9995)),
        gamma_M=flat(0.5, clip=(0.0005, 0.9995)),
        r_A=flat(0.0),
        r_M=flat(0.0),
        e=flat(0.0),
    )
