"""Regression learners for the nuisance parameters.

Three self-contained learners: quasi-binomial logistic regression fitted by
iteratively reweighted least squares (IRLS), L1-penalized logistic regression
fitted by cyclic coordinate descent over interaction-expanded designs, and a
cross-validated convex stacking ensemble.

The IRLS solver accepts fractional responses in [0, 1]; the targeted
fluctuation steps in :mod:`driftdr.estimators` reuse it with offsets and no
intercept.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit
from scipy.special import expit, logit

__all__ = [
    "DesignSpec",
    "FittedLearner",
    "expand_design",
    "fit_logistic_irls",
    "fit_logistic_lasso",
    "fit_stacking",
    "irls_solve",
    "stratified_folds",
]

# Coefficients beyond this magnitude on the logit scale indicate separation;
# the fit is capped and flagged instead of diverging.
SEPARATION_CAP = 20.0

IRLS_TOL = 1e-10
IRLS_MAX_ITER = 100

# Ensemble predictions are clipped into this interval (they feed logits).
ENSEMBLE_CLIP = (0.0005, 0.9995)


@dataclass(frozen=True)
class DesignSpec:
    """How raw covariates map to model features.

    ``interaction_order`` k enumerates all products of up to k *distinct*
    covariates (no powers of a single covariate).
    """

    interaction_order: int = 1
    include_intercept: bool = True
    standardize: bool = False

    def __post_init__(self):
        if self.interaction_order not in (1, 2, 3, 4):
            raise ValueError("interaction_order must be in {1, 2, 3, 4}")


def _index_tuples(p: int, order: int) -> list[tuple[int, ...]]:
    out = []
    for k in range(1, order + 1):
        out.extend(itertools.combinations(range(p), k))
    # lexicographic by index tuple, shorter tuples first within the same prefix
    return sorted(out, key=lambda t: (len(t), t))


def expand_design(w: np.ndarray, spec: DesignSpec) -> np.ndarray:
    """Expand covariates into the interaction design of ``spec``.

    Accepts a single covariate vector or an (n, p) matrix; returns the
    feature vector/matrix with deterministic lexicographic feature order and
    an optional leading intercept column.
    """
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    W = w[None, :] if single else w
    n, p = W.shape
    cols = []
    if spec.include_intercept:
        cols.append(np.ones(n))
    for idx in _index_tuples(p, spec.interaction_order):
        cols.append(np.prod(W[:, idx], axis=1))
    X = np.column_stack(cols)
    return X[0] if single else X


def irls_solve(
    X: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    tol: float = IRLS_TOL,
    max_iter: int = IRLS_MAX_ITER,
) -> tuple[np.ndarray, bool]:
    """Quasi-binomial MLE by IRLS. Returns (coefficients, separation_flag).

    ``X`` is used as given (the caller supplies an intercept column if one is
    wanted). Zero-variance columns get coefficient zero via the
    pseudo-inverse solve. Coefficients exceeding the separation cap are
    clamped and flagged rather than allowed to diverge.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    beta = np.zeros(p)
    flagged = False
    for _ in range(max_iter):
        eta = off + X @ beta
        mu = expit(eta)
        v = np.maximum(mu * (1.0 - mu), 1e-10)
        wirls = wts * v
        z = (eta - off) + (y - mu) / v
        XtW = X.T * wirls
        A = XtW @ X
        b = XtW @ z
        try:
            new = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            new = np.linalg.lstsq(A, b, rcond=None)[0]
        if not np.isfinite(new).all():
            new = np.linalg.lstsq(A, b, rcond=None)[0]
        if np.abs(new).max(initial=0.0) > SEPARATION_CAP:
            new = np.clip(new, -SEPARATION_CAP, SEPARATION_CAP)
            flagged = True
        step = np.abs(new - beta).max(initial=0.0)
        beta = new
        if step < tol:
            break
    return beta, flagged


@dataclass
class FittedLearner:
    """A fitted prediction function mapping covariates to means in [0, 1].

    ``design`` describes how raw covariates expand to features; when absent,
    ``predict`` expects the already-expanded feature matrix. Stacking
    ensembles hold sub-learners and simplex weights instead of coefficients.
    """

    kind: str  # {"logistic_main_terms", "logistic_lasso", "stacking_ensemble", "known_constant"}
    coefficients: np.ndarray | None = None
    design: DesignSpec | None = None
    separation_flagged: bool = False
    constant: float | None = None
    members: list["FittedLearner"] = field(default_factory=list)
    member_names: list[str] = field(default_factory=list)
    weights: np.ndarray | None = None
    cv_lambda: float | None = None
    cv_risk: float | None = None

    def predict(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.kind == "known_constant":
            n = 1 if w.ndim == 1 else w.shape[0]
            out = np.full(n, float(self.constant))
            return out[0] if w.ndim == 1 else out
        if self.kind == "stacking_ensemble":
            preds = np.stack([m.predict(w) for m in self.members], axis=-1)
            out = preds @ self.weights
            return np.clip(out, *ENSEMBLE_CLIP)
        X = expand_design(w, self.design) if self.design is not None else w
        single = X.ndim == 1
        if single:
            X = X[None, :]
        out = expit(X @ self.coefficients)
        return out[0] if single else out


def fit_logistic_irls(
    X: np.ndarray,
    y: np.ndarray,
    offset: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    design: DesignSpec | None = None,
) -> FittedLearner:
    """Main-terms (or caller-expanded) logistic regression via IRLS."""
    beta, flagged = irls_solve(X, y, offset=offset, weights=weights)
    return FittedLearner(
        kind="logistic_main_terms",
        coefficients=beta,
        design=design,
        separation_flagged=flagged,
    )


# ---------------------------------------------------------------------------
# L1-penalized logistic regression: IRLS outer loop with cyclic coordinate
# descent on the weighted quadratic approximation, warm starts along the
# lambda path, active-set sweeps.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _cd_solve(X, wirls, z, beta, b0, lam, cd_tol, max_cd):
    """Coordinate descent on one weighted quadratic approximation.

    ``beta`` is updated in place; the new intercept is returned. The
    convergence criterion is the largest weighted squared coordinate change
    max_j (v_j/n) d_j^2 < cd_tol over a full sweep; active-set sweeps run
    between full sweeps. The residual vector is maintained incrementally.
    """
    n, p = X.shape
    r = np.empty(n)
    for i in range(n):
        eta = b0
        for j in range(p):
            if beta[j] != 0.0:
                eta += X[i, j] * beta[j]
        r[i] = z[i] - eta
    wsum = 0.0
    for i in range(n):
        wsum += wirls[i]
    v = np.empty(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += wirls[i] * X[i, j] * X[i, j]
        v[j] = s / n
    active = np.zeros(p, np.bool_)
    for j in range(p):
        active[j] = beta[j] != 0.0
    full = True
    for _ in range(max_cd):
        crit = 0.0
        rw = 0.0
        for i in range(n):
            rw += wirls[i] * r[i]
        db0 = rw / wsum
        if db0 != 0.0:
            b0 += db0
            for i in range(n):
                r[i] -= db0
            c = (wsum / n) * db0 * db0
            if c > crit:
                crit = c
        for j in range(p):
            if not full and not active[j]:
                continue
            if v[j] <= 0.0:
                continue
            num = 0.0
            for i in range(n):
                num += wirls[i] * X[i, j] * r[i]
            num = num / n + v[j] * beta[j]
            if num > lam:
                new = (num - lam) / v[j]
            elif num < -lam:
                new = (num + lam) / v[j]
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * d
                beta[j] = new
                active[j] = new != 0.0
                c = v[j] * d * d
                if c > crit:
                    crit = c
        if crit < cd_tol:
            if full:
                break
            full = True  # confirm with a full sweep before declaring done
        else:
            full = False
    return b0


@njit(cache=True)
def _lasso_path(X, y, lambdas, cd_tol, irls_tol, max_irls, max_cd):
    """Path of L1-penalized quasi-binomial fits on a standardized design.

    Returns (intercepts, coefficient matrix) indexed by lambda.
    """
    n, p = X.shape
    nlam = lambdas.shape[0]
    out_b0 = np.zeros(nlam)
    out_beta = np.zeros((nlam, p))
    ybar = 0.0
    for i in range(n):
        ybar += y[i]
    ybar /= n
    if ybar <= 1e-12:
        ybar = 1e-12
    if ybar >= 1 - 1e-12:
        ybar = 1 - 1e-12
    b0 = np.log(ybar / (1.0 - ybar))
    beta = np.zeros(p)
    for li in range(nlam):
        b0 = _irls_cd(X, y, lambdas[li], b0, beta, cd_tol, irls_tol, max_irls, max_cd)
        cap = 250.0
        if abs(b0) > cap:
            b0 = cap if b0 > 0 else -cap
        out_b0[li] = b0
        for j in range(p):
            out_beta[li, j] = beta[j]
    return out_b0, out_beta


@njit(cache=True)
def _irls_cd(X, y, lam, b0, beta, cd_tol, irls_tol, max_irls, max_cd):
    """IRLS with a coordinate-descent inner solve at one lambda.

    ``beta`` is updated in place from its warm-start value; returns the
    intercept.
    """
    n, p = X.shape
    wirls = np.empty(n)
    z = np.empty(n)
    beta_prev = np.empty(p)
    for _ in range(max_irls):
        b0_prev = b0
        for j in range(p):
            beta_prev[j] = beta[j]
        # quadratic approximation at current (b0, beta)
        for i in range(n):
            eta = b0
            for j in range(p):
                if beta[j] != 0.0:
                    eta += X[i, j] * beta[j]
            mu = 1.0 / (1.0 + np.exp(-eta))
            v = mu * (1.0 - mu)
            if v < 1e-6:
                v = 1e-6
            wirls[i] = v
            z[i] = eta + (y[i] - mu) / v
        b0 = _cd_solve(X, wirls, z, beta, b0, lam, cd_tol, max_cd)
        outer_change = abs(b0 - b0_prev)
        for j in range(p):
            d = abs(beta[j] - beta_prev[j])
            if d > outer_change:
                outer_change = d
        if outer_change < irls_tol:
            break
    return b0


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd, mu, sd


def default_lambda_grid(X: np.ndarray, y: np.ndarray, n_lambda: int = 50) -> np.ndarray:
    """50 log-spaced values from lambda_max down to 1e-4 * lambda_max.

    lambda_max is the smallest penalty giving an all-zero non-intercept
    solution on the standardized design.
    """
    Xs, _, _ = _standardize(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(y)
    lam_max = np.abs(Xs.T @ (y - y.mean())).max() / n
    lam_max = max(lam_max, 1e-10)
    return np.geomspace(lam_max, 1e-4 * lam_max, n_lambda)


def _binomial_deviance(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-2.0 * np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def fit_logistic_lasso(
    X: np.ndarray,
    y: np.ndarray,
    lambda_grid: np.ndarray | None = None,
    folds: int = 5,
    rng: np.random.Generator | None = None,
    design: DesignSpec | None = None,
) -> FittedLearner:
    """L1-penalized logistic regression with K-fold CV choice of lambda.

    Cyclic coordinate descent on the standardized design with warm starts
    along a decreasing lambda grid; the intercept is unpenalized and
    coefficients are returned on the original scale.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if folds < 2:
        raise ValueError("at least 2 folds are required")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(X, y)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0:
        raise ValueError("lambda grid must be nonempty")
    if lambda_grid.size > 1 and not (np.diff(lambda_grid) < 0).all():
        raise ValueError("lambda grid must be strictly decreasing")
    rng = rng or np.random.default_rng(0)
    Xs, mu, sd = _standardize(X)
    n = len(y)

    fold_of = stratified_folds(y, folds, rng)
    cv_dev = np.zeros(len(lambda_grid))
    for f in range(folds):
        tr = fold_of != f
        te = ~tr
        b0s, betas = _lasso_path(Xs[tr], y[tr], lambda_grid, 1e-6, 1e-3, 6, 60)
        etas = b0s[:, None] + betas @ Xs[te].T
        for li in range(len(lambda_grid)):
            cv_dev[li] += _binomial_deviance(y[te], expit(etas[li])) * te.sum()
    cv_dev /= n
    best = int(np.argmin(cv_dev))

    # loose pass down the path for warm starts, then a tight polish at the
    # selected lambda only
    b0s, betas = _lasso_path(Xs, y, lambda_grid[: best + 1], 1e-6, 1e-3, 6, 60)
    beta_std = betas[best].copy()
    b0_std = float(
        _irls_cd(Xs, y, float(lambda_grid[best]), float(b0s[best]), beta_std, 1e-14, 1e-8, 50, 2000)
    )
    coef = beta_std / sd
    intercept = b0_std - float(coef @ mu)
    full_coef = np.concatenate([[intercept], coef])
    return FittedLearner(
        kind="logistic_lasso",
        coefficients=full_coef,
        design=design,
        cv_lambda=float(lambda_grid[best]),
        cv_risk=float(cv_dev[best]),
        # predict() expects a leading intercept column when design is None
    )


def lasso_predict_features(learner: FittedLearner, X: np.ndarray) -> np.ndarray:
    """Predict from a lasso fit given the raw (unstandardized) feature matrix."""
    X = np.asarray(X, dtype=float)
    b = learner.coefficients
    return expit(b[0] + X @ b[1:])


# ---------------------------------------------------------------------------
# Stacking ensemble
# ---------------------------------------------------------------------------


def stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic stratified-by-response fold labels.

    Binary responses are stratified exactly; continuous responses are
    stratified by rank so each fold spans the response range.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    fold_of = np.empty(n, dtype=int)
    order = np.argsort(y, kind="stable")
    # within blocks of equal rank region, shuffle then deal round-robin
    shuffled = order.copy()
    rng.shuffle(shuffled)
    # stable sort of shuffled indices by response keeps the shuffle within ties
    shuffled = shuffled[np.argsort(y[shuffled], kind="stable")]
    for pos, idx in enumerate(shuffled):
        fold_of[idx] = pos % k
    return fold_of


def _risk(y: np.ndarray, p: np.ndarray, loss: str) -> float:
    if loss == "bernoulli_loglik":
        pc = np.clip(p, 1e-12, 1 - 1e-12)
        return float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
    if loss == "squared_error":
        return float(np.mean((y - p) ** 2))
    raise ValueError(f"unknown loss {loss!r}")


def _risk_grad(y: np.ndarray, Z: np.ndarray, w: np.ndarray, loss: str) -> np.ndarray:
    p = Z @ w
    if loss == "bernoulli_loglik":
        pc = np.clip(p, 1e-12, 1 - 1e-12)
        g = (-y / pc + (1 - y) / (1 - pc)) / len(y)
        return Z.T @ g
    g = 2.0 * (p - y) / len(y)
    return Z.T @ g


def _simplex_weights(y: np.ndarray, Z: np.ndarray, loss: str, tol: float = 1e-8) -> np.ndarray:
    """Exponentiated-gradient solve for simplex-constrained risk minimization."""
    L = Z.shape[1]
    w = np.full(L, 1.0 / L)
    risk = _risk(y, Z @ w, loss)
    step = 1.0
    for _ in range(5000):
        g = _risk_grad(y, Z, w, loss)
        improved = False
        while step > 1e-12:
            cand = w * np.exp(-step * (g - g.min()))
            cand /= cand.sum()
            r = _risk(y, Z @ cand, loss)
            if r < risk - 1e-15:
                improved = risk - r > tol
                w, risk = cand, r
                step *= 1.3
                break
            step *= 0.5
        if not improved:
            break
    return w


def fit_stacking(
    library: Sequence[tuple[str, Callable[[np.ndarray, np.ndarray, np.random.Generator], FittedLearner]]],
    X: np.ndarray,
    y: np.ndarray,
    folds: int = 5,
    loss: str = "bernoulli_loglik",
    rng: np.random.Generator | None = None,
) -> FittedLearner:
    """Convex stacking: simplex weights minimizing cross-validated risk.

    ``library`` entries are (name, fit) pairs where ``fit(X, y, rng)`` returns
    a learner predicting from the same covariate matrix ``X``. Members that
    fail to fit are dropped with a warning.
    """
    if len(library) < 2:
        raise ValueError("stacking needs at least 2 library members")
    if folds < 2:
        raise ValueError("at least 2 folds are required")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = rng or np.random.default_rng(0)
    fold_of = stratified_folds(y, folds, rng)
    n = len(y)

    names, fitters = [], []
    cv_cols = []
    for name, fit in library:
        col = np.empty(n)
        try:
            for f in range(folds):
                tr = fold_of != f
                sub = fit(X[tr], y[tr], np.random.default_rng(rng.integers(2**63)))
                col[~tr] = sub.predict(X[~tr])
        except Exception as exc:  # noqa: BLE001 - member failure is survivable
            warnings.warn(f"stacking member {name!r} failed to fit and was dropped: {exc}")
            continue
        names.append(name)
        fitters.append(fit)
        cv_cols.append(col)
    if not cv_cols:
        raise RuntimeError("all stacking library members failed to fit")
    Z = np.clip(np.column_stack(cv_cols), *ENSEMBLE_CLIP)
    if len(cv_cols) == 1:
        w = np.array([1.0])
    else:
        w = _simplex_weights(y, Z, loss)
    members = [fit(X, y, np.random.default_rng(rng.integers(2**63))) for fit in fitters]
    return FittedLearner(
        kind="stacking_ensemble",
        members=members,
        member_names=names,
        weights=w,
        cv_risk=_risk(y, Z @ w, loss),
    )
