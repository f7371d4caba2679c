"""Univariate kernel regression with cross-validated, undersmoothed bandwidth.

Nadaraya-Watson estimation with an Epanechnikov (default) or Gaussian
second-order kernel. The cross-validation bandwidth search exploits the
compact support of the Epanechnikov kernel: window sums reduce to prefix-sum
lookups, so a full K-fold search over the bandwidth grid costs
O(grid * n log n). Final predictions use direct windowed sums.

Also builds the five univariate residual regressions used by the
drift-corrected estimators: two conditional probabilities (gamma_A, gamma_M),
two inverse-probability residual regressions (r_A, r_M), and the outcome
residual regression (e).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = ["KernelSmoother", "LambdaFit", "fit_kernel", "fit_lambda", "SmoothingConfig"]

# Predictions of the gamma smoothers are clipped here: they enter denominators.
GAMMA_CLIP = (0.0005, 0.9995)

UNDERSMOOTH_EXPONENT = -0.1

# Bandwidth grid spans [0.01 * sd(x), 2 * range(x)], 30 log-spaced values.
GRID_LO_SD = 0.01
GRID_HI_RANGE = 2.0
GRID_SIZE = 30
CV_FOLDS = 10

MIN_SUBSET = 5


@dataclass(frozen=True)
class SmoothingConfig:
    kernel: str = "epanechnikov"  # or "gaussian"
    folds: int = CV_FOLDS
    grid_size: int = GRID_SIZE

    def __post_init__(self):
        if self.kernel not in ("epanechnikov", "gaussian"):
            raise ValueError(f"unknown kernel {self.kernel!r}")


@njit(cache=True)
def _nw_predict_epa(xs, ys, h, queries):
    """Windowed Nadaraya-Watson with Epanechnikov kernel on sorted training x.

    Empty windows expand the bandwidth by factor 2 up to 10 times, then fall
    back to the nearest-neighbor value, so predictions are always finite.
    """
    n = xs.shape[0]
    out = np.empty(queries.shape[0])
    for t in range(queries.shape[0]):
        x0 = queries[t]
        hh = h
        found = False
        val = 0.0
        for _ in range(11):
            lo = np.searchsorted(xs, x0 - hh)
            hi = np.searchsorted(xs, x0 + hh, side="right")
            num = 0.0
            den = 0.0
            for i in range(lo, hi):
                u = (xs[i] - x0) / hh
                kv = 1.0 - u * u
                if kv > 0.0:
                    num += kv * ys[i]
                    den += kv
            if den > 0.0:
                val = num / den
                found = True
                break
            hh *= 2.0
        if not found:
            # nearest neighbor
            j = np.searchsorted(xs, x0)
            if j <= 0:
                val = ys[0]
            elif j >= n:
                val = ys[n - 1]
            else:
                val = ys[j] if (xs[j] - x0) < (x0 - xs[j - 1]) else ys[j - 1]
        out[t] = val
    return out


def _nw_predict_gauss(xs, ys, h, queries, chunk=2000):
    n = len(xs)
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        q = queries[s : s + chunk]
        u = (xs[None, :] - q[:, None]) / h
        k = np.exp(-0.5 * u * u)
        den = k.sum(axis=1)
        num = k @ ys
        bad = den <= 0.0
        pred = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
        if bad.any():
            idx = np.clip(np.searchsorted(xs, q[bad]), 0, n - 1)
            pred[bad] = ys[idx]
        out[s : s + chunk] = pred
    return out


@dataclass
class KernelSmoother:
    """A fitted univariate Nadaraya-Watson smoother.

    ``bandwidth`` is the undersmoothed bandwidth n^{-0.1} * bandwidth_opt,
    held to that identity bit-exactly.
    """

    kernel: str
    bandwidth_opt: float
    bandwidth: float
    xs: np.ndarray  # sorted training index values
    ys: np.ndarray  # responses in the sorted order
    clip: tuple[float, float] | None = None

    @property
    def n_train(self) -> int:
        return len(self.xs)

    def predict(self, x0) -> np.ndarray:
        q = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.kernel == "epanechnikov":
            out = _nw_predict_epa(self.xs, self.ys, self.bandwidth, q)
        else:
            out = _nw_predict_gauss(self.xs, self.ys, self.bandwidth, q)
        if self.clip is not None:
            out = np.clip(out, *self.clip)
        return out if np.ndim(x0) else float(out[0])


def _bandwidth_grid(xs: np.ndarray, grid_size: int) -> np.ndarray:
    sd = xs.std()
    rng_x = xs.max() - xs.min()
    if rng_x <= 0.0 or sd <= 0.0:
        return np.array([1.0])
    return np.geomspace(GRID_LO_SD * sd, GRID_HI_RANGE * rng_x, grid_size)


def _cv_errors_epa(xs, ys, fold_of, k, grid):
    """Leave-fold-out squared-error for each bandwidth via prefix sums."""
    n = len(xs)
    stats = np.stack(
        [np.ones(n), xs, xs * xs, ys, ys * xs, ys * xs * xs], axis=1
    )  # (n, 6)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), fold_of] = 1.0
    # per-fold prefix sums, shape (n+1, 6, k)
    per_fold = np.zeros((n + 1, 6, k))
    np.cumsum(stats[:, :, None] * onehot[:, None, :], axis=0, out=per_fold[1:])
    total = per_fold[:, :, :].sum(axis=2)  # (n+1, 6)
    fold_mean_num = np.array([ys[fold_of != f].sum() for f in range(k)])
    fold_mean_den = np.array([(fold_of != f).sum() for f in range(k)])
    train_mean = fold_mean_num / np.maximum(fold_mean_den, 1)

    errs = np.empty(len(grid))
    f_idx = fold_of
    for gi, h in enumerate(grid):
        lo = np.searchsorted(xs, xs - h, side="left")
        hi = np.searchsorted(xs, xs + h, side="right")
        S = (total[hi] - total[lo]) - (
            per_fold[hi, :, f_idx] - per_fold[lo, :, f_idx]
        )  # (n, 6) window sums excluding own fold
        cnt, sx, sx2, sy, sxy, sx2y = S.T
        h2 = h * h
        den = cnt - (sx2 - 2.0 * xs * sx + xs * xs * cnt) / h2
        num = sy - (sx2y - 2.0 * xs * sxy + xs * xs * sy) / h2
        ok = den > 1e-10
        pred = np.where(ok, num / np.where(ok, den, 1.0), train_mean[f_idx])
        errs[gi] = np.mean((ys - pred) ** 2)
    return errs


def _cv_errors_gauss(xs, ys, fold_of, k, grid):
    n = len(xs)
    errs = np.empty(len(grid))
    fold_mean = np.array([ys[fold_of != f].mean() for f in range(k)])
    for gi, h in enumerate(grid):
        u = (xs[None, :] - xs[:, None]) / h
        K = np.exp(-0.5 * u * u)
        same_fold = fold_of[:, None] == fold_of[None, :]
        K = np.where(same_fold, 0.0, K)
        den = K.sum(axis=1)
        num = K @ ys
        ok = den > 0.0
        pred = np.where(ok, num / np.where(ok, den, 1.0), fold_mean[fold_of])
        errs[gi] = np.mean((ys - pred) ** 2)
    return errs


def fit_kernel(
    x: np.ndarray,
    y: np.ndarray,
    subset_mask: np.ndarray | None = None,
    config: SmoothingConfig = SmoothingConfig(),
    rng: np.random.Generator | None = None,
    bandwidth_opt: float | None = None,
    clip: tuple[float, float] | None = None,
) -> KernelSmoother:
    """Fit a Nadaraya-Watson smoother with CV-selected, undersmoothed bandwidth.

    ``bandwidth_opt`` bypasses the cross-validation search (used when the
    drift-corrected TMLE refits the smoothers at later iterations with the
    bandwidths held fixed).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if subset_mask is not None:
        x = x[subset_mask]
        y = y[subset_mask]
    n = len(x)
    if n < MIN_SUBSET:
        raise ValueError(f"kernel regression needs at least {MIN_SUBSET} rows, got {n}")
    order = np.argsort(x, kind="stable")
    xs = np.ascontiguousarray(x[order])
    ys = np.ascontiguousarray(y[order])

    if bandwidth_opt is None:
        grid = _bandwidth_grid(xs, config.grid_size)
        if len(grid) == 1:
            bandwidth_opt = float(grid[0])
        else:
            rng = rng or np.random.default_rng(0)
            k = min(config.folds, n)
            fold_of = rng.permutation(n) % k
            if config.kernel == "epanechnikov":
                errs = _cv_errors_epa(xs, ys, fold_of, k, grid)
            else:
                errs = _cv_errors_gauss(xs, ys, fold_of, k, grid)
            bandwidth_opt = float(grid[int(np.argmin(errs))])
    bandwidth = float(n**UNDERSMOOTH_EXPONENT * bandwidth_opt)
    return KernelSmoother(
        kernel=config.kernel,
        bandwidth_opt=float(bandwidth_opt),
        bandwidth=bandwidth,
        xs=xs,
        ys=ys,
        clip=clip,
    )


@dataclass
class LambdaFit:
    """The five fitted univariate regressions driving the drift correction.

    gamma_A and gamma_M predictions are clipped into (0, 1) because they
    enter denominators of the tilting covariates.
    """

    gamma_A: KernelSmoother
    gamma_M: KernelSmoother
    r_A: KernelSmoother
    r_M: KernelSmoother
    e: KernelSmoother

    @property
    def bandwidths_opt(self) -> dict[str, float]:
        return {
            "gamma_A": self.gamma_A.bandwidth_opt,
            "gamma_M": self.gamma_M.bandwidth_opt,
            "r_A": self.r_A.bandwidth_opt,
            "r_M": self.r_M.bandwidth_opt,
            "e": self.e.bandwidth_opt,
        }


def fit_lambda(
    d,
    values,
    config: SmoothingConfig = SmoothingConfig(),
    rng: np.random.Generator | None = None,
    bandwidths_opt: dict[str, float] | None = None,
) -> LambdaFit:
    """Fit the five residual regressions against the current nuisance values.

    ``values`` carries per-row nuisance evaluations (attributes ``g_A``,
    ``g_M``, ``m``; see :class:`driftdr.estimators.NuisanceValues`). The
    gamma/r smoothers are indexed by the fitted outcome regression m(W); the
    outcome-residual smoother e is indexed by g(W) = g_A(W) g_M(W).
    """
    rng = rng or np.random.default_rng(0)
    a = d.a
    mm = d.m
    yf = d.y_filled
    gA, gM, mh = values.g_A, values.g_M, values.m
    idx_m = mh
    idx_g = gA * gM
    arm = a == 1
    comp = (a == 1) & (mm == 1)
    if comp.sum() < MIN_SUBSET:
        raise ValueError("the (A=1, M=1) subset is too small for kernel regression")
    bw = bandwidths_opt or {}

    def fk(x, y, mask, key, clip=None):
        return fit_kernel(
            x,
            y,
            subset_mask=mask,
            config=config,
            rng=rng,
            bandwidth_opt=bw.get(key),
            clip=clip,
        )

    return LambdaFit(
        gamma_A=fk(idx_m, a.astype(float), None, "gamma_A", clip=GAMMA_CLIP),
        gamma_M=fk(idx_m, mm.astype(float), arm, "gamma_M", clip=GAMMA_CLIP),
        r_A=fk(idx_m, (a - gA) / gA, None, "r_A"),
        r_M=fk(idx_m, (mm - gM) / (gA * gM), arm, "r_M"),
        e=fk(idx_g, yf - mh, comp, "e"),
    )
