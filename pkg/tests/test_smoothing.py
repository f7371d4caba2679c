import numpy as np
import pytest

from driftdr.estimators import NuisanceValues
from driftdr.smoothing import (
    GAMMA_CLIP,
    KernelSmoother,
    SmoothingConfig,
    _bandwidth_grid,
    _cv_errors_epa,
    fit_kernel,
    fit_lambda,
)
from tests.conftest import make_dataset


def epa_oracle(xs, ys, h, x0):
    """Direct-formula Nadaraya-Watson oracle with the Epanechnikov kernel."""
    u = (xs - x0) / h
    k = np.maximum(1.0 - u * u, 0.0)
    if k.sum() <= 0:
        return None
    return float((k * ys).sum() / k.sum())


def gauss_oracle(xs, ys, h, x0):
    k = np.exp(-0.5 * ((xs - x0) / h) ** 2)
    return float((k * ys).sum() / k.sum())


class TestKernelSmoother:
    def test_matches_direct_oracle_epanechnikov(self, rng):
        xs = rng.uniform(0, 1, size=400)
        ys = rng.normal(size=400)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(0))
        queries = rng.uniform(0, 1, size=50)
        pred = sm.predict(queries)
        for q, p in zip(queries, pred):
            oracle = epa_oracle(np.sort(xs), ys[np.argsort(xs, kind="stable")], sm.bandwidth, q)
            if oracle is not None:
                assert p == pytest.approx(oracle, abs=1e-12)

    def test_matches_direct_oracle_gaussian(self, rng):
        xs = rng.uniform(0, 1, size=200)
        ys = rng.normal(size=200)
        sm = fit_kernel(xs, ys, config=SmoothingConfig(kernel="gaussian"), rng=np.random.default_rng(0))
        for q in rng.uniform(0, 1, size=20):
            assert sm.predict(q) == pytest.approx(gauss_oracle(xs, ys, sm.bandwidth, q), abs=1e-10)

    def test_constant_response(self, rng):
        xs = rng.uniform(0, 1, size=100)
        ys = np.full(100, 0.42)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(0))
        assert np.allclose(sm.predict(rng.uniform(0, 1, size=30)), 0.42, atol=1e-12)

    def test_degenerate_single_x_value(self):
        xs = np.full(50, 0.5)
        ys = np.linspace(0, 1, 50)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(0))
        assert sm.predict(0.5) == pytest.approx(ys.mean(), abs=1e-12)

    def test_undersmoothing_identity_bit_exact(self, rng):
        xs = rng.uniform(0, 1, size=300)
        ys = rng.normal(size=300)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(0))
        assert sm.bandwidth == 300 ** (-0.1) * sm.bandwidth_opt

    def test_range_invariant(self, rng):
        # a weighted average never leaves the response range
        xs = rng.uniform(0, 1, size=200)
        ys = rng.uniform(0.2, 0.7, size=200)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(0))
        pred = sm.predict(rng.uniform(-0.5, 1.5, size=100))
        assert pred.min() >= 0.2 - 1e-12 and pred.max() <= 0.7 + 1e-12

    def test_clipping(self, rng):
        xs = rng.uniform(0, 1, size=100)
        ys = rng.uniform(-1, 2, size=100)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(0), clip=(0.0, 1.0))
        pred = sm.predict(xs)
        assert pred.min() >= 0.0 and pred.max() <= 1.0

    def test_far_query_falls_back_to_nearest_neighbor(self, rng):
        xs = np.linspace(0, 1, 50)
        ys = np.arange(50, dtype=float)
        sm = KernelSmoother(kernel="epanechnikov", bandwidth_opt=0.01, bandwidth=0.01, xs=xs, ys=ys)
        assert np.isfinite(sm.predict(100.0))

    def test_min_subset_enforced(self):
        with pytest.raises(ValueError, match="at least"):
            fit_kernel(np.array([0.1, 0.2]), np.array([1.0, 0.0]))

    def test_fixed_bandwidth_bypasses_cv(self, rng):
        xs = rng.uniform(0, 1, size=80)
        ys = rng.normal(size=80)
        sm = fit_kernel(xs, ys, bandwidth_opt=0.3)
        assert sm.bandwidth_opt == 0.3
        assert sm.bandwidth == 80 ** (-0.1) * 0.3

    def test_unknown_kernel_rejected(self):
        with pytest.raises(ValueError):
            SmoothingConfig(kernel="triangular")


class TestCvSearch:
    def test_prefix_sum_cv_matches_direct(self, rng):
        """The windowed prefix-sum CV error equals a brute-force leave-fold-out
        Nadaraya-Watson computation."""
        n = 150
        xs = np.sort(rng.uniform(0, 1, size=n))
        ys = np.sin(4 * xs) + rng.normal(scale=0.2, size=n)
        k = 5
        fold_of = rng.permutation(n) % k
        grid = np.array([0.05, 0.15, 0.4])
        fast = _cv_errors_epa(xs, ys, fold_of, k, grid)
        train_mean = np.array([ys[fold_of != f].mean() for f in range(k)])
        for gi, h in enumerate(grid):
            errs = []
            for i in range(n):
                mask = fold_of != fold_of[i]
                oracle = epa_oracle(xs[mask], ys[mask], h, xs[i])
                if oracle is None:
                    oracle = train_mean[fold_of[i]]
                errs.append((ys[i] - oracle) ** 2)
            assert fast[gi] == pytest.approx(np.mean(errs), abs=1e-8)

    def test_grid_spans_sd_to_range(self, rng):
        xs = rng.uniform(0, 2, size=500)
        grid = _bandwidth_grid(xs, 30)
        assert len(grid) == 30
        assert grid[0] == pytest.approx(0.01 * xs.std())
        assert grid[-1] == pytest.approx(2.0 * (xs.max() - xs.min()))

    def test_cv_picks_reasonable_bandwidth(self, rng):
        # smooth signal with noise: the chosen bandwidth is neither extreme
        xs = rng.uniform(0, 1, size=600)
        ys = np.sin(3 * xs) + rng.normal(scale=0.3, size=600)
        sm = fit_kernel(xs, ys, rng=np.random.default_rng(1))
        grid = _bandwidth_grid(np.sort(xs), 30)
        assert grid[0] < sm.bandwidth_opt < grid[-1]


class TestFitLambda:
    def test_five_components_with_masks(self):
        d = make_dataset(n=400, seed=2)
        v = NuisanceValues(
            g_A=np.full(d.n, 0.5),
            g_M=np.full(d.n, 0.7),
            m=np.clip(0.3 + 0.1 * d.w[:, 0], 0.05, 0.95),
        )
        lam = fit_lambda(d, v, rng=np.random.default_rng(0))
        arm = d.a == 1
        comp = arm & (d.m == 1)
        assert lam.gamma_A.n_train == d.n
        assert lam.gamma_M.n_train == arm.sum()
        assert lam.r_A.n_train == d.n
        assert lam.r_M.n_train == arm.sum()
        assert lam.e.n_train == comp.sum()

    def test_gamma_predictions_clipped(self):
        d = make_dataset(n=300, seed=3)
        v = NuisanceValues(
            g_A=np.full(d.n, 0.5), g_M=np.full(d.n, 0.7), m=np.clip(0.3 + 0.1 * d.w[:, 0], 0.05, 0.95)
        )
        lam = fit_lambda(d, v, rng=np.random.default_rng(0))
        p = lam.gamma_M.predict(np.linspace(-5, 5, 200))
        assert p.min() >= GAMMA_CLIP[0] and p.max() <= GAMMA_CLIP[1]

    def test_bandwidth_reuse(self):
        d = make_dataset(n=300, seed=4)
        v = NuisanceValues(
            g_A=np.full(d.n, 0.5), g_M=np.full(d.n, 0.7), m=np.clip(0.3 + 0.1 * d.w[:, 0], 0.05, 0.95)
        )
        lam = fit_lambda(d, v, rng=np.random.default_rng(0))
        lam2 = fit_lambda(d, v, rng=np.random.default_rng(99), bandwidths_opt=lam.bandwidths_opt)
        assert lam2.bandwidths_opt == lam.bandwidths_opt
