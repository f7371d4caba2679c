import math
import warnings

import numpy as np
import pytest
from scipy.special import expit

from driftdr.learners import (
    DesignSpec,
    FittedLearner,
    _lasso_path,
    _simplex_weights,
    _standardize,
    default_lambda_grid,
    expand_design,
    fit_logistic_irls,
    fit_logistic_lasso,
    fit_stacking,
    irls_solve,
    stratified_folds,
)


def newton_logistic(X, y, offset=None, weights=None, tol=1e-12, iters=200):
    """Independent dense Newton-Raphson oracle for logistic regression."""
    n, p = X.shape
    off = np.zeros(n) if offset is None else offset
    wts = np.ones(n) if weights is None else weights
    beta = np.zeros(p)
    for _ in range(iters):
        eta = off + X @ beta
        mu = expit(eta)
        grad = X.T @ (wts * (y - mu))
        W = wts * mu * (1 - mu) + 1e-12
        H = X.T @ (X * W[:, None])
        step = np.linalg.solve(H, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


class TestExpandDesign:
    def test_order_counts_six_covariates(self):
        w = np.random.default_rng(0).normal(size=(5, 6))
        # C(6,1)+C(6,2)+C(6,3)+C(6,4) = 6+15+20+15 = 56
        for order, count in [(1, 6), (2, 21), (3, 41), (4, 56)]:
            X = expand_design(w, DesignSpec(interaction_order=order, include_intercept=False))
            assert X.shape == (5, count)

    def test_intercept_column_first(self):
        w = np.array([[2.0, 3.0]])
        X = expand_design(w, DesignSpec(interaction_order=2, include_intercept=True))
        assert X.tolist() == [[1.0, 2.0, 3.0, 6.0]]

    def test_products_are_distinct_covariates(self):
        # no squared terms: order-2 on p=2 has exactly one product column
        w = np.array([[2.0, 5.0]])
        X = expand_design(w, DesignSpec(interaction_order=2, include_intercept=False))
        assert X.tolist() == [[2.0, 5.0, 10.0]]

    def test_vector_input(self):
        x = expand_design(np.array([2.0, 3.0]), DesignSpec(interaction_order=2, include_intercept=True))
        assert x.tolist() == [1.0, 2.0, 3.0, 6.0]

    def test_invalid_order(self):
        with pytest.raises(ValueError):
            DesignSpec(interaction_order=5)


class TestIrls:
    def test_two_by_two_closed_form(self):
        # intercept-only on binary x: coefficients are the log-odds in each cell
        x = np.array([0.0] * 50 + [1.0] * 50)
        y = np.array([1.0] * 10 + [0.0] * 40 + [1.0] * 30 + [0.0] * 20)
        X = np.column_stack([np.ones(100), x])
        beta, flagged = irls_solve(X, y)
        assert not flagged
        assert beta[0] == pytest.approx(math.log(10 / 40), abs=1e-8)
        assert beta[0] + beta[1] == pytest.approx(math.log(30 / 20), abs=1e-8)

    def test_matches_newton_oracle(self, rng):
        X = np.column_stack([np.ones(300), rng.normal(size=(300, 3))])
        y = (rng.uniform(size=300) < expit(0.3 + X[:, 1] - 0.5 * X[:, 2])).astype(float)
        beta, _ = irls_solve(X, y)
        oracle = newton_logistic(X, y)
        assert np.allclose(beta, oracle, atol=1e-8)

    def test_offset_and_weights(self, rng):
        X = np.column_stack([np.ones(200), rng.normal(size=200)])
        off = rng.normal(size=200) * 0.5
        wts = rng.uniform(0.5, 2.0, size=200)
        y = (rng.uniform(size=200) < expit(off + 0.5 * X[:, 1])).astype(float)
        beta, _ = irls_solve(X, y, offset=off, weights=wts)
        oracle = newton_logistic(X, y, offset=off, weights=wts)
        assert np.allclose(beta, oracle, atol=1e-8)

    def test_separation_flag(self):
        x = np.array([-2.0, -1.0, 1.0, 2.0])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        X = np.column_stack([np.ones(4), x])
        beta, flagged = irls_solve(X, y)
        assert flagged

    def test_learner_predict(self, rng):
        w = rng.normal(size=(150, 2))
        y = (rng.uniform(size=150) < expit(w[:, 0])).astype(float)
        spec = DesignSpec(interaction_order=1, include_intercept=True)
        fit = fit_logistic_irls(expand_design(w, spec), y, design=spec)
        p = fit.predict(w)
        assert p.shape == (150,)
        assert ((p > 0) & (p < 1)).all()


class TestLasso:
    def test_full_shrinkage_at_lambda_max(self, rng):
        X = rng.normal(size=(120, 8))
        y = (rng.uniform(size=120) < expit(X[:, 0])).astype(float)
        Xs, _, _ = _standardize(X)
        grid = default_lambda_grid(X, y)
        b0s, betas = _lasso_path(Xs, y, grid, 1e-12, 1e-8, 30, 500)
        assert np.all(betas[0] == 0.0)  # lambda_max kills every coefficient

    def test_lambda_zero_matches_irls(self, rng):
        X = rng.normal(size=(200, 4))
        y = (rng.uniform(size=200) < expit(0.4 * X[:, 0] - 0.3 * X[:, 2])).astype(float)
        Xs, mu, sd = _standardize(X)
        grid = np.array([0.05, 1e-10])
        b0s, betas = _lasso_path(Xs, y, grid, 1e-16, 1e-10, 100, 5000)
        oracle = newton_logistic(np.column_stack([np.ones(200), Xs]), y)
        assert abs(b0s[-1] - oracle[0]) < 1e-6
        assert np.allclose(betas[-1], oracle[1:], atol=1e-6)

    def test_kkt_conditions_at_selected_lambda(self, rng):
        X = rng.normal(size=(250, 10))
        y = (rng.uniform(size=250) < expit(X[:, 0] - 0.7 * X[:, 1])).astype(float)
        fit = fit_logistic_lasso(X, y, rng=np.random.default_rng(1))
        lam = fit.cv_lambda
        b = fit.coefficients
        Xs, mu, sd = _standardize(X)
        beta_std = b[1:] * sd
        b0_std = b[0] + float(b[1:] @ mu)
        p = expit(b0_std + Xs @ beta_std)
        grad = Xs.T @ (y - p) / len(y)
        for j in range(X.shape[1]):
            if beta_std[j] != 0.0:
                assert grad[j] == pytest.approx(lam * np.sign(beta_std[j]), abs=1e-6)
            else:
                assert abs(grad[j]) <= lam + 1e-6
        # unpenalized intercept: score is exactly zero
        assert abs(np.mean(y - p)) < 1e-6

    def test_path_sparsity_increases(self, rng):
        X = rng.normal(size=(150, 12))
        y = (rng.uniform(size=150) < expit(X[:, 0] + X[:, 1])).astype(float)
        Xs, _, _ = _standardize(X)
        grid = default_lambda_grid(X, y)
        _, betas = _lasso_path(Xs, y, grid, 1e-10, 1e-7, 20, 300)
        nnz = (betas != 0).sum(axis=1)
        assert nnz[0] == 0
        assert nnz[-1] >= nnz[0]
        assert nnz[-1] > 0

    def test_original_scale_coefficients(self, rng):
        # predictions must be invariant to affine rescaling of the features
        X = rng.normal(size=(200, 5))
        y = (rng.uniform(size=200) < expit(X[:, 0])).astype(float)
        fit = fit_logistic_lasso(X, y, rng=np.random.default_rng(0))
        X2 = X * 10.0 + 3.0
        fit2 = fit_logistic_lasso(X2, y, rng=np.random.default_rng(0))
        p1 = expit(fit.coefficients[0] + X @ fit.coefficients[1:])
        p2 = expit(fit2.coefficients[0] + X2 @ fit2.coefficients[1:])
        assert np.allclose(p1, p2, atol=1e-8)

    def test_grid_must_decrease(self, rng):
        X = rng.normal(size=(50, 3))
        y = (rng.uniform(size=50) < 0.5).astype(float)
        with pytest.raises(ValueError):
            fit_logistic_lasso(X, y, lambda_grid=np.array([0.1, 0.2]))


class TestStratifiedFolds:
    def test_sizes_balanced(self, rng):
        y = rng.integers(0, 2, size=103).astype(float)
        f = stratified_folds(y, 5, rng)
        sizes = np.bincount(f)
        assert sizes.max() - sizes.min() <= 1

    def test_binary_strata_balanced(self, rng):
        y = np.array([0.0] * 60 + [1.0] * 40)
        f = stratified_folds(y, 5, rng)
        for k in range(5):
            ones = y[f == k].sum()
            assert 6 <= ones <= 10  # 8 +/- 2


class TestStacking:
    @staticmethod
    def _main_fit(X, y, r):
        spec = DesignSpec(interaction_order=1, include_intercept=True)
        return fit_logistic_irls(expand_design(X, spec), y, design=spec)

    @staticmethod
    def _const_fit(value):
        def fit(X, y, r):
            return FittedLearner(kind="known_constant", constant=value)

        return fit

    def test_simplex_invariants(self, rng):
        X = rng.normal(size=(300, 3))
        y = (rng.uniform(size=300) < expit(X[:, 0])).astype(float)
        ens = fit_stacking(
            [("main", self._main_fit), ("half", self._const_fit(0.5))], X, y,
            rng=np.random.default_rng(3),
        )
        assert np.all(ens.weights >= 0)
        assert ens.weights.sum() == pytest.approx(1.0, abs=1e-10)

    def test_oracle_member_dominates(self, rng):
        # one member is the truth, the other is useless noise
        X = rng.normal(size=(2000, 2))
        truth = expit(2.0 * X[:, 0])
        y = (rng.uniform(size=2000) < truth).astype(float)
        ens = fit_stacking(
            [("main", self._main_fit), ("const", self._const_fit(0.5))], X, y,
            rng=np.random.default_rng(3),
        )
        w = dict(zip(ens.member_names, ens.weights))
        assert w["main"] > 0.9

    def test_degenerate_constant_outcome_handled(self):
        X = np.random.default_rng(0).normal(size=(60, 2))
        y = np.zeros(60)
        ens = fit_stacking(
            [("c1", self._const_fit(0.2)), ("c2", self._const_fit(0.001))], X, y,
            rng=np.random.default_rng(0),
        )
        p = ens.predict(X)
        assert ((p >= 0.0005) & (p <= 0.9995)).all()

    def test_failed_member_dropped_with_warning(self, rng):
        def broken(X, y, r):
            raise RuntimeError("boom")

        X = rng.normal(size=(100, 2))
        y = (rng.uniform(size=100) < 0.5).astype(float)
        with pytest.warns(UserWarning, match="dropped"):
            ens = fit_stacking(
                [("bad", broken), ("half", self._const_fit(0.5))], X, y,
                rng=np.random.default_rng(0),
            )
        assert ens.member_names == ["half"]
        assert ens.weights.tolist() == [1.0]

    def test_simplex_solver_quadratic_oracle(self):
        # squared-error stacking of two constant predictors around y=0.3:
        # optimal simplex weight solves a one-dimensional quadratic exactly
        y = np.full(500, 0.3)
        Z = np.column_stack([np.full(500, 0.1), np.full(500, 0.9)])
        w = _simplex_weights(y, Z, "squared_error")
        assert w[0] == pytest.approx(0.75, abs=1e-4)
        assert w[1] == pytest.approx(0.25, abs=1e-4)
