"""Low-rank marginal likelihood, its analytic gradient, and the optimizer."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lfmrff.features import sample_frequencies
from lfmrff.kernels import feature_matrix
from lfmrff.likelihood import (
    LmlObjective,
    OptimizerConfig,
    full_log_marginal,
    lml_gradient,
    low_rank_log_marginal,
    noise_vector,
    optimize,
)
from lfmrff.model import (
    Dataset,
    LfmSpec,
    MogpSpec,
    NumericalError,
    Ode1Params,
    Ode2Params,
    OdeOperator,
    pack,
)
from lfmrff.mogp import sample_spectral

LOG_2PI = math.log(2.0 * math.pi)


class TestLowRank:
    def test_hand_example(self):
        # One observation, one complex feature with value 1: Phi_c = [1, 0],
        # K + Sigma = 2, so L = -log(2 pi)/2 - log(2)/2 - 2^2/(2*2).
        value, state = low_rank_log_marginal(
            np.array([[1.0, 0.0]]), np.array([1.0]), np.array([2.0])
        )
        assert_allclose(value, -0.5 * LOG_2PI - 0.5 * math.log(2.0) - 1.0, rtol=1e-14)
        assert_allclose(state.a_mat, np.diag([2.0, 1.0]), rtol=1e-15)
        assert_allclose(state.alpha, [2.0, 0.0], rtol=1e-15)
        assert_allclose(state.data_fit, 2.0, rtol=1e-14)
        assert_allclose(state.log_det, math.log(2.0), rtol=1e-14)

    def test_zero_features_reduce_to_diagonal_gaussian(self):
        noise = np.array([0.5, 2.0, 1.0])
        y = np.array([0.3, -1.0, 0.7])
        value, _ = low_rank_log_marginal(np.zeros((3, 4)), noise, y)
        direct = -0.5 * np.sum(y**2 / noise + np.log(noise) + LOG_2PI)
        assert_allclose(value, direct, rtol=1e-14)

    def test_matches_dense_on_random_instances(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            n, r = rng.integers(3, 15), rng.integers(1, 8)
            phi_c = rng.normal(size=(n, r))
            noise = rng.uniform(0.1, 2.0, size=n)
            y = rng.normal(size=n)
            lr, _ = low_rank_log_marginal(phi_c, noise, y)
            dense = full_log_marginal(phi_c @ phi_c.T, noise, y)
            assert_allclose(lr, dense, rtol=1e-12)

    def test_accepts_feature_matrix_object(self):
        spec = LfmSpec((Ode1Params(1.0),), 1, [1.0], [[1.0]], [0.1])
        t = np.linspace(0.1, 2.0, 6)
        fm = feature_matrix(t, np.ones(6, int), spec, sample_frequencies(5, 1, 0))
        y = np.sin(t)
        via_fm, _ = low_rank_log_marginal(fm, np.full(6, 0.1), y)
        via_mat, _ = low_rank_log_marginal(fm.phi_c, np.full(6, 0.1), y)
        assert_allclose(via_fm, via_mat, rtol=0)

    def test_cholesky_factor_reproduces_a(self):
        rng = np.random.default_rng(1)
        phi_c = rng.normal(size=(10, 4))
        _, state = low_rank_log_marginal(
            phi_c, np.full(10, 0.3), rng.normal(size=10)
        )
        assert_allclose(state.chol_a @ state.chol_a.T, state.a_mat, atol=1e-10)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="rows"):
            low_rank_log_marginal(np.zeros((3, 2)), np.ones(2), np.zeros(3))
        with pytest.raises(ValueError, match="positive"):
            low_rank_log_marginal(np.zeros((2, 2)), np.array([1.0, 0.0]), np.zeros(2))


class TestDense:
    def test_standard_normal_point(self):
        assert_allclose(
            full_log_marginal(np.zeros((1, 1)), np.ones(1), np.zeros(1)),
            -0.5 * LOG_2PI,
            rtol=1e-15,
        )

    def test_standard_normal_at_two(self):
        assert_allclose(
            full_log_marginal(np.zeros((1, 1)), np.ones(1), np.array([2.0])),
            -0.5 * LOG_2PI - 2.0,
            rtol=1e-15,
        )

    def test_indefinite_matrix_raises(self):
        with pytest.raises(NumericalError, match="positive definite"):
            full_log_marginal(np.array([[-5.0]]), np.ones(1), np.ones(1))


def test_noise_vector_maps_outputs():
    spec = LfmSpec((Ode1Params(1.0), Ode1Params(2.0)), 1, [1.0],
                   [[1.0], [1.0]], [0.1, 0.4])
    got = noise_vector(spec, np.array([1, 2, 2, 1]))
    assert_allclose(got, [0.1, 0.4, 0.4, 0.1], rtol=0)


# ---------------------------------------------------------------------------
# analytic gradient vs central differences


def fd_gradient(obj, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        hi = h * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += hi
        tm[i] -= hi
        g[i] = (obj.value(tp) - obj.value(tm)) / (2.0 * hi)
    return g


def check_gradient(spec, data, draws):
    obj = LmlObjective(data, spec, draws)
    theta = pack(spec).values
    _, analytic = obj.value_and_gradient(theta)
    numeric = fd_gradient(obj, theta)
    assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7)


def lfm_data(seed=0, n=10):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0.05, 3.0, n))
    ids = rng.integers(1, 3, size=n)
    y = rng.normal(size=n)
    return Dataset(ids, t, y)


class TestGradient:
    def test_ode1_pair(self):
        spec = LfmSpec((Ode1Params(0.8), Ode1Params(1.6)), 2, [1.0, 0.6],
                       [[1.0, 0.4], [0.3, 1.2]], [0.2, 0.15])
        check_gradient(spec, lfm_data(0), sample_frequencies(6, 2, seed=3))

    def test_ode2_mixed(self):
        spec = LfmSpec((Ode1Params(1.1), Ode2Params(1.0, 3.0, 2.0)), 1, [0.9],
                       [[0.7], [-0.5]], [0.3, 0.1])
        check_gradient(spec, lfm_data(1), sample_frequencies(6, 1, seed=4))

    def test_underdamped_ode2(self):
        spec = LfmSpec((Ode2Params(1.0, 2.0, 5.0),), 1, [1.3], [[0.9]], [0.25])
        data = lfm_data(2)
        data = Dataset(np.ones_like(data.output_ids), data.inputs, data.y)
        check_gradient(spec, data, sample_frequencies(5, 1, seed=5))

    def test_general_operator_third_order(self):
        # Coefficient derivatives for the generic operator come from central
        # differences internally; the packed gradient must still line up.
        spec = LfmSpec((OdeOperator((1.0, 6.0, 11.0, 6.0)),), 1, [1.0],
                       [[1.0]], [0.2])
        data = lfm_data(3)
        data = Dataset(np.ones_like(data.output_ids), data.inputs, data.y)
        check_gradient(spec, data, sample_frequencies(4, 1, seed=6))

    def test_mogp_two_dim(self):
        spec = MogpSpec(2, [1.4, 0.8], 2, [1.0, 0.7],
                        [[1.0, 0.2], [0.4, 0.9]], [0.15, 0.3])
        rng = np.random.default_rng(7)
        x = rng.uniform(-1.0, 1.0, size=(9, 2))
        ids = rng.integers(1, 3, size=9)
        data = Dataset(ids, x, rng.normal(size=9))
        check_gradient(spec, data, sample_spectral(5, 2, 2, seed=8))

    def test_floored_noise_has_zero_slope(self):
        spec = LfmSpec((Ode1Params(1.0),), 1, [1.0], [[1.0]], [1e-8])
        data = lfm_data(4)
        data = Dataset(np.ones_like(data.output_ids), data.inputs, data.y)
        obj = LmlObjective(data, spec, sample_frequencies(4, 1, seed=0))
        packed = pack(spec)
        noise_slot = [i for i, lab in enumerate(packed.labels)
                      if "noise" in str(lab)]
        assert len(noise_slot) == 1
        _, g = obj.value_and_gradient(packed.values)
        assert g[noise_slot[0]] == 0.0

    def test_duplicated_rows_add_noise_gradient(self):
        # Stacking the same observation twice doubles that output's noise
        # slot only through the sum over rows; verify against differences.
        spec = LfmSpec((Ode1Params(1.0),), 1, [1.0], [[1.0]], [0.3])
        base = Dataset(np.array([1, 1]), np.array([0.7, 0.7]), np.array([0.4, 0.4]))
        check_gradient(spec, base, sample_frequencies(4, 1, seed=9))

    def test_wrapper_matches_objective(self):
        spec = LfmSpec((Ode1Params(0.9),), 1, [1.0], [[1.0]], [0.2])
        data = lfm_data(5)
        data = Dataset(np.ones_like(data.output_ids), data.inputs, data.y)
        draws = sample_frequencies(4, 1, seed=2)
        theta = pack(spec).values
        obj = LmlObjective(data, spec, draws)
        assert_allclose(
            lml_gradient(theta, data, draws, spec), obj.gradient(theta), rtol=0
        )

    def test_non_finite_slot_is_named(self):
        spec = LfmSpec((Ode1Params(1.0),), 1, [1.0], [[1.0]], [0.1])
        t = np.linspace(0.1, 2.0, 5)
        data = Dataset(np.ones(5, int), t, np.full(5, 1e200))
        obj = LmlObjective(data, spec, sample_frequencies(4, 1, 0))
        with np.errstate(all="ignore"):
            with pytest.raises(NumericalError, match="log_gamma"):
                obj.value_and_gradient(pack(spec).values)

    def test_objective_validates_draws(self):
        spec = LfmSpec((Ode1Params(1.0),), 2, [1.0, 1.0], [[1.0, 1.0]], [0.1])
        data = Dataset(np.array([1]), np.array([0.5]), np.array([0.0]))
        with pytest.raises(ValueError):
            LmlObjective(data, spec, sample_frequencies(4, 1, seed=0))
        mogp = MogpSpec(1, [1.0], 1, [1.0], [[1.0]], [0.1])
        with pytest.raises((TypeError, ValueError)):
            LmlObjective(data, mogp, sample_frequencies(4, 1, seed=0))


# ---------------------------------------------------------------------------
# optimizer behaviour


def fit_problem():
    rng = np.random.default_rng(12)
    t = np.sort(rng.uniform(0.0, 3.0, 30))
    y = np.sin(1.5 * t) * np.exp(-0.2 * t) + rng.normal(scale=0.05, size=30)
    data = Dataset(np.ones(30, int), t, y)
    init = LfmSpec((Ode1Params(0.5),), 1, [2.0], [[0.5]], [0.2])
    return init, data, sample_frequencies(20, 1, seed=1)


class TestOptimize:
    def test_trace_is_monotone_and_improves(self):
        init, data, draws = fit_problem()
        fit = optimize(init, data, draws, OptimizerConfig(max_iters=40))
        lmls = [row[1] for row in fit.trace]
        assert all(b >= a - 1e-12 for a, b in zip(lmls, lmls[1:]))
        assert fit.final_lml >= lmls[0]
        assert fit.status in ("converged", "max_iters", "line_search_failed")
        assert fit.seed == draws.seed and fit.num_samples == draws.num_samples

    def test_trace_schema(self):
        init, data, draws = fit_problem()
        fit = optimize(init, data, draws, OptimizerConfig(max_iters=3))
        for i, row in enumerate(fit.trace):
            assert row[0] == i
            assert len(row) == 4
        elapsed = [row[3] for row in fit.trace]
        assert all(b >= a for a, b in zip(elapsed, elapsed[1:]))

    def test_zero_iterations_when_already_converged(self):
        init, data, draws = fit_problem()
        fit = optimize(init, data, draws, OptimizerConfig(grad_tol=1e12))
        assert fit.iterations == 0
        assert fit.status == "converged"
        assert len(fit.trace) == 1
        assert_allclose(fit.packed.values, pack(init).values, rtol=0)

    def test_never_returns_worse_than_init(self):
        init, data, draws = fit_problem()
        obj = LmlObjective(data, init, draws)
        start = obj.value(pack(init).values)
        fit = optimize(init, data, draws, OptimizerConfig(max_iters=2))
        assert fit.final_lml >= start - 1e-12

    def test_refit_from_result_matches_final(self):
        init, data, draws = fit_problem()
        fit = optimize(init, data, draws, OptimizerConfig(max_iters=25))
        obj = LmlObjective(data, init, draws)
        assert_allclose(obj.value(fit.packed.values), fit.final_lml, rtol=1e-12)
