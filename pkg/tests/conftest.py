"""Shared fixtures: a synthetic two-output ODE1 problem with a known truth.

The data are drawn from the exact (quadrature-grade) kernel, not from the
feature approximation, so fits against them exercise the approximation
honestly.  Generation and the S=100 fit are deterministic via fixed seeds.
"""

from time import perf_counter
from types import SimpleNamespace

import numpy as np
import pytest

from lfmrff.features import sample_frequencies
from lfmrff.kernels import cross_cov_grid, exact_cov_grid, feature_matrix
from lfmrff.likelihood import (
    OptimizerConfig,
    low_rank_log_marginal,
    noise_vector,
    optimize,
)
from lfmrff.model import Dataset, LfmSpec, Ode1Params

GEN_SEED = 2024
FIT_DRAW_SEED = 11
N_PER_OUTPUT = 100


@pytest.fixture(scope="session")
def synthetic_ode1():
    started = perf_counter()
    true = LfmSpec(
        (Ode1Params(1.0), Ode1Params(2.0)),
        1,
        [1.0],
        [[1.0], [1.0]],
        [0.01, 0.01],
    )
    rng = np.random.default_rng(GEN_SEED)

    t_train = np.tile(np.linspace(0.0, 3.0, N_PER_OUTPUT), 2)
    ids_train = np.repeat([1, 2], N_PER_OUTPUT)
    t_test = np.tile(np.linspace(0.05, 2.95, 40), 2)
    ids_test = np.repeat([1, 2], 40)
    t_latent = np.linspace(0.0, 3.0, 50)

    t_all = np.concatenate([t_train, t_test])
    ids_all = np.concatenate([ids_train, ids_test])
    k_ff = exact_cov_grid(t_all, ids_all, spec=true)
    k_fu = cross_cov_grid(t_all, ids_all, t_latent, 1, true)
    k_uu = np.exp(-np.subtract.outer(t_latent, t_latent) ** 2 / true.lengthscales[0] ** 2)
    k_joint = np.block([[k_ff, k_fu], [k_fu.T, k_uu]])
    k_joint[np.diag_indices_from(k_joint)] += 1e-10
    z = np.linalg.cholesky(k_joint) @ rng.standard_normal(k_joint.shape[0])

    n_train = t_train.size
    n_test = t_test.size
    f_train = z[:n_train]
    f_test = z[n_train : n_train + n_test]
    u_true = z[n_train + n_test :]
    y_train = f_train + rng.normal(scale=0.1, size=n_train)
    y_test = f_test + rng.normal(scale=0.1, size=n_test)

    data = Dataset(ids_train, t_train, y_train)
    init = LfmSpec(
        (Ode1Params(0.7), Ode1Params(0.7)), 1, [1.5], [[0.8], [0.8]], [0.1, 0.1]
    )
    draws = sample_frequencies(100, 1, seed=FIT_DRAW_SEED)
    fit = optimize(init, data, draws, OptimizerConfig())
    fm = feature_matrix(t_train, ids_train, fit.spec, draws)
    _, state = low_rank_log_marginal(fm, noise_vector(fit.spec, ids_train), y_train)

    return SimpleNamespace(
        true=true,
        data=data,
        t_test=t_test,
        ids_test=ids_test,
        y_test=y_test,
        t_latent=t_latent,
        u_true=u_true,
        init=init,
        draws=draws,
        fit=fit,
        state=state,
        elapsed=perf_counter() - started,
    )
