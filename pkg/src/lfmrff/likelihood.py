"""Log marginal likelihood, analytic gradients, and hyperparameter fitting.

The low-rank evaluation rewrites the usual GP objective through the matrix
inversion and determinant lemmas around A = I + Phi_c^T Sigma^-1 Phi_c,
so cost is linear in the number of observations at fixed feature count.
Gradients chain through the closed-form feature derivatives (first and
second order operators), through the frequency reparameterization
lam = sqrt(2) z / ell, and through per-output noise variances; general
operator coefficients fall back to finite differences on feature entries.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import backends
from .features import (
    FrequencyDraws,
    NumericsWarning,
    force_frequencies,
    ode2_roots,
    perturb_collisions,
    rfrf_general,
)
from .model import (
    Dataset,
    LfmSpec,
    MogpSpec,
    NumericalError,
    Ode1Params,
    Ode2Params,
    OdeOperator,
    HyperParamVector,
    NOISE_FLOOR,
    pack,
    unpack,
    validate_dataset,
)
from .mogp import SpectralDraws, mogp_frequencies

__all__ = [
    "LowRankState",
    "FitResult",
    "OptimizerConfig",
    "LmlObjective",
    "noise_vector",
    "full_log_marginal",
    "low_rank_log_marginal",
    "lml_gradient",
    "optimize",
]

LOG_2PI = math.log(2.0 * math.pi)


def noise_vector(spec, output_ids) -> np.ndarray:
    """Per-row noise variances sigma_d^2 picked by each row's output id."""
    return spec.noise_vars[np.asarray(output_ids, dtype=int) - 1]


# ---------------------------------------------------------------------------
# likelihood evaluations


@dataclass(frozen=True, eq=False)
class LowRankState:
    """Factorized quantities of one low-rank likelihood evaluation.

    a_mat is A = I + Phi_c^T Sigma^-1 Phi_c (symmetric positive definite),
    alpha = Phi_c^T Sigma^-1 y, chol_a its lower Cholesky factor.  beta is
    (K + Sigma)^-1 y computed without forming K, and u_mat = Sigma^-1 Phi_c;
    both are reused by gradients and posterior prediction.
    """

    a_mat: np.ndarray
    alpha: np.ndarray
    chol_a: np.ndarray
    data_fit: float
    log_det: float
    value: float
    beta: np.ndarray
    u_mat: np.ndarray
    noise_rows: np.ndarray

    def solve_a(self, b):
        return cho_solve((self.chol_a, True), b)


def _phi_c_of(phi):
    return phi.phi_c if hasattr(phi, "phi_c") else np.asarray(phi, dtype=float)


def low_rank_log_marginal(phi, noise, y):
    """Log marginal likelihood of y under N(0, Phi_c Phi_c^T + Sigma).

    Returns (value, LowRankState).  Cost is O(N R^2) for R = 2QS feature
    columns; no N x N matrix is formed.
    """
    phi_c = _phi_c_of(phi)
    y = np.asarray(y, dtype=float)
    noise = np.asarray(noise, dtype=float)
    n = y.size
    if phi_c.shape[0] != n or noise.shape != (n,):
        raise ValueError("phi, noise and y must agree on the number of rows")
    if np.any(noise <= 0):
        raise ValueError("noise variances must be positive")
    r = phi_c.shape[1]
    sinv = 1.0 / noise
    u = phi_c * sinv[:, None]
    a = phi_c.T @ u
    a[np.diag_indices(r)] += 1.0
    a = 0.5 * (a + a.T)
    try:
        chol, _ = cho_factor(a, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"A = I + Phi^T Sigma^-1 Phi not SPD: {exc}") from None
    alpha = u.T @ y
    ainv_alpha = cho_solve((chol, True), alpha)
    data_fit = float(y @ (sinv * y) - alpha @ ainv_alpha)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    value = -0.5 * (
        data_fit + log_det + float(np.sum(np.log(noise))) + n * LOG_2PI
    )
    beta = sinv * (y - phi_c @ ainv_alpha)
    state = LowRankState(
        a_mat=a,
        alpha=alpha,
        chol_a=np.tril(chol),
        data_fit=data_fit,
        log_det=log_det,
        value=value,
        beta=beta,
        u_mat=u,
        noise_rows=noise,
    )
    return value, state


def full_log_marginal(cov, noise, y):
    """Dense-matrix log marginal likelihood; the O(N^3) reference path."""
    y = np.asarray(y, dtype=float)
    noise = np.asarray(noise, dtype=float)
    m = np.asarray(cov, dtype=float) + np.diag(noise)
    try:
        chol, _ = cho_factor(m, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"K + Sigma not positive definite: {exc}") from None
    half_solve = cho_solve((chol, True), y)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (float(y @ half_solve) + log_det + y.size * LOG_2PI)


# ---------------------------------------------------------------------------
# packed-space objective with analytic gradient


def _fd_feature_blocks(t_d, op, lam, keys):
    """Central differences of the general-operator feature block."""
    out = {}
    for i, key in enumerate(keys):
        h = 1e-6 * (1.0 + abs(op.coeffs[i]))
        lo = list(op.coeffs)
        hi = list(op.coeffs)
        lo[i] -= h
        hi[i] += h
        v_hi = rfrf_general(t_d, OdeOperator(tuple(hi)), lam)
        v_lo = rfrf_general(t_d, OdeOperator(tuple(lo)), lam)
        out[key] = np.atleast_2d(v_hi - v_lo) / (2.0 * h)
    return out


class LmlObjective:
    """Deterministic packed-parameter objective over fixed frequency draws.

    Frequencies are held fixed across evaluations (common random numbers),
    so the objective is smooth in the lengthscales through the
    reparameterization of the draws rather than stochastic.
    """

    def __init__(self, data: Dataset, template, draws):
        validate_dataset(data, template)
        if isinstance(template, LfmSpec):
            if not isinstance(draws, FrequencyDraws):
                raise TypeError("LFM objective needs FrequencyDraws")
        else:
            if not isinstance(draws, SpectralDraws):
                raise TypeError("MOGP objective needs SpectralDraws")
            if draws.input_dim != template.input_dim:
                raise ValueError("draws/spec input_dim mismatch")
        if draws.num_forces != template.num_forces:
            raise ValueError("draws/spec num_forces mismatch")
        self.data = data
        self.template = template
        self.draws = draws
        self.labels = pack(template).labels
        self._rows = {
            int(d): np.flatnonzero(data.output_ids == d)
            for d in np.unique(data.output_ids)
        }

    # -- feature blocks -----------------------------------------------------

    def _op_keys(self, op):
        if isinstance(op, Ode1Params):
            return ("log_gamma",)
        if isinstance(op, Ode2Params):
            return ("log_mass", "log_damper", "log_spring")
        return tuple(f"coeff_a{i}" for i in range(len(op.coeffs)))

    def _lfm_blocks(self, spec, want_grads):
        blocks = {}
        for q in range(1, spec.num_forces + 1):
            lam_q = force_frequencies(self.draws, q, spec.lengthscales[q - 1])
            for d, rows in self._rows.items():
                op = spec.outputs[d - 1]
                t_d = self.data.inputs[rows]
                entry = {}
                if isinstance(op, Ode1Params):
                    lam = lam_q
                    if want_grads:
                        v, dg, dl = backends.ode1_grads(t_d, lam, op.gamma)
                        entry["log_gamma"] = op.gamma * dg
                        entry["dlogell"] = dl * (-lam)[None, :]
                    else:
                        v = backends.ode1_fill(t_d, lam, op.gamma)
                elif isinstance(op, Ode2Params):
                    s1, s2 = ode2_roots(op)
                    lam = perturb_collisions(lam_q, np.array([s1, s2]))
                    if want_grads:
                        v, dm, dc, db, dl = backends.ode2_grads(
                            t_d, lam, op.mass, op.damper, op.spring, s1, s2
                        )
                        entry["log_mass"] = op.mass * dm
                        entry["log_damper"] = op.damper * dc
                        entry["log_spring"] = op.spring * db
                        entry["dlogell"] = dl * (-lam)[None, :]
                    else:
                        v = backends.ode2_fill(t_d, lam, op.mass, s1, s2)
                else:
                    lam = lam_q
                    v = np.atleast_2d(rfrf_general(t_d, op, lam))
                    if want_grads:
                        entry.update(
                            _fd_feature_blocks(t_d, op, lam, self._op_keys(op))
                        )
                        h = 1e-6 * (1.0 + np.abs(lam))
                        v_hi = np.atleast_2d(rfrf_general(t_d, op, lam + h))
                        v_lo = np.atleast_2d(rfrf_general(t_d, op, lam - h))
                        dl = (v_hi - v_lo) / (2.0 * h)[None, :]
                        entry["dlogell"] = dl * (-lam)[None, :]
                entry["v"] = v
                blocks[(d, q)] = entry
        return blocks

    def _mogp_blocks(self, spec, want_grads):
        blocks = {}
        p = spec.input_dim
        x = self.data.inputs
        if x.ndim == 1:
            x = x[:, None]
        for q in range(1, spec.num_forces + 1):
            lam = mogp_frequencies(self.draws, q, spec.lengthscales[q - 1])
            b = np.sum(lam * lam, axis=1)
            for d, rows in self._rows.items():
                prec = spec.inv_widths[d - 1]
                proj = x[rows] @ lam.T
                phase = np.exp(1j * proj)
                amp = (2.0 * math.pi / prec) ** (p / 2.0) * np.exp(-b / (2.0 * prec))
                v = amp[None, :] * phase
                entry = {"v": v}
                if want_grads:
                    entry["log_inv_width"] = v * (-0.5 * p + b / (2.0 * prec))[None, :]
                    entry["dlogell"] = v * ((b / prec)[None, :] - 1j * proj)
                blocks[(d, q)] = entry
        return blocks

    def _assemble(self, spec, want_grads):
        if isinstance(spec, LfmSpec):
            blocks = self._lfm_blocks(spec, want_grads)
        else:
            blocks = self._mogp_blocks(spec, want_grads)
        n = len(self.data)
        s_count = self.draws.num_samples
        root_s = 1.0 / math.sqrt(s_count)
        phi = np.zeros((n, spec.num_forces * s_count), dtype=complex)
        for (d, q), entry in blocks.items():
            rows = self._rows[d]
            scale = spec.sensitivities[d - 1, q - 1] * root_s
            cols = slice((q - 1) * s_count, q * s_count)
            phi[rows, cols.start : cols.stop] = scale * entry["v"]
        return phi, blocks

    # -- evaluations ----------------------------------------------------------

    def _spec_of(self, theta):
        return unpack(theta, self.template)

    def value(self, theta) -> float:
        spec = self._spec_of(theta)
        phi, _ = self._assemble(spec, want_grads=False)
        phi_c = np.concatenate([phi.real, phi.imag], axis=1)
        noise = noise_vector(spec, self.data.output_ids)
        val, _ = low_rank_log_marginal(phi_c, noise, self.data.y)
        return val

    def value_and_gradient(self, theta):
        spec = self._spec_of(theta)
        phi, blocks = self._assemble(spec, want_grads=True)
        phi_c = np.concatenate([phi.real, phi.imag], axis=1)
        noise = noise_vector(spec, self.data.output_ids)
        y = self.data.y
        value, state = low_rank_log_marginal(phi_c, noise, y)

        # dL/dPhi_c = beta beta^T Phi_c - Sigma^-1 Phi_c A^-1; fold the real
        # widening back into one complex matrix for the block contractions.
        t_mat = state.solve_a(state.u_mat.T).T
        g_real = np.outer(state.beta, state.beta @ phi_c) - t_mat
        r = phi.shape[1]
        g_cplx = g_real[:, :r] + 1j * g_real[:, r:]

        s_count = self.draws.num_samples
        root_s = 1.0 / math.sqrt(s_count)
        grad = np.zeros(len(self.labels))

        def contract(d, q, dblock, scale):
            rows = self._rows.get(d)
            if rows is None or rows.size == 0:
                return 0.0
            g_blk = g_cplx[rows, (q - 1) * s_count : q * s_count]
            return scale * float(
                np.sum(g_blk.real * dblock.real) + np.sum(g_blk.imag * dblock.imag)
            )

        pos = 0
        op_key_lists = (
            [self._op_keys(op) for op in spec.outputs]
            if isinstance(spec, LfmSpec)
            else [("log_inv_width",)] * spec.num_outputs
        )
        for d, keys in enumerate(op_key_lists, start=1):
            for key in keys:
                total = 0.0
                if d in self._rows:
                    for q in range(1, spec.num_forces + 1):
                        total += contract(
                            d,
                            q,
                            blocks[(d, q)][key],
                            spec.sensitivities[d - 1, q - 1] * root_s,
                        )
                grad[pos] = total
                pos += 1
        for q in range(1, spec.num_forces + 1):
            total = 0.0
            for d in self._rows:
                total += contract(
                    d,
                    q,
                    blocks[(d, q)]["dlogell"],
                    spec.sensitivities[d - 1, q - 1] * root_s,
                )
            grad[pos] = total
            pos += 1

        # noise: dL/dSigma_ii = (beta_i^2 - (K+Sigma)^-1_ii) / 2, then the
        # log chain; floored variances have zero derivative through max().
        minv_diag = 1.0 / noise - np.sum(state.u_mat * t_mat, axis=1)
        row_grad = 0.5 * (state.beta**2 - minv_diag)
        for d in range(1, spec.num_outputs + 1):
            rows = self._rows.get(d)
            sig2 = spec.noise_vars[d - 1]
            chain = sig2 if sig2 > NOISE_FLOOR else 0.0
            grad[pos] = chain * float(np.sum(row_grad[rows])) if rows is not None else 0.0
            pos += 1

        for d in range(1, spec.num_outputs + 1):
            for q in range(1, spec.num_forces + 1):
                if (d, q) in blocks:
                    grad[pos] = contract(d, q, blocks[(d, q)]["v"], root_s)
                pos += 1

        if not np.all(np.isfinite(grad)):
            i = int(np.argmax(~np.isfinite(grad)))
            raise NumericalError(
                f"non-finite gradient at packed slot {i} ({self.labels[i]})"
            )
        return value, grad

    def gradient(self, theta):
        return self.value_and_gradient(theta)[1]


def lml_gradient(theta, data: Dataset, draws, template):
    """Gradient of the log marginal likelihood at a packed point.

    ``template`` fixes the spec structure the packed vector refers to.
    """
    vals = theta.values if isinstance(theta, HyperParamVector) else theta
    return LmlObjective(data, template, draws).gradient(vals)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    grad_tol: float = 1e-5
    initial_step: float = 1.0
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of a hyperparameter fit.

    ``trace`` rows are (iteration, lml, grad_norm, elapsed_s); the lml
    column is non-decreasing because every accepted step passes an Armijo
    test.  ``status`` is one of converged, max_iters, line_search_failed;
    the returned spec is always the best point seen, never worse than init.
    """

    spec: object
    packed: HyperParamVector
    final_lml: float
    trace: tuple
    seed: int
    num_samples: int
    iterations: int
    status: str


def optimize(init, data: Dataset, draws, config: OptimizerConfig | None = None, callback=None) -> FitResult:
    """Maximize the log marginal likelihood by BFGS ascent in packed space.

    Quasi-Newton direction on the negated objective with backtracking
    Armijo line search; inverse-Hessian updates are skipped when curvature
    is not positive.  Steps that raise numerical errors or produce
    non-finite values are treated as failed trials and backtracked.
    """
    cfg = config or OptimizerConfig()
    obj = LmlObjective(data, init, draws)
    theta = pack(init).values.copy()
    n_par = theta.size
    started = perf_counter()

    f, g = obj.value_and_gradient(theta)
    trace = [(0, f, float(np.linalg.norm(g)), perf_counter() - started)]
    best_f, best_theta = f, theta.copy()
    h_inv = np.eye(n_par)
    gmin = -g
    status = "max_iters"
    iterations = 0

    for it in range(1, cfg.max_iters + 1):
        if np.linalg.norm(g) <= cfg.grad_tol:
            status = "converged"
            break
        direction = -(h_inv @ gmin)
        slope = float(direction @ gmin)
        if slope >= 0.0:
            h_inv = np.eye(n_par)
            direction = -gmin
            slope = -float(gmin @ gmin)
        step = cfg.initial_step
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = theta + step * direction
            try:
                # Overflow in a rejected trial point is routine; the
                # non-finite checks below turn it into a shorter step.
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    f_new, g_new = obj.value_and_gradient(trial)
            except NumericalError:
                f_new = -np.inf
            if np.isfinite(f_new) and -f_new <= -f + cfg.armijo_c * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            status = "line_search_failed"
            warnings.warn(
                f"line search failed at iteration {it}; returning best point seen",
                NumericsWarning,
                stacklevel=2,
            )
            break
        s_vec = step * direction
        y_vec = -g_new - gmin
        sy = float(y_vec @ s_vec)
        if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            rho = 1.0 / sy
            outer = np.outer(s_vec, y_vec)
            h_inv = (
                h_inv
                - rho * (outer @ h_inv + h_inv @ outer.T)
                + rho * rho * (y_vec @ (h_inv @ y_vec)) * np.outer(s_vec, s_vec)
                + rho * np.outer(s_vec, s_vec)
            )
        theta = theta + s_vec
        f, g = f_new, g_new
        gmin = -g
        iterations = it
        if f > best_f:
            best_f, best_theta = f, theta.copy()
        trace.append((it, f, float(np.linalg.norm(g)), perf_counter() - started))
        if callback is not None:
            callback(it, f, float(np.linalg.norm(g)))
    else:
        if np.linalg.norm(g) <= cfg.grad_tol:
            status = "converged"

    spec = unpack(best_theta, init)
    return FitResult(
        spec=spec,
        packed=HyperParamVector(best_theta, obj.labels),
        final_lml=best_f,
        trace=tuple(trace),
        seed=draws.seed,
        num_samples=draws.num_samples,
        iterations=iterations,
        status=status,
    )
