"""Hot inner loops for feature assembly: numba-jitted with a numpy fallback.

Every fill exists twice, a ``@njit`` version and a pure-numpy broadcasting
version computing identical formulas.  Selection is process-wide via the
``LFMRFF_BACKEND`` environment variable (``numba`` or ``numpy``); the default
is numba when importable.  ``benchmarks/backend_bench.py`` times the two
implementations against each other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _select_backend():
    env = os.environ.get("LFMRFF_BACKEND", "").strip().lower()
    if env in ("numpy", "python"):
        return "numpy"
    if env == "numba":
        if not HAVE_NUMBA:
            raise ImportError("LFMRFF_BACKEND=numba but numba is not importable")
        return "numba"
    if env:
        raise ValueError(f"unknown LFMRFF_BACKEND value: {env!r}")
    return "numba" if HAVE_NUMBA else "numpy"


_BACKEND = _select_backend()


def backend_name() -> str:
    """Active backend, ``numba`` or ``numpy``."""
    return _BACKEND


# ---------------------------------------------------------------------------
# ODE1: v = (exp(j*lam*t) - exp(-gamma*t)) / (gamma + j*lam)


def _ode1_fill_np(t, lam, gamma):
    den = gamma + 1j * lam[None, :]
    return (np.exp(1j * np.outer(t, lam)) - np.exp(-gamma * t)[:, None]) / den


def _ode1_grads_np(t, lam, gamma):
    den = gamma + 1j * lam[None, :]
    e_lam = np.exp(1j * np.outer(t, lam))
    e_gam = np.exp(-gamma * t)[:, None]
    v = (e_lam - e_gam) / den
    dv_dgamma = (t[:, None] * e_gam - v) / den
    dv_dlam = 1j * (t[:, None] * e_lam - v) / den
    return v, dv_dgamma, dv_dlam


@njit(cache=True)
def _ode1_fill_nb(t, lam, gamma):  # pragma: no cover - exercised via dispatch
    out = np.empty((t.size, lam.size), dtype=np.complex128)
    for i in range(t.size):
        e_gam = np.exp(-gamma * t[i])
        for k in range(lam.size):
            den = gamma + 1j * lam[k]
            out[i, k] = (np.exp(1j * lam[k] * t[i]) - e_gam) / den
    return out


@njit(cache=True)
def _ode1_grads_nb(t, lam, gamma):  # pragma: no cover
    n, m = t.size, lam.size
    v = np.empty((n, m), dtype=np.complex128)
    dg = np.empty((n, m), dtype=np.complex128)
    dl = np.empty((n, m), dtype=np.complex128)
    for i in range(n):
        ti = t[i]
        e_gam = np.exp(-gamma * ti)
        for k in range(m):
            den = gamma + 1j * lam[k]
            e_lam = np.exp(1j * lam[k] * ti)
            vv = (e_lam - e_gam) / den
            v[i, k] = vv
            dg[i, k] = (ti * e_gam - vv) / den
            dl[i, k] = 1j * (ti * e_lam - vv) / den
    return v, dg, dl


# ---------------------------------------------------------------------------
# ODE2: v = (A1 e^{s1 t} + A2 e^{s2 t} + A3 e^{s3 t}) / m,  s3 = j*lam.
# Partial-fraction coefficients over the three pairwise-distinct roots; the
# gradient path differentiates through the roots (implicit function theorem
# on m s^2 + c s + b = 0, so ds/dm = -s^2/(m(s1-s2)) etc. for root s1).


def _ode2_fill_np(t, lam, mass, s1, s2):
    s3 = 1j * lam[None, :]
    d12 = s1 - s2
    d13 = s1 - s3
    d23 = s2 - s3
    a1 = 1.0 / (d12 * d13)
    a2 = -1.0 / (d12 * d23)
    a3 = 1.0 / (d13 * d23)
    tc = t[:, None]
    return (a1 * np.exp(s1 * tc) + a2 * np.exp(s2 * tc) + a3 * np.exp(s3 * tc)) / mass


def _ode2_grads_np(t, lam, mass, damper, spring, s1, s2):
    s3 = 1j * lam[None, :]
    d12 = s1 - s2
    d13 = s1 - s3
    d23 = s2 - s3
    a1 = 1.0 / (d12 * d13)
    a2 = -1.0 / (d12 * d23)
    a3 = 1.0 / (d13 * d23)
    tc = t[:, None]
    e1 = np.exp(s1 * tc)
    e2 = np.exp(s2 * tc)
    e3 = np.exp(s3 * tc)
    f = a1 * e1 + a2 * e2 + a3 * e3
    df_ds1 = (-a1 * (1.0 / d12 + 1.0 / d13) + a1 * tc) * e1 - (a2 / d12) * e2 - (a3 / d13) * e3
    df_ds2 = (a1 / d12) * e1 + (a2 * (1.0 / d12 - 1.0 / d23) + a2 * tc) * e2 - (a3 / d23) * e3
    df_ds3 = (a1 / d13) * e1 + (a2 / d23) * e2 + (a3 * (1.0 / d13 + 1.0 / d23) + a3 * tc) * e3
    md12 = mass * d12
    ds1_dm = -s1 * s1 / md12
    ds2_dm = s2 * s2 / md12
    ds1_dc = -s1 / md12
    ds2_dc = s2 / md12
    ds1_db = -1.0 / md12
    ds2_db = 1.0 / md12
    v = f / mass
    dv_dm = (df_ds1 * ds1_dm + df_ds2 * ds2_dm - v) / mass
    dv_dc = (df_ds1 * ds1_dc + df_ds2 * ds2_dc) / mass
    dv_db = (df_ds1 * ds1_db + df_ds2 * ds2_db) / mass
    dv_dlam = 1j * df_ds3 / mass
    return v, dv_dm, dv_dc, dv_db, dv_dlam


@njit(cache=True)
def _ode2_fill_nb(t, lam, mass, s1, s2):  # pragma: no cover
    n, m = t.size, lam.size
    out = np.empty((n, m), dtype=np.complex128)
    d12 = s1 - s2
    for i in range(n):
        ti = t[i]
        e1 = np.exp(s1 * ti)
        e2 = np.exp(s2 * ti)
        for k in range(m):
            s3 = 1j * lam[k]
            d13 = s1 - s3
            d23 = s2 - s3
            a1 = 1.0 / (d12 * d13)
            a2 = -1.0 / (d12 * d23)
            a3 = 1.0 / (d13 * d23)
            out[i, k] = (a1 * e1 + a2 * e2 + a3 * np.exp(s3 * ti)) / mass
    return out


@njit(cache=True)
def _ode2_grads_nb(t, lam, mass, damper, spring, s1, s2):  # pragma: no cover
    n, m = t.size, lam.size
    v = np.empty((n, m), dtype=np.complex128)
    dm = np.empty((n, m), dtype=np.complex128)
    dc = np.empty((n, m), dtype=np.complex128)
    db = np.empty((n, m), dtype=np.complex128)
    dl = np.empty((n, m), dtype=np.complex128)
    d12 = s1 - s2
    md12 = mass * d12
    ds1_dm = -s1 * s1 / md12
    ds2_dm = s2 * s2 / md12
    ds1_dc = -s1 / md12
    ds2_dc = s2 / md12
    ds1_db = -1.0 / md12
    ds2_db = 1.0 / md12
    for i in range(n):
        ti = t[i]
        e1 = np.exp(s1 * ti)
        e2 = np.exp(s2 * ti)
        for k in range(m):
            s3 = 1j * lam[k]
            d13 = s1 - s3
            d23 = s2 - s3
            a1 = 1.0 / (d12 * d13)
            a2 = -1.0 / (d12 * d23)
            a3 = 1.0 / (d13 * d23)
            e3 = np.exp(s3 * ti)
            f = a1 * e1 + a2 * e2 + a3 * e3
            df1 = (-a1 * (1.0 / d12 + 1.0 / d13) + a1 * ti) * e1 - (a2 / d12) * e2 - (a3 / d13) * e3
            df2 = (a1 / d12) * e1 + (a2 * (1.0 / d12 - 1.0 / d23) + a2 * ti) * e2 - (a3 / d23) * e3
            df3 = (a1 / d13) * e1 + (a2 / d23) * e2 + (a3 * (1.0 / d13 + 1.0 / d23) + a3 * ti) * e3
            vv = f / mass
            v[i, k] = vv
            dm[i, k] = (df1 * ds1_dm + df2 * ds2_dm - vv) / mass
            dc[i, k] = (df1 * ds1_dc + df2 * ds2_dc) / mass
            db[i, k] = (df1 * ds1_db + df2 * ds2_db) / mass
            dl[i, k] = 1j * df3 / mass
    return v, dm, dc, db, dl


# ---------------------------------------------------------------------------
# dispatch


def ode1_fill(t, lam, gamma):
    """Feature values for a first-order operator, shape (len(t), len(lam))."""
    t = np.ascontiguousarray(t, dtype=float)
    lam = np.ascontiguousarray(lam, dtype=float)
    if _BACKEND == "numba":
        return _ode1_fill_nb(t, lam, float(gamma))
    return _ode1_fill_np(t, lam, float(gamma))


def ode1_grads(t, lam, gamma):
    """(v, dv/dgamma, dv/dlam) for a first-order operator."""
    t = np.ascontiguousarray(t, dtype=float)
    lam = np.ascontiguousarray(lam, dtype=float)
    if _BACKEND == "numba":
        return _ode1_grads_nb(t, lam, float(gamma))
    return _ode1_grads_np(t, lam, float(gamma))


def ode2_fill(t, lam, mass, s1, s2):
    """Feature values for a second-order operator with roots s1, s2."""
    t = np.ascontiguousarray(t, dtype=float)
    lam = np.ascontiguousarray(lam, dtype=float)
    if _BACKEND == "numba":
        return _ode2_fill_nb(t, lam, float(mass), complex(s1), complex(s2))
    return _ode2_fill_np(t, lam, float(mass), complex(s1), complex(s2))


def ode2_grads(t, lam, mass, damper, spring, s1, s2):
    """(v, dv/dm, dv/dc, dv/db, dv/dlam) for a second-order operator."""
    t = np.ascontiguousarray(t, dtype=float)
    lam = np.ascontiguousarray(lam, dtype=float)
    if _BACKEND == "numba":
        return _ode2_grads_nb(
            t, lam, float(mass), float(damper), float(spring), complex(s1), complex(s2)
        )
    return _ode2_grads_np(
        t, lam, float(mass), float(damper), float(spring), complex(s1), complex(s2)
    )
