"""Domain types for latent force and convolved multi-output GP models.

Model structure (outputs, latent forces, sensitivities, noise), observed
datasets, and the flat hyperparameter vector used by the optimizer all live
here.  Every type is immutable after construction and safe to share across
threads.

Output and force identifiers are 1-based everywhere, matching the on-disk
CSV convention (``output_id,t,y``).  Internal array indices are 0-based.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "DataError",
    "NumericalError",
    "OdeOperator",
    "Ode1Params",
    "Ode2Params",
    "LfmSpec",
    "MogpSpec",
    "Dataset",
    "HyperParamVector",
    "pack",
    "unpack",
    "validate_dataset",
    "read_dataset_csv",
    "write_dataset_csv",
    "NOISE_FLOOR",
]

# Smallest noise variance the optimizer may reach; keeps Sigma invertible.
NOISE_FLOOR = 1e-8


class DataError(ValueError):
    """User-supplied data is invalid (bad CSV, out-of-range ids, shapes)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (roots, factorization, quadrature)."""


# ---------------------------------------------------------------------------
# operator descriptions


@dataclass(frozen=True)
class OdeOperator:
    """Linear ODE operator a_0 d^P/dt^P + a_1 d^{P-1}/dt^{P-1} + ... + a_P.

    ``coeffs`` is the tuple (a_0, ..., a_P); the operator order is
    ``len(coeffs) - 1``.  The leading coefficient must be nonzero.
    """

    coeffs: tuple

    def __post_init__(self):
        coeffs = tuple(float(a) for a in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        if len(coeffs) < 2:
            raise DataError("operator needs order >= 1 (at least two coefficients)")
        if coeffs[0] == 0.0:
            raise DataError("leading coefficient a_0 must be nonzero")
        if not all(math.isfinite(a) for a in coeffs):
            raise DataError("operator coefficients must be finite")

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1


@dataclass(frozen=True)
class Ode1Params:
    """First-order system df/dt + gamma * f = u, with decay rate gamma > 0."""

    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", float(self.gamma))
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise DataError(f"gamma must be positive and finite, got {self.gamma}")


@dataclass(frozen=True)
class Ode2Params:
    """Mass-damper-spring system m f'' + c f' + b f = u.

    Requires m > 0 and b > 0; the damper c may be zero (undamped).  A zero
    damper cannot be packed for optimization (log transform), but kernel
    evaluation works.
    """

    mass: float
    damper: float
    spring: float

    def __post_init__(self):
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "damper", float(self.damper))
        object.__setattr__(self, "spring", float(self.spring))
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise DataError(f"mass must be positive, got {self.mass}")
        if not (self.spring > 0 and math.isfinite(self.spring)):
            raise DataError(f"spring must be positive, got {self.spring}")
        if not (self.damper >= 0 and math.isfinite(self.damper)):
            raise DataError(f"damper must be nonnegative, got {self.damper}")


OutputParams = Union[Ode1Params, Ode2Params, OdeOperator]


def _as_readonly(a, dtype=float, ndim=1):
    out = np.array(a, dtype=dtype)
    if out.ndim != ndim:
        raise DataError(f"expected {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# model specifications


@dataclass(frozen=True, eq=False)
class LfmSpec:
    """Latent force model: D outputs driven through ODE operators by Q forces.

    Fields
    ------
    outputs       : tuple of D operator parameter sets (Ode1Params,
                    Ode2Params or OdeOperator)
    num_forces    : Q
    lengthscales  : (Q,) positive, one per latent force
    sensitivities : (D, Q) real coupling matrix
    noise_vars    : (D,) positive observation noise variances
    """

    outputs: tuple
    num_forces: int
    lengthscales: np.ndarray
    sensitivities: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if not self.outputs:
            raise DataError("spec needs at least one output")
        for op in self.outputs:
            if not isinstance(op, (Ode1Params, Ode2Params, OdeOperator)):
                raise DataError(f"unsupported output operator: {op!r}")
        q = int(self.num_forces)
        if q < 1:
            raise DataError("num_forces must be >= 1")
        object.__setattr__(self, "num_forces", q)
        ell = _as_readonly(self.lengthscales)
        if ell.shape != (q,):
            raise DataError(f"lengthscales must have shape ({q},), got {ell.shape}")
        if not np.all(ell > 0):
            raise DataError("lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ell)
        d = len(self.outputs)
        sens = _as_readonly(self.sensitivities, ndim=2)
        if sens.shape != (d, q):
            raise DataError(f"sensitivities must be {d}x{q}, got {sens.shape}")
        object.__setattr__(self, "sensitivities", sens)
        noise = _as_readonly(self.noise_vars)
        if noise.shape != (d,):
            raise DataError(f"noise_vars must have shape ({d},), got {noise.shape}")
        if not np.all(noise > 0):
            raise DataError("noise variances must be positive")
        object.__setattr__(self, "noise_vars", noise)

    @property
    def num_outputs(self) -> int:
        return len(self.outputs)


@dataclass(frozen=True, eq=False)
class MogpSpec:
    """Convolved multi-output GP over R^p with Gaussian smoothing kernels.

    One isotropic inverse-width per output; one latent copy per force.
    """

    input_dim: int
    inv_widths: np.ndarray
    num_forces: int
    lengthscales: np.ndarray
    sensitivities: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        p = int(self.input_dim)
        if p < 1:
            raise DataError("input_dim must be >= 1")
        object.__setattr__(self, "input_dim", p)
        pd = _as_readonly(self.inv_widths)
        if pd.ndim != 1 or pd.size < 1:
            raise DataError("inv_widths must be a nonempty vector")
        if not np.all(pd > 0):
            raise DataError("inverse widths must be positive")
        object.__setattr__(self, "inv_widths", pd)
        q = int(self.num_forces)
        if q < 1:
            raise DataError("num_forces must be >= 1")
        object.__setattr__(self, "num_forces", q)
        ell = _as_readonly(self.lengthscales)
        if ell.shape != (q,):
            raise DataError(f"lengthscales must have shape ({q},), got {ell.shape}")
        if not np.all(ell > 0):
            raise DataError("lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ell)
        d = pd.size
        sens = _as_readonly(self.sensitivities, ndim=2)
        if sens.shape != (d, q):
            raise DataError(f"sensitivities must be {d}x{q}, got {sens.shape}")
        object.__setattr__(self, "sensitivities", sens)
        noise = _as_readonly(self.noise_vars)
        if noise.shape != (d,):
            raise DataError(f"noise_vars must have shape ({d},), got {noise.shape}")
        if not np.all(noise > 0):
            raise DataError("noise variances must be positive")
        object.__setattr__(self, "noise_vars", noise)

    @property
    def num_outputs(self) -> int:
        return self.inv_widths.size


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True, eq=False)
class Dataset:
    """Stacked observations across outputs.

    ``output_ids`` are 1-based.  ``inputs`` is (N,) of times for LFM data or
    (N, p) of locations for MOGP data.  Row order is preserved; feature and
    covariance matrices follow it.
    """

    output_ids: np.ndarray
    inputs: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.output_ids, dtype=int)
        if ids.ndim != 1:
            raise DataError("output_ids must be a vector")
        ids = ids.copy()
        ids.flags.writeable = False
        object.__setattr__(self, "output_ids", ids)
        x = np.array(self.inputs, dtype=float)
        if x.ndim not in (1, 2) or x.shape[0] != ids.size:
            raise DataError(f"inputs shape {x.shape} does not match {ids.size} rows")
        x.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        y = _as_readonly(self.y)
        if y.shape != (ids.size,):
            raise DataError(f"y must have shape ({ids.size},), got {y.shape}")
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.output_ids.size

    @property
    def input_dim(self) -> int:
        return 1 if self.inputs.ndim == 1 else self.inputs.shape[1]

    @classmethod
    def stacked(cls, per_output_inputs, per_output_y):
        """Build a dataset from per-output sequences, ordered by output."""
        ids, xs, ys = [], [], []
        for d, (x, y) in enumerate(zip(per_output_inputs, per_output_y), start=1):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            ids.append(np.full(len(y), d))
            xs.append(x)
            ys.append(y)
        return cls(np.concatenate(ids), np.concatenate(xs), np.concatenate(ys))


def validate_dataset(data: Dataset, spec) -> None:
    """Raise DataError unless ``data`` is consistent with ``spec``.

    Empty datasets are valid.  LFM inputs must be nonnegative scalar times
    (response integrals start at 0); MOGP inputs must match the spec's
    input dimension.
    """
    if len(data) == 0:
        return
    d_max = spec.num_outputs
    ids = data.output_ids
    bad = (ids < 1) | (ids > d_max)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DataError(
            f"output_id {ids[i]} at row {i} outside 1..{d_max}"
        )
    if isinstance(spec, LfmSpec):
        if data.inputs.ndim != 1:
            raise DataError("LFM data must have scalar time inputs")
        if np.any(data.inputs < 0):
            i = int(np.argmax(data.inputs < 0))
            raise DataError(f"negative time {data.inputs[i]} at row {i}")
    elif isinstance(spec, MogpSpec):
        if data.input_dim != spec.input_dim:
            raise DataError(
                f"input dimension {data.input_dim} does not match spec "
                f"input_dim {spec.input_dim}"
            )
    else:
        raise DataError(f"unsupported spec type: {type(spec).__name__}")
    if not np.all(np.isfinite(data.y)) or not np.all(np.isfinite(data.inputs)):
        raise DataError("inputs and observations must be finite")


# ---------------------------------------------------------------------------
# hyperparameter packing

_OP_FIELDS = {
    Ode1Params: ("gamma",),
    Ode2Params: ("mass", "damper", "spring"),
}


@dataclass(frozen=True)
class HyperParamVector:
    """Flat real view of a spec's free hyperparameters.

    Positive parameters (operator constants, lengthscales, noise variances)
    are log-transformed; sensitivities are raw; general OdeOperator
    coefficients are raw because their sign is unconstrained.  ``labels``
    documents the index map, one entry per slot.
    """

    values: np.ndarray
    labels: tuple

    def __post_init__(self):
        v = _as_readonly(self.values)
        if v.size != len(self.labels):
            raise DataError("values/labels length mismatch")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return self.values.size


def _output_param_slots(op, d):
    """(labels, packed values) for one output's operator parameters."""
    if isinstance(op, OdeOperator):
        labels = [f"coeff_a{i}[d={d}]" for i in range(len(op.coeffs))]
        return labels, list(op.coeffs)
    labels, vals = [], []
    for name in _OP_FIELDS[type(op)]:
        x = getattr(op, name)
        if x <= 0:
            raise DataError(
                f"{name}={x} for output {d} must be positive to pack (log transform)"
            )
        labels.append(f"log_{name}[d={d}]")
        vals.append(math.log(x))
    return labels, vals


def pack(spec) -> HyperParamVector:
    """Flatten a spec into the optimizer's packed vector.

    Index map: per-output operator parameters first (outputs in order), then
    log lengthscales, then log noise variances, then sensitivities row-major.
    """
    labels, vals = [], []
    if isinstance(spec, LfmSpec):
        for d, op in enumerate(spec.outputs, start=1):
            lab, v = _output_param_slots(op, d)
            labels += lab
            vals += v
    elif isinstance(spec, MogpSpec):
        for d in range(1, spec.num_outputs + 1):
            labels.append(f"log_inv_width[d={d}]")
            vals.append(math.log(spec.inv_widths[d - 1]))
    else:
        raise DataError(f"cannot pack {type(spec).__name__}")
    for q in range(1, spec.num_forces + 1):
        labels.append(f"log_lengthscale[q={q}]")
        vals.append(math.log(spec.lengthscales[q - 1]))
    for d in range(1, spec.num_outputs + 1):
        labels.append(f"log_noise_var[d={d}]")
        vals.append(math.log(spec.noise_vars[d - 1]))
    for d in range(1, spec.num_outputs + 1):
        for q in range(1, spec.num_forces + 1):
            labels.append(f"sensitivity[d={d},q={q}]")
            vals.append(spec.sensitivities[d - 1, q - 1])
    return HyperParamVector(np.array(vals, dtype=float), tuple(labels))


def _values_of(v):
    return v.values if isinstance(v, HyperParamVector) else np.asarray(v, dtype=float)


def unpack(v, template):
    """Rebuild a spec of ``template``'s shape from a packed vector.

    Inverse of :func:`pack` up to floating-point round-trip of log/exp.
    Noise variances are floored at NOISE_FLOOR so the likelihood's Sigma
    stays invertible.  Raises on length mismatch or non-finite slots.
    """
    vals = _values_of(v)
    expected = len(pack(template))
    if vals.ndim != 1 or vals.size != expected:
        raise DataError(f"packed vector has {vals.size} slots, expected {expected}")
    if not np.all(np.isfinite(vals)):
        i = int(np.argmax(~np.isfinite(vals)))
        raise DataError(f"non-finite value at packed slot {i}")
    pos = 0
    if isinstance(template, LfmSpec):
        outputs = []
        for op in template.outputs:
            if isinstance(op, OdeOperator):
                n = len(op.coeffs)
                outputs.append(OdeOperator(tuple(vals[pos : pos + n])))
                pos += n
            elif isinstance(op, Ode1Params):
                outputs.append(Ode1Params(math.exp(vals[pos])))
                pos += 1
            else:
                outputs.append(
                    Ode2Params(
                        math.exp(vals[pos]),
                        math.exp(vals[pos + 1]),
                        math.exp(vals[pos + 2]),
                    )
                )
                pos += 3
    else:
        d = template.num_outputs
        inv_widths = np.exp(vals[pos : pos + d])
        pos += d
    q = template.num_forces
    nd = template.num_outputs
    lengthscales = np.exp(vals[pos : pos + q])
    pos += q
    noise = np.maximum(np.exp(vals[pos : pos + nd]), NOISE_FLOOR)
    pos += nd
    sens = vals[pos : pos + nd * q].reshape(nd, q)
    if isinstance(template, LfmSpec):
        return LfmSpec(tuple(outputs), q, lengthscales, sens, noise)
    return MogpSpec(template.input_dim, inv_widths, q, lengthscales, sens, noise)


# ---------------------------------------------------------------------------
# CSV format: `output_id,t,y` (LFM) or `output_id,x1,...,xp,y` (MOGP)


def read_dataset_csv(path, require_y=True) -> Dataset:
    """Read a dataset CSV; infers LFM vs MOGP layout from the header.

    With ``require_y=False`` the trailing ``y`` column may be absent (input
    grids for kernel evaluation); y is then filled with zeros.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (missing header)") from None
        header = [h.strip() for h in header]
        if header[0] != "output_id":
            raise DataError(f"{path}: first column must be output_id, got {header[0]}")
        has_y = header[-1] == "y"
        if require_y and not has_y:
            raise DataError(f"{path}: missing y column")
        in_cols = header[1 : -1 if has_y else len(header)]
        if not in_cols:
            raise DataError(f"{path}: no input columns")
        if in_cols != ["t"] and in_cols != [f"x{i}" for i in range(1, len(in_cols) + 1)]:
            raise DataError(f"{path}: input columns must be t or x1..xp, got {in_cols}")
        scalar_time = in_cols == ["t"]
        width = len(header)
        ids, xs, ys = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise DataError(
                    f"{path}:{lineno}: expected {width} fields, got {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                vals = [float(s) for s in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            xs.append(vals[: len(in_cols)])
            ys.append(vals[-1] if has_y else 0.0)
    ids = np.array(ids, dtype=int)
    x = np.array(xs, dtype=float).reshape(len(ids), len(in_cols))
    if scalar_time:
        x = x[:, 0] if len(ids) else x.reshape(0)
    return Dataset(ids, x, np.array(ys, dtype=float))


def write_dataset_csv(path, data: Dataset) -> None:
    """Write a dataset in the canonical CSV layout."""
    p = data.input_dim
    scalar = data.inputs.ndim == 1
    header = ["output_id"] + (["t"] if scalar else [f"x{i}" for i in range(1, p + 1)]) + ["y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(data)):
            x = [data.inputs[i]] if scalar else list(data.inputs[i])
            writer.writerow([int(data.output_ids[i])] + [repr(float(v)) for v in x]
                            + [repr(float(data.y[i]))])
