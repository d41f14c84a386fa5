"""Entrywise loss functions, their derivatives, and whole-tensor sums.

Built-in losses (selected by name):

* ``least-squares``          (x - m)^2
* ``nonneg-least-squares``   (x - m)^2 with factors/weights bounded at 0
* ``bernoulli-odds``         log(1 + m) - x log(m + eps), binary x, m >= 0
* ``poisson``                m - x log(m + eps), count x, m >= 0

The total loss always sums over the *full* index set, also for sparse data:
zeros of a sparse tensor are observed zeros, not missing values.  Missing
entries are expressed by a zero weight instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensors import (
    DenseTensor,
    ModePartition,
    SparseTensor,
    SymKruskal,
    WeightTensor,
    densify,
    reconstruct,
)


class DomainError(ValueError):
    """Model entry left the loss domain; carries the offending index."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class LossSpec:
    """Entrywise loss: value(x, m) and deriv(x, m) = d value / d m.

    Both callables must accept and return numpy arrays elementwise.
    ``lower_bound`` is the box constraint handed to the optimizer for the
    model parameters (None = unconstrained); ``epsilon`` is the shift that
    keeps log terms finite at m = 0.

    ``value_at_zero``/``deriv_at_zero`` are optional specializations of the
    x = 0 case; sparse data is mostly zeros, and e.g. the log(m + eps) term
    of the count losses drops out entirely there.
    """

    name: str
    value: Callable
    deriv: Callable
    lower_bound: Optional[float] = None
    epsilon: float = 1e-10
    value_at_zero: Optional[Callable] = None
    deriv_at_zero: Optional[Callable] = None

    def value0(self, m):
        if self.value_at_zero is not None:
            return self.value_at_zero(m)
        return self.value(0.0, m)

    def deriv0(self, m):
        if self.deriv_at_zero is not None:
            return self.deriv_at_zero(m)
        return self.deriv(0.0, m)


def _make_builtin():
    eps = 1e-10

    def ls_value(x, m):
        return (x - m) ** 2

    def ls_deriv(x, m):
        return 2.0 * (m - x)

    def bernoulli_value(x, m):
        return np.log1p(m) - x * np.log(m + eps)

    def bernoulli_deriv(x, m):
        return 1.0 / (1.0 + m) - x / (m + eps)

    def poisson_value(x, m):
        return m - x * np.log(m + eps)

    def poisson_deriv(x, m):
        return 1.0 - x / (m + eps)

    def square(m):
        return m * m

    def twice(m):
        return 2.0 * m

    def log1p_only(m):
        return np.log1p(m)

    def recip1p(m):
        return 1.0 / (1.0 + m)

    def identity(m):
        return np.array(m, dtype=np.float64, copy=True)

    def ones(m):
        return np.ones_like(m, dtype=np.float64)

    return {
        "least-squares": LossSpec(
            "least-squares", ls_value, ls_deriv, None, eps, square, twice
        ),
        "nonneg-least-squares": LossSpec(
            "nonneg-least-squares", ls_value, ls_deriv, 0.0, eps, square, twice
        ),
        "bernoulli-odds": LossSpec(
            "bernoulli-odds", bernoulli_value, bernoulli_deriv, 0.0, eps,
            log1p_only, recip1p,
        ),
        "poisson": LossSpec(
            "poisson", poisson_value, poisson_deriv, 0.0, eps, identity, ones
        ),
    }


_BUILTIN = _make_builtin()
LOSS_NAMES = tuple(sorted(_BUILTIN))


def get_loss(name: str) -> LossSpec:
    try:
        return _BUILTIN[name]
    except KeyError:
        raise ValueError(
            f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}"
        ) from None


def finite_difference_check(spec: LossSpec, n_points=1000, seed=0, step=1e-6):
    """Max scaled error |fd - deriv| / max(1, |deriv|) over random domain points."""
    rng = np.random.default_rng(seed)
    lo = spec.lower_bound if spec.lower_bound is not None else -3.0
    m = rng.uniform(lo + 0.05, lo + 3.05, size=n_points)
    x = rng.uniform(0.0, 3.0, size=n_points)
    h = step * np.maximum(1.0, np.abs(m))
    fd = (spec.value(x, m + h) - spec.value(x, m - h)) / (2.0 * h)
    d = spec.deriv(x, m)
    return float(np.max(np.abs(fd - d) / np.maximum(1.0, np.abs(d))))


def make_loss(name, value, deriv, lower_bound=None, epsilon=1e-10, tol=1e-5):
    """Register a user loss; runs the derivative consistency check once."""
    spec = LossSpec(name, value, deriv, lower_bound, epsilon)
    err = finite_difference_check(spec)
    if err > tol:
        raise ValueError(
            f"loss {name!r}: derivative disagrees with finite differences "
            f"(scaled error {err:.2e} > {tol:.0e})"
        )
    return spec


@dataclass(frozen=True)
class WeightedLoss:
    """Entrywise loss with an optional nonnegative weight tensor."""

    base: LossSpec
    weights: Optional[WeightTensor] = None

    @property
    def name(self):
        return self.base.name

    @property
    def lower_bound(self):
        return self.base.lower_bound

    def weights_array(self, dims):
        if self.weights is None:
            return None
        if self.weights.dims != tuple(dims):
            raise ValueError(
                f"weight tensor dims {self.weights.dims} do not match data {tuple(dims)}"
            )
        return self.weights.data


def as_weighted(loss) -> WeightedLoss:
    if isinstance(loss, WeightedLoss):
        return loss
    return WeightedLoss(loss)


def loss_value(spec: LossSpec, x: float, m: float) -> float:
    with np.errstate(invalid="ignore", divide="ignore"):
        v = float(spec.value(np.float64(x), np.float64(m)))
    if not np.isfinite(v):
        raise DomainError(f"loss {spec.name!r} undefined at (x={x}, m={m})")
    return v


def loss_deriv(spec: LossSpec, x: float, m: float) -> float:
    with np.errstate(invalid="ignore", divide="ignore"):
        d = float(spec.deriv(np.float64(x), np.float64(m)))
    if not np.isfinite(d):
        raise DomainError(f"loss {spec.name!r} derivative undefined at (x={x}, m={m})")
    return d


def _data_array(x):
    if isinstance(x, SparseTensor):
        return densify(x).data
    if isinstance(x, DenseTensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_finite(arr, dims, what):
    if np.isfinite(arr).all():
        return
    flat_bad = int(np.flatnonzero(~np.isfinite(arr.ravel(order="C")))[0])
    index = tuple(int(i) for i in np.unravel_index(flat_bad, dims, order="C"))
    raise DomainError(f"{what} is not finite at index {index}", index=index)


def total_loss(loss, x, m: SymKruskal, model=None) -> float:
    """Sum of w_i * l(x_i, m_i) over every entry of the index set."""
    loss = as_weighted(loss)
    xd = _data_array(x)
    md = model.data if model is not None else reconstruct(m).data
    if xd.shape != md.shape:
        raise ValueError(f"data dims {xd.shape} do not match model dims {md.shape}")
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = loss.base.value(xd, md)
    w = loss.weights_array(xd.shape)
    if w is not None:
        vals = np.where(w == 0.0, 0.0, vals)  # zero weight kills the entry even if l is undefined
        _check_finite(vals, xd.shape, f"loss {loss.name!r}")
        return float(np.sum(w * vals))
    _check_finite(vals, xd.shape, f"loss {loss.name!r}")
    return float(np.sum(vals))


def derivative_tensor(loss, x, m: SymKruskal, model=None) -> DenseTensor:
    """Entrywise w_i * d l / d m at the current model."""
    loss = as_weighted(loss)
    xd = _data_array(x)
    md = model.data if model is not None else reconstruct(m).data
    if xd.shape != md.shape:
        raise ValueError(f"data dims {xd.shape} do not match model dims {md.shape}")
    with np.errstate(invalid="ignore", divide="ignore"):
        y = loss.base.deriv(xd, md)
    w = loss.weights_array(xd.shape)
    if w is not None:
        y = np.where(w == 0.0, 0.0, y)
        _check_finite(y, xd.shape, f"loss {loss.name!r} derivative")
        y = w * y
    else:
        _check_finite(y, xd.shape, f"loss {loss.name!r} derivative")
    return DenseTensor(y)


def dedup_weights(dims, partition: ModePartition) -> WeightTensor:
    """Weight 1 on canonical indices (nondecreasing within each cell), else 0.

    Optional alternative to summing over all entries of a symmetric tensor,
    which counts every orbit once instead of |orbit| times.
    """
    partition.cell_dims(dims)
    grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij", sparse=True)
    mask = np.ones(dims, dtype=bool)
    for cell in partition.cells:
        for a, b in zip(cell, cell[1:]):
            mask &= grids[a] <= grids[b]
    return WeightTensor(mask.astype(np.float64))
