"""Fitting objective: weighted loss plus column-norm regularizer, and its gradients.

The objective over (weights, factor matrices) is

    F = sum_i w_i l(x_i, m_i) + gamma * sum_k sum_j (||A_k[:, j]||^2 - 1)^2

The gradient with respect to each cell factor is the sum of the per-mode
MTTKRPs of the derivative tensor over that cell's modes, times diag(weights).
When the data itself has the model's symmetry, one MTTKRP per cell scaled by
the cell size gives the same result (the fast path).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Union

import numpy as np

from .kernels import mttkrp_coo, mttkrp_dense
from .losses import (
    WeightedLoss,
    _check_finite,
    as_weighted,
    derivative_tensor,
    total_loss,
)
from .tensors import (
    DenseTensor,
    ModePartition,
    SparseTensor,
    SymKruskal,
    densify,
    is_symmetric,
    reconstruct,
)


@dataclass
class ObjectiveConfig:
    loss: WeightedLoss
    partition: ModePartition
    rank: int
    gamma: float = 0.1
    optimize_lambda: bool = True
    symmetric_data_fastpath: bool = False
    fastpath_symmetry_check: bool = True
    fastpath_symmetry_tol: float = 1e-8

    def __post_init__(self):
        self.loss = as_weighted(self.loss)
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.rank < 1:
            raise ValueError("rank must be positive")


@dataclass
class GradientBundle:
    """Gradient shaped exactly like the model it was taken at."""

    d_lambda: np.ndarray
    d_factors: List[np.ndarray]
    lambda_frozen: bool = False


def regularizer_value(gamma: float, factors) -> float:
    if gamma == 0.0:
        return 0.0
    total = 0.0
    for A in factors:
        total += float(np.sum((np.sum(A * A, axis=0) - 1.0) ** 2))
    return gamma * total


def regularizer_gradient(gamma: float, A: np.ndarray) -> np.ndarray:
    """Per-column 4*gamma*(||a||^2 - 1) * a."""
    if gamma == 0.0:
        return np.zeros_like(A)
    return 4.0 * gamma * (np.sum(A * A, axis=0) - 1.0) * A


def objective_value(cfg: ObjectiveConfig, x, m: SymKruskal, model=None) -> float:
    return total_loss(cfg.loss, x, m, model=model) + regularizer_value(
        cfg.gamma, m.factors
    )


def _mttkrp_any(y, mats, mode):
    # anything exposing dims/subs/vals (SparseTensor, SampledDerivative)
    # goes through the coordinate kernel
    if isinstance(y, DenseTensor):
        return mttkrp_dense(y, mats, mode)
    return mttkrp_coo(y.dims, y.subs, y.vals, mats, mode)


def gradient_from_derivative(
    y: Union[DenseTensor, SparseTensor],
    m: SymKruskal,
    gamma: float = 0.0,
    fastpath: bool = False,
    lambda_frozen: bool = False,
) -> GradientBundle:
    """Assemble the gradient bundle from a given derivative tensor.

    ``fastpath`` computes one MTTKRP per cell and scales by the cell size;
    it is only valid when ``y`` is symmetric w.r.t. the model's partition.
    """
    fs = m.factor_sequence()
    part = m.partition
    d_lambda = None
    d_factors = []
    for k, cell in enumerate(part.cells):
        if fastpath:
            g = _mttkrp_any(y, fs, cell[0])
            if d_lambda is None:
                d_lambda = np.sum(g * fs[cell[0]], axis=0)
            cell_sum = len(cell) * g
        else:
            cell_sum = np.zeros_like(m.factors[k])
            for t in cell:
                g = _mttkrp_any(y, fs, t)
                if d_lambda is None:
                    d_lambda = np.sum(g * fs[t], axis=0)
                cell_sum += g
        d_factors.append(
            cell_sum * m.weights[None, :] + regularizer_gradient(gamma, m.factors[k])
        )
    return GradientBundle(d_lambda, d_factors, lambda_frozen=lambda_frozen)


def gradient(cfg: ObjectiveConfig, x, m: SymKruskal, model=None) -> GradientBundle:
    """Exact gradient: one MTTKRP per mode, summed within each cell."""
    y = derivative_tensor(cfg.loss, x, m, model=model)
    return gradient_from_derivative(
        y, m, gamma=cfg.gamma, fastpath=False, lambda_frozen=not cfg.optimize_lambda
    )


def gradient_fastpath(cfg: ObjectiveConfig, x, m: SymKruskal, model=None) -> GradientBundle:
    """Exact gradient for data symmetric w.r.t. the partition: K MTTKRPs.

    The representative mode of each cell is its smallest mode index.
    """
    if cfg.fastpath_symmetry_check:
        xt = x if isinstance(x, DenseTensor) else densify(x) if isinstance(x, SparseTensor) else DenseTensor(x)
        if not is_symmetric(xt, m.partition, tol=cfg.fastpath_symmetry_tol):
            raise ValueError(
                "fast path requires data symmetric w.r.t. the model partition"
            )
    y = derivative_tensor(cfg.loss, x, m, model=model)
    return gradient_from_derivative(
        y, m, gamma=cfg.gamma, fastpath=True, lambda_frozen=not cfg.optimize_lambda
    )


def n_params(m: SymKruskal, include_lambda: bool = True) -> int:
    total = m.rank if include_lambda else 0
    return total + sum(f.size for f in m.factors)


def flatten(m: SymKruskal, include_lambda: bool = True) -> np.ndarray:
    """Model -> flat vector: lambda first, then factors cell by cell, column-major."""
    parts = [m.weights] if include_lambda else []
    parts.extend(f.flatten(order="F") for f in m.factors)
    return np.concatenate(parts)


def unflatten(vec, template: SymKruskal, include_lambda: bool = True) -> SymKruskal:
    """Inverse of :func:`flatten`; lambda comes from the template when excluded."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    expected = n_params(template, include_lambda)
    if vec.size != expected:
        raise ValueError(f"parameter vector has length {vec.size}, expected {expected}")
    pos = 0
    if include_lambda:
        weights = vec[: template.rank].copy()
        pos = template.rank
    else:
        weights = template.weights.copy()
    factors = []
    for f in template.factors:
        factors.append(vec[pos : pos + f.size].reshape(f.shape, order="F").copy())
        pos += f.size
    return SymKruskal(weights, factors, template.partition)


def flatten_gradient(b: GradientBundle, include_lambda: bool = True) -> np.ndarray:
    """Bundle -> flat vector aligned with :func:`flatten`."""
    parts = [b.d_lambda] if include_lambda else []
    parts.extend(g.flatten(order="F") for g in b.d_factors)
    return np.concatenate(parts)


class Evaluator:
    """Binds an objective config to one data tensor for repeated evaluation.

    Runs the fast-path symmetry check once and shares the reconstructed model
    between the value and gradient of a single evaluation point.  Sparse,
    unweighted data stays sparse: the loss and its derivative are evaluated
    against x = 0 everywhere in one vectorized pass and then corrected at the
    stored nonzeros, which avoids two full-size passes per evaluation.
    """

    def __init__(self, cfg: ObjectiveConfig, x):
        self.cfg = cfg
        if isinstance(x, (DenseTensor, SparseTensor)):
            self.x = x
        else:
            self.x = DenseTensor(x)
        if cfg.partition.n_modes != self.x.ndim:
            raise ValueError("partition mode count does not match data tensor")
        cfg.partition.cell_dims(self.x.dims)
        self._sparse_path = (
            isinstance(self.x, SparseTensor) and cfg.loss.weights is None
        )
        self._x_dense = None
        if not self._sparse_path:
            self._x_dense = densify(self.x) if isinstance(self.x, SparseTensor) else self.x
        self.use_fastpath = cfg.symmetric_data_fastpath
        if self.use_fastpath and cfg.fastpath_symmetry_check:
            xd = self._x_dense if self._x_dense is not None else densify(self.x)
            if not is_symmetric(xd, cfg.partition, tol=cfg.fastpath_symmetry_tol):
                raise ValueError(
                    "symmetric_data_fastpath enabled but data is not symmetric "
                    "w.r.t. the partition"
                )

    def _sparse_loss_parts(self, m, model, want_value, want_deriv):
        """(value, derivative tensor) via baseline-at-zero plus nonzero fixups."""
        spec = self.cfg.loss.base
        md = model.data
        subs = tuple(self.x.subs.T)
        mv = md[subs]
        xv = self.x.vals
        f = None
        y = None
        with np.errstate(invalid="ignore", divide="ignore"):
            if want_value:
                base = spec.value0(md)
                corr = spec.value(xv, mv) - spec.value0(mv)
                f = float(np.sum(base)) + float(np.sum(corr))
                if not np.isfinite(f):
                    _check_finite(base, md.shape, f"loss {spec.name!r}")
                    _check_finite(corr, (corr.size,), f"loss {spec.name!r}")
            if want_deriv:
                yd = np.asarray(spec.deriv0(md), dtype=np.float64)
                if yd.ndim == 0:  # a constant derivative at x = 0
                    yd = np.full(md.shape, float(yd))
                yd[subs] = spec.deriv(xv, mv)
                if not np.isfinite(yd).all():
                    _check_finite(yd, md.shape, f"loss {spec.name!r} derivative")
                y = DenseTensor(yd)
        return f, y

    def value(self, m: SymKruskal) -> float:
        if self._sparse_path:
            model = reconstruct(m)
            f, _ = self._sparse_loss_parts(m, model, True, False)
            return f + regularizer_value(self.cfg.gamma, m.factors)
        return objective_value(self.cfg, self._x_dense, m)

    def _gradient_from(self, y, m):
        return gradient_from_derivative(
            y,
            m,
            gamma=self.cfg.gamma,
            fastpath=self.use_fastpath,
            lambda_frozen=not self.cfg.optimize_lambda,
        )

    def gradient(self, m: SymKruskal) -> GradientBundle:
        model = reconstruct(m)
        if self._sparse_path:
            _, y = self._sparse_loss_parts(m, model, False, True)
        else:
            y = derivative_tensor(self.cfg.loss, self._x_dense, m, model=model)
        return self._gradient_from(y, m)

    def value_and_gradient(self, m: SymKruskal):
        model = reconstruct(m)
        if self._sparse_path:
            f, y = self._sparse_loss_parts(m, model, True, True)
            f += regularizer_value(self.cfg.gamma, m.factors)
        else:
            f = objective_value(self.cfg, self._x_dense, m, model=model)
            y = derivative_tensor(self.cfg.loss, self._x_dense, m, model=model)
        return f, self._gradient_from(y, m)
