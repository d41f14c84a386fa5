"""Sparse unbiased estimates of the derivative tensor and stochastic gradients.

Two samplers produce a sparse estimate of the derivative tensor:

* uniform: s indices drawn i.i.d. with replacement over the full index set;
  each collapsed entry is scaled by multiplicity * (T / s).
* stratified: p draws from the stored nonzeros (scaled by multiplicity *
  nnz / p) plus q rejection-sampled zero indices (scaled by multiplicity *
  (T - nnz) / q).

The stochastic gradient is the exact gradient formula applied to the sparse
estimate; the column-norm regularizer is always added exactly, never sampled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .losses import DomainError, as_weighted
from .objective import GradientBundle, gradient_from_derivative
from .tensors import DenseTensor, SparseTensor, SymKruskal, model_entries


class RejectionBudgetExhausted(RuntimeError):
    """Could not find enough zero entries; the tensor is too dense to stratify."""


@dataclass
class SamplerConfig:
    kind: str = "uniform"  # "uniform" | "stratified"
    s: int = 1000
    p: int = 500
    q: int = 500
    rng_seed: int = 0
    max_rejection_iters: int = 100
    # keep the uncorrected zero-entry scale (1 - nnz)/q available for
    # comparison; the corrected default (T - nnz)/q is what makes the
    # estimator unbiased
    uncorrected_zero_scale: bool = False

    def __post_init__(self):
        if self.kind not in ("uniform", "stratified"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "uniform" and self.s < 1:
            raise ValueError("uniform sampler needs s >= 1")
        if self.kind == "stratified" and (self.p < 0 or self.q < 0 or self.p + self.q < 1):
            raise ValueError("stratified sampler needs p, q >= 0 and p + q >= 1")


@dataclass
class SampledDerivative:
    """Sparse derivative estimate: unique indices, scaled values, and metadata."""

    dims: tuple
    subs: np.ndarray  # (k, N) unique multi-indices
    vals: np.ndarray  # (k,) scaled derivative values (zeros allowed)
    total_entries: int
    nnz: int
    n_draws: int

    def densify(self) -> DenseTensor:
        data = np.zeros(self.dims, dtype=np.float64)
        if self.subs.shape[0]:
            data[tuple(self.subs.T)] = self.vals
        return DenseTensor(data)


def _collapse(subs, dims):
    """Unique multi-indices with multiplicities."""
    if subs.shape[0] == 0:
        return subs, np.zeros(0, dtype=np.int64)
    keys = np.ravel_multi_index(subs.T, dims, order="F")
    uniq, counts = np.unique(keys, return_counts=True)
    out = np.column_stack(np.unravel_index(uniq, dims, order="F")).astype(np.int64)
    return out, counts


def _data_values_at(x, subs):
    if isinstance(x, SparseTensor):
        return x.values_at(subs)
    return x.data[tuple(subs.T)]


def _weights_at(loss, x, subs):
    loss = as_weighted(loss)
    if loss.weights is None:
        return None
    dims = x.dims
    return loss.weights_array(dims)[tuple(subs.T)]


def _scaled_derivs(loss, x, m, subs, scales):
    loss = as_weighted(loss)
    xv = _data_values_at(x, subs)
    mv = model_entries(m, subs)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = loss.base.deriv(xv, mv)
    w = _weights_at(loss, x, subs)
    if w is not None:
        d = np.where(w == 0.0, 0.0, d) * w
    if not np.isfinite(d).all():
        bad = subs[int(np.flatnonzero(~np.isfinite(d))[0])]
        raise DomainError(
            f"loss {loss.name!r} derivative undefined at sampled index {tuple(bad)}",
            index=tuple(bad),
        )
    return scales * d


def sample_uniform(
    cfg: SamplerConfig, loss, x, m: SymKruskal, rng: Optional[np.random.Generator] = None
) -> SampledDerivative:
    """Sparse derivative estimate from s uniform index draws (with replacement)."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    dims = x.dims
    total = int(np.prod(dims))
    raw = np.column_stack([rng.integers(0, d, size=cfg.s) for d in dims])
    subs, counts = _collapse(raw, dims)
    scales = counts * (total / cfg.s)
    vals = _scaled_derivs(loss, x, m, subs, scales)
    return SampledDerivative(tuple(dims), subs, vals, total, x.nnz, cfg.s)


def _sample_zero_indices(x: SparseTensor, q, rng, max_iters):
    """q linear indices uniform over the zero entries, via rejection."""
    total = x.size
    if total - x.nnz <= 0:
        raise RejectionBudgetExhausted("tensor has no zero entries to sample")
    out = np.empty(q, dtype=np.int64)
    have = 0
    for _ in range(max_iters):
        if have >= q:
            break
        cand = rng.integers(0, total, size=q - have)
        cand_subs = np.column_stack(np.unravel_index(cand, x.dims, order="F"))
        keep = cand[~x.contains(cand_subs)]
        out[have : have + keep.size] = keep
        have += keep.size
    if have < q:
        raise RejectionBudgetExhausted(
            f"found only {have}/{q} zero samples in {max_iters} rounds; "
            "tensor too dense for stratified zero sampling"
        )
    return np.column_stack(np.unravel_index(out, x.dims, order="F")).astype(np.int64)


def sample_stratified(
    cfg: SamplerConfig,
    loss,
    x: SparseTensor,
    m: SymKruskal,
    rng: Optional[np.random.Generator] = None,
) -> SampledDerivative:
    """Sparse derivative estimate from p nonzero draws and q zero draws."""
    if not isinstance(x, SparseTensor):
        raise TypeError("stratified sampling requires a SparseTensor")
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    dims = x.dims
    total = x.size
    parts = []
    if cfg.p > 0:
        if x.nnz == 0:
            raise ValueError("cannot sample nonzeros from an empty sparse tensor")
        rows = rng.integers(0, x.nnz, size=cfg.p)
        subs_nz, counts_nz = _collapse(x.subs[rows], dims)
        parts.append((subs_nz, counts_nz * (x.nnz / cfg.p)))
    if cfg.q > 0:
        raw = _sample_zero_indices(x, cfg.q, rng, cfg.max_rejection_iters)
        subs_z, counts_z = _collapse(raw, dims)
        zero_total = 1.0 - x.nnz if cfg.uncorrected_zero_scale else total - x.nnz
        parts.append((subs_z, counts_z * (zero_total / cfg.q)))
    subs = np.concatenate([p[0] for p in parts]) if parts else np.empty((0, x.ndim), dtype=np.int64)
    scales = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    vals = _scaled_derivs(loss, x, m, subs, scales)
    return SampledDerivative(tuple(dims), subs, vals, total, x.nnz, cfg.p + cfg.q)


def sample_derivative(cfg: SamplerConfig, loss, x, m, rng=None) -> SampledDerivative:
    if cfg.kind == "uniform":
        return sample_uniform(cfg, loss, x, m, rng=rng)
    return sample_stratified(cfg, loss, x, m, rng=rng)


def stochastic_gradient(
    sd: SampledDerivative,
    m: SymKruskal,
    gamma: float = 0.0,
    lambda_frozen: bool = False,
) -> GradientBundle:
    """Gradient assembled from sampled rows only; cost O(r * N * draws).

    Identical to running the dense gradient on ``sd.densify()``; the
    regularizer part is exact.
    """
    return gradient_from_derivative(
        sd, m, gamma=gamma, fastpath=False, lambda_frozen=lambda_frozen
    )


def make_gradient_source(cfg: SamplerConfig, loss, x, gamma=0.0, lambda_frozen=False, rng=None):
    """Callable model -> GradientBundle drawing a fresh sample per call."""
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng

    def source(m: SymKruskal) -> GradientBundle:
        sd = sample_derivative(cfg, loss, x, m, rng=rng)
        return stochastic_gradient(sd, m, gamma=gamma, lambda_frozen=lambda_frozen)

    return source


class LossEstimator:
    """Unbiased total-loss estimate from one fixed sample set.

    The set is drawn once (at fit start) and reused for every epoch-end
    estimate so that consecutive estimates are comparable.
    """

    def __init__(self, loss, x, subs, scales):
        self.loss = as_weighted(loss)
        self.x = x
        self.subs = np.asarray(subs, dtype=np.int64)
        base = np.asarray(scales, dtype=np.float64)
        self.x_vals = _data_values_at(x, self.subs)
        w = _weights_at(self.loss, x, self.subs)
        self._wmask = None
        if w is not None:
            self._wmask = w == 0.0
            base = base * w
        self.scales = base

    @classmethod
    def exhaustive(cls, loss, x):
        """Every entry once with scale 1: the estimate is the exact loss."""
        dims = x.dims
        grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
        subs = np.column_stack([g.ravel() for g in grids])
        return cls(loss, x, subs, np.ones(subs.shape[0]))

    @classmethod
    def sampled(cls, cfg: SamplerConfig, loss, x, size_factor=10, rng=None):
        """Fixed set matching the gradient sampler kind, scaled-up batch."""
        rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
        dims = x.dims
        total = int(np.prod(dims))
        if cfg.kind == "uniform":
            s = cfg.s * size_factor
            raw = np.column_stack([rng.integers(0, d, size=s) for d in dims])
            subs, counts = _collapse(raw, dims)
            return cls(loss, x, subs, counts * (total / s))
        p, q = cfg.p * size_factor, cfg.q * size_factor
        parts = []
        if p > 0:
            if x.nnz == 0:
                raise ValueError("cannot sample nonzeros from an empty sparse tensor")
            rows = rng.integers(0, x.nnz, size=p)
            subs_nz, counts_nz = _collapse(x.subs[rows], dims)
            parts.append((subs_nz, counts_nz * (x.nnz / p)))
        if q > 0:
            raw = _sample_zero_indices(x, q, rng, cfg.max_rejection_iters)
            subs_z, counts_z = _collapse(raw, dims)
            parts.append((subs_z, counts_z * ((total - x.nnz) / q)))
        subs = np.concatenate([pt[0] for pt in parts])
        scales = np.concatenate([pt[1] for pt in parts])
        return cls(loss, x, subs, scales)

    def estimate(self, m: SymKruskal) -> float:
        mv = model_entries(m, self.subs)
        with np.errstate(invalid="ignore", divide="ignore"):
            v = self.loss.base.value(self.x_vals, mv)
        if self._wmask is not None:
            v = np.where(self._wmask, 0.0, v)
        if not np.isfinite(v).all():
            bad = self.subs[int(np.flatnonzero(~np.isfinite(v))[0])]
            raise DomainError(
                f"loss {self.loss.name!r} undefined at sampled index {tuple(bad)}",
                index=tuple(bad),
            )
        return float(np.dot(self.scales, v))
