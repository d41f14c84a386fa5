"""Fitting drivers: bound-constrained L-BFGS-B and Adam with bad-epoch rollback.

Both drivers work on the flat parameter vector from
:func:`symgcp.objective.flatten` and are agnostic about where the gradients
come from: L-BFGS-B takes a (value, gradient) closure, Adam takes a
stochastic gradient source plus an objective estimator.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .objective import GradientBundle, flatten, flatten_gradient, unflatten
from .stochastic import SamplerConfig
from .tensors import ModePartition, SymKruskal


@dataclass
class LbfgsbConfig:
    memory: int = 10
    max_iterations: int = 1000
    gradient_tol: float = 1e-8  # projected gradient sup-norm
    rel_decrease_tol: float = 1e-12
    lower_bound: Optional[float] = None
    upper_bound: Optional[float] = None

    def __post_init__(self):
        if self.gradient_tol <= 0 or self.rel_decrease_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class AdamConfig:
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    iters_per_epoch: int = 100
    max_epochs: int = 100
    kappa: float = 0.99  # required relative decrease per epoch
    max_bad_epochs: int = 3  # consecutive
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    bound_projection: bool = True
    lower_bound: Optional[float] = None
    decay_on_bad_epoch: bool = True  # halve alpha after each bad epoch

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1, beta2 must lie in [0, 1)")


@dataclass
class TraceRecord:
    step: int
    wall_seconds: float
    objective: float
    kind: str  # "exact" | "estimated" | "bad-epoch"


class FitTrace:
    """Per-iteration (or per-epoch) progress log with wall-clock stamps."""

    def __init__(self):
        self.records: List[TraceRecord] = []
        self.success = True
        self.message = ""

    def append(self, step, wall_seconds, objective, kind):
        if self.records and wall_seconds < self.records[-1].wall_seconds:
            raise ValueError("trace timestamps must be nondecreasing")
        self.records.append(TraceRecord(int(step), float(wall_seconds), float(objective), kind))

    def final_objective(self):
        return self.records[-1].objective if self.records else float("nan")

    def __len__(self):
        return len(self.records)


def _bounds_for(n, lower, upper):
    if lower is None and upper is None:
        return None
    return [(lower, upper)] * n


def fit_lbfgsb(
    cfg: LbfgsbConfig,
    value_and_grad: Callable[[SymKruskal], Tuple[float, GradientBundle]],
    m0: SymKruskal,
    include_lambda: bool = True,
) -> Tuple[SymKruskal, FitTrace]:
    """Deterministic fit with bound-constrained limited-memory quasi-Newton.

    A line-search failure is reported through ``trace.success``/``message``
    with the last iterate returned, not raised.
    """
    trace = FitTrace()
    t0 = time.perf_counter()
    cache = {"x": None, "f": None}

    def fun(vec):
        model = unflatten(vec, m0, include_lambda=include_lambda)
        f, bundle = value_and_grad(model)
        cache["x"] = vec.copy()
        cache["f"] = f
        return f, flatten_gradient(bundle, include_lambda=include_lambda)

    x0 = flatten(m0, include_lambda=include_lambda)
    # project the start into the feasible box (scipy does the same internally)
    if cfg.lower_bound is not None or cfg.upper_bound is not None:
        x0 = np.clip(x0, cfg.lower_bound, cfg.upper_bound)
    f0, _ = fun(x0)
    trace.append(0, time.perf_counter() - t0, f0, "exact")
    it = {"n": 0}

    def callback(xk):
        it["n"] += 1
        if cache["x"] is not None and np.array_equal(cache["x"], xk):
            f = cache["f"]
        else:
            f = fun(xk)[0]
        trace.append(it["n"], time.perf_counter() - t0, f, "exact")

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=_bounds_for(x0.size, cfg.lower_bound, cfg.upper_bound),
        callback=callback,
        options={
            "maxcor": cfg.memory,
            "maxiter": cfg.max_iterations,
            "gtol": cfg.gradient_tol,
            "ftol": cfg.rel_decrease_tol,
        },
    )
    trace.success = bool(res.success)
    trace.message = str(res.message)
    final = unflatten(res.x, m0, include_lambda=include_lambda)
    if res.fun > f0:  # never hand back something worse than the start
        final = m0.copy()
    return final, trace


def fit_adam(
    cfg: AdamConfig,
    gradient_source: Callable[[SymKruskal], GradientBundle],
    estimate_objective: Callable[[SymKruskal], float],
    m0: SymKruskal,
    include_lambda: bool = True,
    snapshot_callback: Optional[Callable] = None,
) -> Tuple[SymKruskal, FitTrace]:
    """Stochastic fit in fixed-length epochs with bad-epoch rollback.

    At each epoch end the objective is estimated; an epoch whose estimate
    fails to drop below kappa times the previous estimate is "bad": the
    parameters, both moment vectors, and the iteration counter are restored
    from the previous epoch's checkpoint.  ``snapshot_callback(epoch, wall,
    model)`` fires after each accepted epoch.
    """
    trace = FitTrace()
    t0 = time.perf_counter()
    params = flatten(m0, include_lambda=include_lambda)
    # project the start into the feasible box, like the deterministic driver
    if cfg.bound_projection and cfg.lower_bound is not None:
        np.maximum(params, cfg.lower_bound, out=params)
        m0 = unflatten(params, m0, include_lambda=include_lambda)
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)
    t = 0
    alpha = cfg.alpha
    est_prev = estimate_objective(m0)
    trace.append(0, time.perf_counter() - t0, est_prev, "estimated")
    if snapshot_callback is not None:
        snapshot_callback(0, trace.records[-1].wall_seconds, m0.copy())
    checkpoint = (params.copy(), m1.copy(), m2.copy(), t)
    consecutive_bad = 0

    for epoch in range(1, cfg.max_epochs + 1):
        for _ in range(cfg.iters_per_epoch):
            t += 1
            model = unflatten(params, m0, include_lambda=include_lambda)
            g = flatten_gradient(gradient_source(model), include_lambda=include_lambda)
            m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g * g
            m1_hat = m1 / (1.0 - cfg.beta1 ** t)
            m2_hat = m2 / (1.0 - cfg.beta2 ** t)
            params = params - alpha * m1_hat / (np.sqrt(m2_hat) + cfg.eps_hat)
            if cfg.bound_projection and cfg.lower_bound is not None:
                np.maximum(params, cfg.lower_bound, out=params)
        model = unflatten(params, m0, include_lambda=include_lambda)
        est = estimate_objective(model)
        wall = time.perf_counter() - t0
        if est >= cfg.kappa * est_prev:
            params, m1, m2, t = (
                checkpoint[0].copy(),
                checkpoint[1].copy(),
                checkpoint[2].copy(),
                checkpoint[3],
            )
            consecutive_bad += 1
            if cfg.decay_on_bad_epoch:
                alpha *= 0.5
            trace.append(epoch, wall, est, "bad-epoch")
            if consecutive_bad >= cfg.max_bad_epochs:
                break
        else:
            checkpoint = (params.copy(), m1.copy(), m2.copy(), t)
            est_prev = est
            consecutive_bad = 0
            trace.append(epoch, wall, est, "estimated")
            if snapshot_callback is not None:
                snapshot_callback(epoch, wall, model.copy())
    return unflatten(params, m0, include_lambda=include_lambda), trace


def model_norm(m: SymKruskal) -> float:
    """Frobenius norm of the model tensor without materializing it."""
    gram = np.ones((m.rank, m.rank))
    for A in m.factor_sequence():
        gram *= A.T @ A
    sq = float(m.weights @ gram @ m.weights)
    return float(np.sqrt(max(sq, 0.0)))


def initialize_model(
    x, partition: ModePartition, r: int, seed: int, scaling: str = "match-norm"
) -> SymKruskal:
    """Gaussian factors with unit weights, rescaled so ||model|| = ||data||."""
    if scaling not in ("match-norm", "none"):
        raise ValueError(f"unknown scaling {scaling!r}")
    dims = x.dims
    if partition.n_modes != len(dims):
        raise ValueError("partition mode count does not match data tensor")
    cell_dims = partition.cell_dims(dims)
    rng = np.random.default_rng(seed)
    factors = [rng.standard_normal((d, r)) for d in cell_dims]
    weights = np.ones(r)
    m = SymKruskal(weights, factors, partition)
    if scaling == "match-norm":
        norm_x = x.norm()
        norm_m = model_norm(m)
        if norm_x == 0.0:
            warnings.warn("data tensor has zero norm; skipping initialization scaling")
        elif norm_m > 0.0:
            scale = (norm_x / norm_m) ** (1.0 / len(dims))
            factors = [scale * A for A in factors]
            m = SymKruskal(weights, factors, partition)
    return m
