"""Shared oracles for gradient and model tests."""

import numpy as np

from symgcp.objective import flatten, flatten_gradient, objective_value, unflatten
from symgcp.tensors import DenseTensor, ModePartition, SymKruskal


def finite_difference_gradient(cfg, x, m, step=1e-6):
    """Central finite differences of the objective in every coordinate."""
    theta = flatten(m, include_lambda=True)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += step
        dn[i] -= step
        fd[i] = (
            objective_value(cfg, x, unflatten(up, m))
            - objective_value(cfg, x, unflatten(dn, m))
        ) / (2 * step)
    return fd


def max_scaled_gradient_error(bundle, fd):
    """max_i |g_i - fd_i| / max(1, |g_i|, |fd_i|)."""
    g = flatten_gradient(bundle, include_lambda=True)
    return float(np.max(np.abs(g - fd) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))))


def random_partition(rng, n_modes):
    """Random partition of n_modes modes (contiguous cells, shuffled mode labels)."""
    modes = list(rng.permutation(n_modes))
    cells = []
    while modes:
        take = int(rng.integers(1, len(modes) + 1))
        cells.append(tuple(modes[:take]))
        modes = modes[take:]
    return ModePartition(cells)


def random_instance(rng, n_modes, partition, loss_name, rank=2, size=3):
    """(x, model) pair with dims/values valid for the loss domain."""
    part = partition
    cell_dims = []
    for _ in part.cells:
        cell_dims.append(size)
    dims = [cell_dims[part.sigma[n]] for n in range(n_modes)]
    if loss_name in ("bernoulli-odds", "poisson"):
        factors = [rng.uniform(0.3, 1.2, size=(d, rank)) for d in cell_dims]
        weights = rng.uniform(0.5, 1.5, size=rank)
    else:
        factors = [rng.standard_normal((d, rank)) for d in cell_dims]
        weights = rng.standard_normal(rank)
    m = SymKruskal(weights, factors, part)
    if loss_name == "bernoulli-odds":
        x = DenseTensor((rng.random(dims) < 0.5).astype(float))
    elif loss_name == "poisson":
        x = DenseTensor(rng.integers(0, 4, size=dims).astype(float))
    else:
        x = DenseTensor(rng.standard_normal(dims))
    return x, m
