"""Synthetic fully symmetric binary tensors and permutation-matched scoring.

The generator builds one n x r factor matrix whose first r-1 columns carry
sparse Gaussian signal and whose last column is a constant noise floor.  The
implied model entries are odds: entry i of the data tensor is set to one with
probability m_i / (1 + m_i).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensors import ModePartition, SparseTensor, SymKruskal, reconstruct


@dataclass
class BinaryGenConfig:
    n_modes: int = 4
    n: int = 50
    rank: int = 5
    delta: float = 0.15  # fraction of nonzero rows per signal column
    rho_high: float = 0.9  # one-probability where all modes hit signal support
    rho_low: float = 0.002  # background one-probability
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not 0 < self.rho_low < self.rho_high < 1:
            raise ValueError("need 0 < rho_low < rho_high < 1")
        if self.rank < 2:
            raise ValueError("rank must be >= 2 (r-1 signal columns + 1 noise column)")


@dataclass
class GroundTruth:
    a_star: np.ndarray  # n x r true factor matrix
    model: SymKruskal  # weights 1, single cell over all modes
    x: SparseTensor  # generated binary tensor
    n_clamped: int  # entries with negative model odds clamped to 0 before drawing


def odds_root(rho: float, n_modes: int) -> float:
    """Per-mode factor value whose n_modes-fold product has odds rho/(1-rho)."""
    return (rho / (1.0 - rho)) ** (1.0 / n_modes)


def generate_binary(cfg: BinaryGenConfig) -> GroundTruth:
    """Draw the true factor matrix and one Bernoulli data tensor from it."""
    rng = np.random.default_rng(cfg.seed)
    a = np.zeros((cfg.n, cfg.rank))
    n_signal = int(np.floor(cfg.delta * cfg.n + 0.5))  # round half up
    mean_high = odds_root(cfg.rho_high, cfg.n_modes)
    for j in range(cfg.rank - 1):
        support = rng.choice(cfg.n, size=n_signal, replace=False)
        a[support, j] = rng.normal(mean_high, 0.5, size=n_signal)
    a[:, cfg.rank - 1] = odds_root(cfg.rho_low, cfg.n_modes)
    part = ModePartition.single_cell(cfg.n_modes)
    model = SymKruskal(np.ones(cfg.rank), [a], part)
    odds = reconstruct(model).data
    negative = odds < 0.0
    n_clamped = int(np.count_nonzero(negative))
    if n_clamped:
        odds = np.where(negative, 0.0, odds)
    prob = odds / (1.0 + odds)
    ones = rng.random(odds.shape) < prob
    subs = np.argwhere(ones)
    x = SparseTensor(odds.shape, subs, np.ones(subs.shape[0]))
    return GroundTruth(a, model, x, n_clamped)


def _cosine_matrix(a_ref: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    """C[i, j] = cosine(ref column i, hat column j); zero columns score 0."""
    if a_ref.shape != a_hat.shape:
        raise ValueError(f"shape mismatch: {a_ref.shape} vs {a_hat.shape}")
    ref_norms = np.linalg.norm(a_ref, axis=0)
    hat_norms = np.linalg.norm(a_hat, axis=0)
    denom = np.outer(ref_norms, hat_norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (a_ref.T @ a_hat) / denom
    return np.where(denom == 0.0, 0.0, c)


def _best_permutation_bruteforce(c):
    r = c.shape[0]
    best, best_pi = -np.inf, None
    for pi in itertools.permutations(range(r)):
        s = sum(c[i, pi[i]] for i in range(r))
        if s > best:
            best, best_pi = s, pi
    return best / r, np.array(best_pi)


def _best_permutation_assignment(c):
    rows, cols = linear_sum_assignment(-c)
    pi = np.empty(c.shape[0], dtype=np.int64)
    pi[rows] = cols
    return float(c[rows, cols].sum()) / c.shape[0], pi


def match_columns(a_ref: np.ndarray, a_hat: np.ndarray):
    """(score, permutation): permutation pi maximizes mean cos(ref_j, hat_pi(j))."""
    c = _cosine_matrix(a_ref, a_hat)
    if c.shape[0] <= 8:
        return _best_permutation_bruteforce(c)
    return _best_permutation_assignment(c)


def cosine_score(a_ref: np.ndarray, a_hat: np.ndarray) -> float:
    """Permutation-maximized mean column cosine, in [-1, 1]."""
    return float(match_columns(a_ref, a_hat)[0])


def negate_fix(a_hat: np.ndarray, lam: np.ndarray, a_ref: np.ndarray, multiplicity: int):
    """Flip recovered column signs toward the reference before scoring.

    Columns are matched on absolute cosine; a matched column with negative
    cosine is negated, with the sign pushed into the weight when the cell
    multiplicity is odd so the reconstruction never changes.
    """
    c = _cosine_matrix(a_ref, a_hat)
    if c.shape[0] <= 8:
        _, pi = _best_permutation_bruteforce(np.abs(c))
    else:
        _, pi = _best_permutation_assignment(np.abs(c))
    a_out = a_hat.copy()
    lam_out = np.asarray(lam, dtype=np.float64).copy()
    for i, j in enumerate(pi):
        if c[i, j] < 0.0:
            a_out[:, j] = -a_out[:, j]
            if multiplicity % 2 == 1:
                lam_out[j] = -lam_out[j]
    return a_out, lam_out


def empirical_one_rate(x: SparseTensor, subs) -> float:
    """Fraction of ones among the given indices of a binary tensor."""
    subs = np.asarray(subs, dtype=np.int64)
    if subs.shape[0] == 0:
        warnings.warn("empirical_one_rate over an empty index set")
        return float("nan")
    return float(np.mean(x.values_at(subs) != 0.0))
