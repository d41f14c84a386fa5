"""Computational kernels: Khatri-Rao products and dense/sparse MTTKRP.

A "factor sequence" is the per-mode list ``[A_sigma(0), ..., A_sigma(N-1)]``
obtained from :meth:`symgcp.tensors.SymKruskal.factor_sequence`; all matrices
share the column count r.

The Khatri-Rao convention is fixed library-wide: the product runs over modes
in descending order (last mode outermost), so row q of the result corresponds
to the multi-index with the smallest mode varying fastest.  This matches the
first-index-fastest vectorization and the matricize() column order.
"""

from __future__ import annotations

import string

import numpy as np

from .tensors import DenseTensor, SparseTensor


def _check_columns(mats):
    cols = {A.shape[1] for A in mats}
    if len(cols) != 1:
        raise ValueError(f"matrices disagree on column count: {sorted(cols)}")
    return cols.pop()


def khatri_rao(mats, skip: int | None = None) -> np.ndarray:
    """Column-wise Kronecker product of the per-mode matrices.

    ``mats`` is ordered by mode; column j of the output is the Kronecker
    product of column j of each matrix in descending mode order.  ``skip``
    omits that mode (the MTTKRP companion form).
    """
    if skip is not None:
        mats = [A for n, A in enumerate(mats) if n != skip]
    if not mats:
        raise ValueError("khatri_rao needs at least one matrix")
    r = _check_columns(mats)
    out = np.asarray(mats[0], dtype=np.float64)
    for A in mats[1:]:
        # new mode varies slowest: row (i_new * rows(out) + p)
        out = (A[:, None, :] * out[None, :, :]).reshape(-1, r)
    return out


def mttkrp_dense(y: DenseTensor, mats, mode: int) -> np.ndarray:
    """Matricized-tensor times Khatri-Rao product along ``mode``.

    Equals ``matricize(y, mode) @ khatri_rao(mats, skip=mode)`` but contracts
    the tensor against the factors directly (no matricization, no Khatri-Rao
    materialization).
    """
    n = y.ndim
    if not 0 <= mode < n:
        raise ValueError(f"mode {mode} out of range for {n}-way tensor")
    if len(mats) != n:
        raise ValueError("need one factor matrix per mode")
    for j, A in enumerate(mats):
        if j != mode and A.shape[0] != y.dims[j]:
            raise ValueError(
                f"factor for mode {j} has {A.shape[0]} rows, expected {y.dims[j]}"
            )
    _check_columns(mats)
    letters = string.ascii_lowercase
    t_sub = letters[:n]
    operands = []
    subs = []
    for j in range(n):
        if j == mode:
            continue
        operands.append(np.asarray(mats[j], dtype=np.float64))
        subs.append(letters[j] + "z")
    expr = f"{t_sub},{','.join(subs)}->{letters[mode]}z"
    return np.einsum(expr, y.data, *operands, optimize=True)


def mttkrp_coo(dims, subs, vals, mats, mode: int) -> np.ndarray:
    """MTTKRP over coordinate data: accumulate row Hadamard products.

    ``subs`` is (nnz, N), ``vals`` (nnz,).  Cost O(r * nnz).  Zero values are
    allowed (unlike SparseTensor storage), which the sampled-derivative path
    relies on.
    """
    n = len(dims)
    if not 0 <= mode < n:
        raise ValueError(f"mode {mode} out of range for {n}-way tensor")
    if len(mats) != n:
        raise ValueError("need one factor matrix per mode")
    r = _check_columns(mats)
    out = np.zeros((dims[mode], r), dtype=np.float64)
    if len(vals) == 0:
        return out
    z = np.repeat(np.asarray(vals, dtype=np.float64)[:, None], r, axis=1)
    for j in range(n):
        if j != mode:
            z *= mats[j][subs[:, j], :]
    rows = subs[:, mode]
    for c in range(r):
        out[:, c] = np.bincount(rows, weights=z[:, c], minlength=dims[mode])
    return out


def mttkrp_sparse(y: SparseTensor, mats, mode: int) -> np.ndarray:
    """Sparse MTTKRP; identical result to the dense kernel on densify(y)."""
    return mttkrp_coo(y.dims, y.subs, y.vals, mats, mode)


def sampled_rows(mat: np.ndarray, rows) -> np.ndarray:
    """Gather rows of ``mat`` (with repetition) into an (s, r) matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= mat.shape[0]):
        raise IndexError("row index out of range")
    return np.asarray(mat, dtype=np.float64)[rows, :]
