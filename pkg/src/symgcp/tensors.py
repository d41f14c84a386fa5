"""Dense/sparse tensor containers, mode partitions, and symmetric Kruskal models.

Conventions used throughout the package:

* Dense values are stored so that the flattened order is first-index-fastest
  (Fortran order).  This makes ``vectorize(a1 o ... o aN) = aN kron ... kron a1``,
  which is the ordering all Khatri-Rao based kernels assume.
* All indices in the Python API are 0-based.  The text file formats in
  :mod:`symgcp.io` are 1-based; conversion happens there and only there.
"""

from __future__ import annotations

import string

import numpy as np


class CellDimensionMismatch(ValueError):
    """Modes grouped in one partition cell have unequal sizes."""


class DenseTensor:
    """N-way dense tensor backed by a numpy array (float64, N >= 1)."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim < 1:
            data = data.reshape(1)
        self.data = data
        self._nnz = None

    @classmethod
    def from_values(cls, dims, values):
        """Build from a flat value array in first-index-fastest order."""
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != int(np.prod(dims)):
            raise ValueError(
                f"got {values.size} values for dims {dims} "
                f"(expected {int(np.prod(dims))})"
            )
        return cls(values.reshape(dims, order="F"))

    @property
    def dims(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def nnz(self):
        if self._nnz is None:
            self._nnz = int(np.count_nonzero(self.data))
        return self._nnz

    def norm(self):
        return float(np.linalg.norm(self.data))

    def __getitem__(self, index):
        return self.data[index]

    def __repr__(self):
        return f"DenseTensor(dims={self.dims})"


class WeightTensor(DenseTensor):
    """Entrywise weights; same shape as the data and nonnegative."""

    def __init__(self, data):
        super().__init__(data)
        if np.any(self.data < 0):
            raise ValueError("weight tensor entries must be nonnegative")


class SparseTensor:
    """N-way sparse tensor in coordinate form.

    ``subs`` is an (nnz, N) int array of 0-based multi-indices and ``vals``
    the matching values.  Stored values are nonzero and indices are unique;
    duplicate handling for file input lives in :mod:`symgcp.io`.
    """

    def __init__(self, dims, subs, vals):
        self.dims = tuple(int(d) for d in dims)
        subs = np.asarray(subs, dtype=np.int64).reshape(-1, len(self.dims))
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if subs.shape[0] != vals.size:
            raise ValueError("subs and vals length mismatch")
        if subs.size and (subs.min() < 0 or np.any(subs.max(axis=0) >= self.dims)):
            raise ValueError("sparse index out of range for dims")
        if np.any(vals == 0.0):
            raise ValueError("stored sparse values must be nonzero")
        keys = self._linear_keys(subs)
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate multi-indices in sparse tensor")
        self.subs = subs
        self.vals = vals
        self._key_order = np.argsort(keys)
        self._sorted_keys = keys[self._key_order]

    def _linear_keys(self, subs):
        if subs.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        return np.ravel_multi_index(subs.T, self.dims, order="F").astype(np.int64)

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def nnz(self):
        return self.vals.size

    @property
    def size(self):
        return int(np.prod(self.dims))

    def norm(self):
        return float(np.linalg.norm(self.vals))

    def contains(self, subs):
        """Boolean mask marking which of the given multi-indices are stored."""
        subs = np.asarray(subs, dtype=np.int64).reshape(-1, self.ndim)
        if self.nnz == 0:
            return np.zeros(subs.shape[0], dtype=bool)
        keys = np.ravel_multi_index(subs.T, self.dims, order="F").astype(np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, self._sorted_keys.size - 1)
        return self._sorted_keys[pos] == keys

    def values_at(self, subs):
        """Values at the given multi-indices (0.0 where not stored)."""
        subs = np.asarray(subs, dtype=np.int64).reshape(-1, self.ndim)
        out = np.zeros(subs.shape[0], dtype=np.float64)
        if self.nnz == 0:
            return out
        keys = np.ravel_multi_index(subs.T, self.dims, order="F").astype(np.int64)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos_c = np.minimum(pos, self._sorted_keys.size - 1)
        hit = self._sorted_keys[pos_c] == keys
        out[hit] = self.vals[self._key_order[pos_c[hit]]]
        return out

    def __repr__(self):
        return f"SparseTensor(dims={self.dims}, nnz={self.nnz})"


class ModePartition:
    """Partition of the modes {0..N-1} into K disjoint cells.

    ``sigma[n]`` gives the cell index of mode ``n``.
    """

    def __init__(self, cells):
        cells = tuple(tuple(int(m) for m in cell) for cell in cells)
        if not cells or any(len(c) == 0 for c in cells):
            raise ValueError("partition cells must be nonempty")
        flat = [m for cell in cells for m in cell]
        n = len(flat)
        seen = set()
        for m in flat:
            if m in seen:
                raise ValueError(f"mode {m} appears in more than one cell")
            seen.add(m)
        if seen != set(range(n)):
            missing = sorted(set(range(n)) - seen)
            raise ValueError(f"partition does not cover all modes; missing {missing}")
        self.cells = tuple(tuple(sorted(c)) for c in cells)
        sigma = np.empty(n, dtype=np.int64)
        for k, cell in enumerate(self.cells):
            for m in cell:
                sigma[m] = k
        self.sigma = sigma

    @classmethod
    def singletons(cls, n):
        return cls([(m,) for m in range(n)])

    @classmethod
    def single_cell(cls, n):
        return cls([tuple(range(n))])

    @property
    def n_modes(self):
        return self.sigma.size

    @property
    def n_cells(self):
        return len(self.cells)

    def cell_dims(self, dims):
        """Shared mode size per cell; raises if sizes within a cell differ."""
        out = []
        for cell in self.cells:
            sizes = {dims[m] for m in cell}
            if len(sizes) != 1:
                raise CellDimensionMismatch(
                    f"cell {cell} spans modes of unequal sizes {sorted(sizes)}"
                )
            out.append(sizes.pop())
        return tuple(out)

    def __repr__(self):
        return f"ModePartition({list(map(list, self.cells))})"


class SymKruskal:
    """Weighted sum of symmetric rank-1 components.

    One factor matrix per partition cell; mode ``n`` uses factor
    ``factors[partition.sigma[n]]``.  All factors share the column count
    ``rank`` and ``weights`` has one entry per column.
    """

    def __init__(self, weights, factors, partition):
        self.weights = np.asarray(weights, dtype=np.float64).ravel()
        self.factors = [np.asarray(f, dtype=np.float64) for f in factors]
        self.partition = partition
        if len(self.factors) != partition.n_cells:
            raise ValueError("one factor matrix required per partition cell")
        ranks = {f.shape[1] for f in self.factors}
        if len(ranks) != 1:
            raise ValueError(f"factors disagree on column count: {sorted(ranks)}")
        if self.weights.size != ranks.pop():
            raise ValueError("weight vector length must equal factor column count")

    @property
    def rank(self):
        return self.weights.size

    @property
    def ndim(self):
        return self.partition.n_modes

    @property
    def dims(self):
        return tuple(
            self.factors[self.partition.sigma[n]].shape[0] for n in range(self.ndim)
        )

    def factor_sequence(self):
        """Per-mode view [A_sigma(0), ..., A_sigma(N-1)] of the cell factors."""
        return [self.factors[self.partition.sigma[n]] for n in range(self.ndim)]

    def copy(self):
        return SymKruskal(
            self.weights.copy(), [f.copy() for f in self.factors], self.partition
        )

    def __repr__(self):
        return (
            f"SymKruskal(rank={self.rank}, dims={self.dims}, "
            f"partition={list(map(list, self.partition.cells))})"
        )


def vectorize(t: DenseTensor) -> np.ndarray:
    """Flatten in first-index-fastest order."""
    return t.data.flatten(order="F")


def matricize(t: DenseTensor, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding: I_mode x prod(other dims).

    Columns are the mode fibers, enumerated with the smallest remaining
    mode index varying fastest (the order the Khatri-Rao kernels assume).
    """
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for {t.ndim}-way tensor")
    moved = np.moveaxis(t.data, mode, 0)
    return moved.reshape(t.dims[mode], -1, order="F")


def permute_modes(t: DenseTensor, pi) -> DenseTensor:
    """Reorder modes so that output entry pi(i) equals input entry i."""
    pi = [int(p) for p in pi]
    if sorted(pi) != list(range(t.ndim)):
        raise ValueError(f"invalid permutation {pi} for {t.ndim}-way tensor")
    return DenseTensor(np.transpose(t.data, axes=pi))


def is_symmetric(t: DenseTensor, partition: ModePartition, tol: float = 1e-12) -> bool:
    """True iff ``t`` is unchanged by all mode permutations within cells.

    Only adjacent transpositions inside each cell are checked; they generate
    the full permutation group of the cell.  Raises
    :class:`CellDimensionMismatch` when the cell mode sizes disagree.
    """
    if partition.n_modes != t.ndim:
        raise ValueError("partition mode count does not match tensor")
    partition.cell_dims(t.dims)
    for cell in partition.cells:
        for a, b in zip(cell, cell[1:]):
            swapped = np.swapaxes(t.data, a, b)
            if np.max(np.abs(swapped - t.data)) > tol:
                return False
    return True


_EINSUM_LETTERS = string.ascii_lowercase


def reconstruct(m: SymKruskal) -> DenseTensor:
    """Materialize the full model tensor."""
    mats = m.factor_sequence()
    n = len(mats)
    if n > len(_EINSUM_LETTERS) - 1:
        raise ValueError("too many modes for einsum reconstruction")
    subs = ",".join("z" + _EINSUM_LETTERS[i] for i in range(n))
    out = _EINSUM_LETTERS[:n]
    data = np.einsum(
        f"z,{subs}->{out}", m.weights, *(A.T for A in mats), optimize=True
    )
    return DenseTensor(data)


def model_entries(m: SymKruskal, subs) -> np.ndarray:
    """Model values at an (s, N) array of multi-indices, without materializing."""
    subs = np.asarray(subs, dtype=np.int64).reshape(-1, m.ndim)
    dims = m.dims
    if subs.size and (subs.min() < 0 or np.any(subs.max(axis=0) >= dims)):
        raise IndexError("multi-index out of range")
    prod = np.ones((subs.shape[0], m.rank), dtype=np.float64)
    for n, A in enumerate(m.factor_sequence()):
        prod *= A[subs[:, n], :]
    return prod @ m.weights


def model_entry(m: SymKruskal, index) -> float:
    """Single model entry; equals ``reconstruct(m)`` at ``index``."""
    return float(model_entries(m, np.asarray(index).reshape(1, -1))[0])


def densify(s: SparseTensor) -> DenseTensor:
    data = np.zeros(s.dims, dtype=np.float64)
    if s.nnz:
        data[tuple(s.subs.T)] = s.vals
    return DenseTensor(data)


def sparsify(d: DenseTensor, threshold: float = 0.0) -> SparseTensor:
    """Keep entries with |value| > threshold."""
    mask = np.abs(d.data) > threshold
    subs = np.argwhere(mask)
    vals = d.data[mask]
    return SparseTensor(d.dims, subs, vals)
