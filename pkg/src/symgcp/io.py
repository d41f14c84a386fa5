"""Text formats for tensors, factor matrices, weights, and fit traces.

Tensor files are 1-based and follow the coordinate-list convention:

    # optional comments
    dims: 50 50 50 50
    1 1 2 14  1.0
    ...

Dense files use the same header followed by all values in first-index-fastest
order, one or more per line.  Factor matrices and weight vectors are plain
CSV with no header; traces are CSV with a header row.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np

from .optimize import FitTrace
from .tensors import DenseTensor, SparseTensor


class FormatError(ValueError):
    """Malformed tensor or CSV file; message carries file and line."""


def _parse_header(lines, path):
    for lineno, raw in lines:
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if not text.startswith("dims:"):
            raise FormatError(f"{path}:{lineno}: expected 'dims: I1 I2 ...' header")
        try:
            dims = tuple(int(tok) for tok in text[len("dims:"):].split())
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer dimension") from None
        if not dims or any(d < 1 for d in dims):
            raise FormatError(f"{path}:{lineno}: dimensions must be positive")
        return dims
    raise FormatError(f"{path}: missing 'dims:' header")


def read_sparse(path) -> SparseTensor:
    """Read a 1-based coordinate-list tensor; duplicate indices are summed."""
    path = Path(path)
    lines = list(enumerate(path.read_text().splitlines(), start=1))
    it = iter(lines)
    dims = _parse_header(it, path)
    n = len(dims)
    subs, vals = [], []
    for lineno, raw in it:
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        toks = text.split()
        if len(toks) != n + 1:
            raise FormatError(
                f"{path}:{lineno}: expected {n} indices and a value, got {len(toks)} fields"
            )
        try:
            idx = [int(t) for t in toks[:n]]
            val = float(toks[n])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed entry") from None
        for mode, (i, d) in enumerate(zip(idx, dims)):
            if not 1 <= i <= d:
                raise FormatError(
                    f"{path}:{lineno}: index {i} out of range 1..{d} in mode {mode + 1}"
                )
        subs.append([i - 1 for i in idx])
        vals.append(val)
    subs = np.asarray(subs, dtype=np.int64).reshape(-1, n)
    vals = np.asarray(vals, dtype=np.float64)
    if subs.shape[0]:
        keys = np.ravel_multi_index(subs.T, dims, order="F")
        uniq, inverse = np.unique(keys, return_inverse=True)
        if uniq.size != keys.size:
            warnings.warn(f"{path}: duplicate indices summed ({keys.size - uniq.size} collisions)")
            summed = np.bincount(inverse, weights=vals, minlength=uniq.size)
            subs = np.column_stack(np.unravel_index(uniq, dims, order="F")).astype(np.int64)
            vals = summed
        keep = vals != 0.0
        subs, vals = subs[keep], vals[keep]
    return SparseTensor(dims, subs, vals)


def write_sparse(path, t: SparseTensor):
    path = Path(path)
    with path.open("w") as fh:
        fh.write("dims: " + " ".join(str(d) for d in t.dims) + "\n")
        for idx, val in zip(t.subs, t.vals):
            fh.write(" ".join(str(i + 1) for i in idx) + f" {float(val)!r}\n")


def read_dense(path) -> DenseTensor:
    path = Path(path)
    lines = list(enumerate(path.read_text().splitlines(), start=1))
    it = iter(lines)
    dims = _parse_header(it, path)
    vals = []
    for lineno, raw in it:
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            vals.extend(float(t) for t in text.split())
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed value") from None
    expected = int(np.prod(dims))
    if len(vals) != expected:
        raise FormatError(f"{path}: expected {expected} values, found {len(vals)}")
    return DenseTensor.from_values(dims, np.asarray(vals))


def write_dense(path, t: DenseTensor, per_line: int = 8):
    path = Path(path)
    flat = t.data.flatten(order="F")
    with path.open("w") as fh:
        fh.write("dims: " + " ".join(str(d) for d in t.dims) + "\n")
        for start in range(0, flat.size, per_line):
            fh.write(" ".join(repr(float(v)) for v in flat[start : start + per_line]) + "\n")


def read_tensor(path, fmt: str):
    if fmt == "sparse":
        return read_sparse(path)
    if fmt == "dense":
        return read_dense(path)
    raise ValueError(f"unknown tensor format {fmt!r} (use 'sparse' or 'dense')")


def write_matrix_csv(path, mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    out = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return out


def write_vector_csv(path, vec):
    np.savetxt(path, np.asarray(vec, dtype=np.float64).ravel(), fmt="%.17g")


def read_vector_csv(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=1)


TRACE_COLUMNS = ("epoch_or_iter", "wall_seconds", "objective", "kind")


def write_trace_csv(path, trace: FitTrace):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace.records:
            writer.writerow([rec.step, repr(rec.wall_seconds), repr(rec.objective), rec.kind])


def read_trace_csv(path) -> FitTrace:
    trace = FitTrace()
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise FormatError(f"{path}: bad trace header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                trace.append(int(row[0]), float(row[1]), float(row[2]), row[3])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return trace
