"""Matrix Market coordinate-format reader and writer for :class:`SparseMat`."""

from __future__ import annotations

import os
from typing import TextIO

import numpy as np

from .sparse_core import SparseMat

__all__ = ["MatrixMarketError", "read_matrix_market", "write_matrix_market"]


class MatrixMarketError(ValueError):
    """Malformed input; ``line`` is the 1-based line number of the problem."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


_FIELDS = {"real", "integer", "pattern", "double"}
_SYMMETRIES = {"general", "symmetric"}


def _parse(stream: TextIO) -> SparseMat:
    header = stream.readline()
    lineno = 1
    tokens = header.strip().split()
    if len(tokens) != 5 or tokens[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("expected '%%MatrixMarket matrix coordinate <field> <symmetry>'", lineno)
    obj, fmt, fld, sym = (t.lower() for t in tokens[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"only 'matrix coordinate' is supported, got '{obj} {fmt}'", lineno)
    if fld not in _FIELDS:
        raise MatrixMarketError(f"unsupported field '{fld}'", lineno)
    if sym not in _SYMMETRIES:
        raise MatrixMarketError(f"unsupported symmetry '{sym}'", lineno)

    size_line = None
    for line in stream:
        lineno += 1
        s = line.strip()
        if s and not s.startswith("%"):
            size_line = s
            break
    if size_line is None:
        raise MatrixMarketError("missing size line", lineno)
    try:
        rows, cols, nnz = (int(t) for t in size_line.split())
    except ValueError:
        raise MatrixMarketError(f"size line must hold three integers, got '{size_line}'", lineno) from None
    if rows < 0 or cols < 0 or nnz < 0:
        raise MatrixMarketError("negative dimension", lineno)
    if sym == "symmetric" and rows != cols:
        raise MatrixMarketError("symmetric matrix must be square", lineno)

    I = np.empty(nnz, dtype=np.int64)
    J = np.empty(nnz, dtype=np.int64)
    X = np.ones(nnz, dtype=np.float64)
    want = 2 if fld == "pattern" else 3
    k = 0
    for line in stream:
        lineno += 1
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        if k >= nnz:
            raise MatrixMarketError(f"more than the declared {nnz} entries", lineno)
        parts = s.split()
        if len(parts) != want:
            raise MatrixMarketError(f"expected {want} fields, got {len(parts)}", lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
            if want == 3:
                X[k] = float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"cannot parse entry '{s}'", lineno) from None
        if not (1 <= i <= rows and 1 <= j <= cols):
            raise MatrixMarketError(f"index ({i}, {j}) outside {rows}x{cols}", lineno)
        if sym == "symmetric" and j > i:
            raise MatrixMarketError("symmetric files store the lower triangle only", lineno)
        I[k], J[k] = i - 1, j - 1
        k += 1
    if k != nnz:
        raise MatrixMarketError(f"declared {nnz} entries but found {k}", lineno)

    if sym == "symmetric":
        off = I != J
        I, J, X = np.concatenate([I, J[off]]), np.concatenate([J, I[off]]), np.concatenate([X, X[off]])
    return SparseMat.from_triplets(rows, cols, I, J, X, symmetric=(sym == "symmetric"))


def read_matrix_market(source: str | os.PathLike | TextIO) -> SparseMat:
    if hasattr(source, "read"):
        return _parse(source)
    with open(source, "r", encoding="ascii") as fh:
        return _parse(fh)


def write_matrix_market(A: SparseMat, target: str | os.PathLike | TextIO, symmetric: bool | None = None) -> None:
    """Write ``A``; symmetric matrices store only their lower triangle."""
    if symmetric is None:
        symmetric = A.symmetric and A.is_symmetric()
    coo = A.csr.tocoo()
    i, j, v = coo.row, coo.col, coo.data
    if symmetric:
        keep = j <= i
        i, j, v = i[keep], j[keep], v[keep]
    order = np.lexsort((i, j))
    lines = [
        f"%%MatrixMarket matrix coordinate real {'symmetric' if symmetric else 'general'}",
        f"{A.rows} {A.cols} {i.size}",
    ]
    lines.extend(f"{a + 1} {b + 1} {x:.17g}" for a, b, x in zip(i[order], j[order], v[order]))
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", encoding="ascii") as fh:
            fh.write(text)
