"""Dense/sparse matrix kernels used by the whole engine.

Dense matrices are plain row-major numpy 2-D arrays (float32 in normal
training, float64 in oracle mode; see :mod:`kgact.precision`). Sparse
matrices are ``scipy.sparse.csr_matrix`` in canonical form (sorted,
deduplicated column indices).

Accumulation order is part of the kernel contract: every output element of
``spmm``/``spmm_t`` is accumulated in ascending column-index order, which is
what scipy's CSR/CSC multiply routines do for canonical matrices. Tests pin
this bitwise against an explicit ordered oracle so a scipy behaviour change
cannot slip through silently.
"""

import numpy as np
import scipy.sparse as sp


class ShapeMismatchError(ValueError):
    """Operands cannot be combined because their shapes disagree."""


def _require_2d(name, x):
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise TypeError(f"{name} must be a 2-D ndarray, got {type(x).__name__}")


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense matrix product a @ b."""
    _require_2d("a", a)
    _require_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"mm: inner dims differ, a is {a.shape}, b is {b.shape}")
    return a @ b


def spmm(s: sp.csr_matrix, d: np.ndarray) -> np.ndarray:
    """Sparse @ dense, accumulating each row's terms in column-index order."""
    _require_2d("d", d)
    if s.shape[1] != d.shape[0]:
        raise ShapeMismatchError(f"spmm: inner dims differ, s is {s.shape}, d is {d.shape}")
    return s @ d


def spmm_t(s: sp.csr_matrix, d: np.ndarray) -> np.ndarray:
    """transpose(s) @ dense, without materializing the transpose."""
    _require_2d("d", d)
    if s.shape[0] != d.shape[0]:
        raise ShapeMismatchError(f"spmm_t: s is {s.shape} so d needs {s.shape[0]} rows, got {d.shape}")
    return s.T @ d


def densify(s: sp.csr_matrix) -> np.ndarray:
    return s.toarray()


class BitMask:
    """Boolean matrix packed one bit per element (LSB-first, flat layout)."""

    __slots__ = ("packed", "shape")

    def __init__(self, packed: np.ndarray, shape):
        self.packed = packed
        self.shape = tuple(shape)

    @classmethod
    def from_bool(cls, mask: np.ndarray) -> "BitMask":
        return cls(np.packbits(mask.reshape(-1), bitorder="little"), mask.shape)

    def to_bool(self) -> np.ndarray:
        n = int(np.prod(self.shape))
        bits = np.unpackbits(self.packed, count=n, bitorder="little")
        return bits.astype(bool).reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes

    def count(self) -> int:
        """Number of set bits."""
        return int(np.unpackbits(self.packed, bitorder="little").sum())


def relu(x: np.ndarray):
    """max(x, 0) plus the one-bit-per-element mask 1[x > 0].

    Exact zeros get mask bit 0 (subgradient 0 at the kink), so applying the
    mask in the backward pass reproduces the stored predicate verbatim.
    """
    _require_2d("x", x)
    out = np.maximum(x, 0)
    return out, BitMask.from_bool(x > 0)


def make_csr(dense: np.ndarray) -> sp.csr_matrix:
    """Canonical CSR from a dense array (test/demo convenience)."""
    s = sp.csr_matrix(dense)
    s.sum_duplicates()
    s.sort_indices()
    return s


def validate_csr(s: sp.csr_matrix) -> None:
    """Check the structural invariants the kernels rely on."""
    if not sp.isspmatrix_csr(s):
        raise TypeError("expected a scipy csr_matrix")
    rows, cols = s.shape
    indptr, indices = s.indptr, s.indices
    if indptr[0] != 0 or indptr[-1] != s.nnz or len(indptr) != rows + 1:
        raise ValueError("csr: indptr is not a valid offset array")
    if np.any(np.diff(indptr) < 0):
        raise ValueError("csr: indptr must be nondecreasing")
    if s.nnz and (indices.min() < 0 or indices.max() >= cols):
        raise ValueError("csr: column index out of range")
    for r in range(rows):
        row_idx = indices[indptr[r]:indptr[r + 1]]
        if np.any(np.diff(row_idx) <= 0):
            raise ValueError(f"csr: row {r} has unsorted or duplicate column indices")


def csr_nbytes(s: sp.csr_matrix) -> int:
    """Bytes held by the CSR buffers (indptr + indices + values)."""
    return s.indptr.nbytes + s.indices.nbytes + s.data.nbytes
