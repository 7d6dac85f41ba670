"""Tensor-train vectors and operators.

A :class:`TTVector` stores cores of shape ``(r_{k-1}, n_k, r_k)`` and a
:class:`TTOperator` cores of shape ``(r_{k-1}, m_k, n_k, r_k)``, with
``r_0 = r_d = 1``. Flattening follows C order, so the first mode varies
slowest and ``kron(A1, A2)`` corresponds to a two-core operator.

Arithmetic (:func:`tt_axpby`, :func:`tt_apply`) is exact and lets ranks
grow; call :func:`tt_round` afterwards.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy import linalg as sla

from .errors import ShapeMismatchError, SizeCapError

DENSE_CAP = 2 ** 24

_MAGIC = b"TTS1"


def _svd(mat):
    """SVD with the largest-magnitude entry of each left vector made positive."""
    try:
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError:
        u, s, vt = sla.svd(mat, full_matrices=False, lapack_driver="gesvd")
    if u.size:
        idx = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[idx, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return u, s, vt


def _truncation_rank(s, delta, rmax=None):
    """Smallest rank whose discarded tail has norm <= delta."""
    if s.size == 0:
        return 0
    tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]  # tail[k] = ||s[k:]||
    keep = int(np.count_nonzero(tail > delta))
    if rmax is not None:
        keep = min(keep, int(rmax))
    return keep


class TTVector:
    """Tensor in TT format; element ``(j_1..j_d)`` is ``G1[:, j1, :] @ ... @ Gd[:, jd, :]``."""

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = [np.asarray(c, dtype=float) for c in cores]
        if not cores:
            raise ShapeMismatchError("a TT needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise ShapeMismatchError(f"core {k} has {c.ndim} dims, expected 3")
            if k and c.shape[0] != cores[k - 1].shape[2]:
                raise ShapeMismatchError(f"rank mismatch between cores {k - 1} and {k}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ShapeMismatchError("boundary ranks must be 1")
        self.cores = cores

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def element(self, index) -> float:
        v = np.ones((1, 1))
        for c, j in zip(self.cores, index):
            v = v @ c[:, j, :]
        return float(v[0, 0])

    def full(self, cap: int = DENSE_CAP) -> np.ndarray:
        return tt_to_dense(self, cap)

    def copy(self) -> "TTVector":
        return TTVector([c.copy() for c in self.cores])

    def __add__(self, other):
        return tt_axpby(1.0, self, 1.0, other)

    def __sub__(self, other):
        return tt_axpby(1.0, self, -1.0, other)

    def __mul__(self, a):
        cores = [c.copy() for c in self.cores]
        cores[0] *= float(a)
        return TTVector(cores)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        return f"TTVector(shape={self.shape}, ranks={self.ranks})"


class TTOperator:
    """Linear operator in TT format, cores ``(r_{k-1}, m_k, n_k, r_k)`` (row mode first)."""

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = [np.asarray(c, dtype=float) for c in cores]
        for k, c in enumerate(cores):
            if c.ndim != 4:
                raise ShapeMismatchError(f"operator core {k} has {c.ndim} dims, expected 4")
            if k and c.shape[0] != cores[k - 1].shape[3]:
                raise ShapeMismatchError(f"rank mismatch between cores {k - 1} and {k}")
        if cores[0].shape[0] != 1 or cores[-1].shape[3] != 1:
            raise ShapeMismatchError("boundary ranks must be 1")
        self.cores = cores

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def row_shape(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def col_shape(self) -> tuple:
        return tuple(c.shape[2] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        return (1,) + tuple(c.shape[3] for c in self.cores)

    @property
    def T(self) -> "TTOperator":
        return TTOperator([c.transpose(0, 2, 1, 3) for c in self.cores])

    def full(self, cap: int = DENSE_CAP) -> np.ndarray:
        m, n = int(np.prod(self.row_shape)), int(np.prod(self.col_shape))
        if m * n > cap:
            raise SizeCapError(f"dense operator would have {m * n} entries (cap {cap})")
        out = np.ones((1, 1, 1))
        for c in self.cores:
            r0, mk, nk, r1 = c.shape
            out = np.einsum("MNa,amnb->MmNnb", out, c)
            out = out.reshape(out.shape[0] * mk, out.shape[2] * nk, r1)
        return out[:, :, 0]

    def as_vector(self) -> TTVector:
        return TTVector([c.reshape(c.shape[0], -1, c.shape[3]) for c in self.cores])

    @classmethod
    def from_vector(cls, v: TTVector, row_shape, col_shape) -> "TTOperator":
        return cls([c.reshape(c.shape[0], m, n, c.shape[2])
                    for c, m, n in zip(v.cores, row_shape, col_shape)])

    def __add__(self, other):
        return TTOperator.from_vector(
            tt_axpby(1.0, self.as_vector(), 1.0, other.as_vector()),
            self.row_shape, self.col_shape)

    def __mul__(self, a):
        cores = [c.copy() for c in self.cores]
        cores[0] *= float(a)
        return TTOperator(cores)

    __rmul__ = __mul__

    def __matmul__(self, x):
        return tt_apply(self, x)

    def __repr__(self):
        return f"TTOperator(rows={self.row_shape}, cols={self.col_shape}, ranks={self.ranks})"


def tt_to_dense(x: TTVector, cap: int = DENSE_CAP) -> np.ndarray:
    if x.size > cap:
        raise SizeCapError(f"dense tensor would have {x.size} entries (cap {cap})")
    out = np.ones((1, 1))
    for c in x.cores:
        out = (out @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[2])
    return out.reshape(x.shape)


def dense_to_tt(a: np.ndarray, eps: float = 1e-14, rmax: int | None = None) -> TTVector:
    """TT-SVD with relative Frobenius error at most ``eps``."""
    a = np.asarray(a, dtype=float)
    shape = a.shape
    d = len(shape)
    nrm = np.linalg.norm(a)
    if nrm == 0.0:
        return tt_zeros(shape)
    if d == 1:
        return TTVector([a.reshape(1, -1, 1).copy()])
    delta = eps * nrm / np.sqrt(d - 1)
    cores = []
    rest = a.reshape(1, -1)
    r = 1
    for k in range(d - 1):
        mat = rest.reshape(r * shape[k], -1)
        u, s, vt = _svd(mat)
        rk = max(_truncation_rank(s, delta, rmax), 1)
        cores.append(u[:, :rk].reshape(r, shape[k], rk))
        rest = s[:rk, None] * vt[:rk]
        r = rk
    cores.append(rest.reshape(r, shape[-1], 1))
    return TTVector(cores)


def tt_zeros(shape) -> TTVector:
    return TTVector([np.zeros((1, n, 1)) for n in shape])


def tt_rank1(vectors: Iterable[np.ndarray]) -> TTVector:
    return TTVector([np.asarray(v, dtype=float).reshape(1, -1, 1) for v in vectors])


def tt_identity(shape) -> TTOperator:
    return TTOperator([np.eye(n).reshape(1, n, n, 1) for n in shape])


def tt_kron_operator(factors: Sequence[np.ndarray]) -> TTOperator:
    """Rank-one operator ``kron(A_1, ..., A_d)``."""
    return TTOperator([np.asarray(f, dtype=float)[None, :, :, None] for f in factors])


def tt_diag(v: TTVector) -> TTOperator:
    """Diagonal operator whose diagonal is the tensor ``v``."""
    cores = []
    for c in v.cores:
        r0, n, r1 = c.shape
        op = np.zeros((r0, n, n, r1))
        op[:, np.arange(n), np.arange(n), :] = c
        cores.append(op)
    return TTOperator(cores)


def tt_from_kron_sum(terms: Sequence[Sequence[np.ndarray]], eps: float | None = 1e-14) -> TTOperator:
    """Operator ``sum_r kron(A_r^(1), ..., A_r^(d))`` in TT form.

    The exact representation has ranks equal to the number of terms; it is
    rounded to relative accuracy ``eps`` unless ``eps`` is None.
    """
    terms = [[np.asarray(f, dtype=float) for f in t] for t in terms]
    if not terms:
        raise ShapeMismatchError("empty Kronecker sum")
    d = len(terms[0])
    shapes = [f.shape for f in terms[0]]
    for t in terms:
        if len(t) != d or [f.shape for f in t] != shapes:
            raise ShapeMismatchError("inconsistent Kronecker factor sizes")
    R = len(terms)
    if d == 1:
        op = TTOperator([sum(t[0] for t in terms)[None, :, :, None]])
        return op
    cores = []
    for k in range(d):
        m, n = shapes[k]
        if k == 0:
            c = np.zeros((1, m, n, R))
            for r, t in enumerate(terms):
                c[0, :, :, r] = t[0]
        elif k == d - 1:
            c = np.zeros((R, m, n, 1))
            for r, t in enumerate(terms):
                c[r, :, :, 0] = t[k]
        else:
            c = np.zeros((R, m, n, R))
            for r, t in enumerate(terms):
                c[r, :, :, r] = t[k]
        cores.append(c)
    op = TTOperator(cores)
    if eps is not None:
        op = tt_round_operator(op, eps)
    return op


def orthogonalize_right(x: TTVector) -> TTVector:
    """Cores 2..d become right-orthonormal; the norm lives in core 1."""
    cores = [c.copy() for c in x.cores]
    for k in range(len(cores) - 1, 0, -1):
        r0, n, r1 = cores[k].shape
        q, r = np.linalg.qr(cores[k].reshape(r0, n * r1).T)
        cores[k] = q.T.reshape(-1, n, r1)
        cores[k - 1] = np.einsum("anb,cb->anc", cores[k - 1], r)
    return TTVector(cores)


def orthogonalize_left(x: TTVector) -> TTVector:
    """Cores 1..d-1 become left-orthonormal; the norm lives in core d."""
    cores = [c.copy() for c in x.cores]
    for k in range(len(cores) - 1):
        r0, n, r1 = cores[k].shape
        q, r = np.linalg.qr(cores[k].reshape(r0 * n, r1))
        cores[k] = q.reshape(r0, n, -1)
        cores[k + 1] = np.einsum("ab,bnc->anc", r, cores[k + 1])
    return TTVector(cores)


def tt_round(x: TTVector, eps: float = 1e-14, rmax: int | None = None) -> TTVector:
    """Recompress to relative accuracy ``eps`` (per-site budget eps/sqrt(d-1))."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    d = x.d
    y = orthogonalize_right(x)
    nrm = np.linalg.norm(y.cores[0])
    if nrm == 0.0:
        return tt_zeros(x.shape)
    if d == 1:
        return y
    delta = eps * nrm / np.sqrt(d - 1)
    cores = y.cores
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = _svd(cores[k].reshape(r0 * n, r1))
        rk = max(_truncation_rank(s, delta, rmax), 1)
        cores[k] = u[:, :rk].reshape(r0, n, rk)
        cores[k + 1] = np.einsum("ab,bnc->anc", s[:rk, None] * vt[:rk], cores[k + 1])
    return TTVector(cores)


def tt_round_operator(op: TTOperator, eps: float = 1e-14, rmax: int | None = None) -> TTOperator:
    return TTOperator.from_vector(tt_round(op.as_vector(), eps, rmax), op.row_shape, op.col_shape)


def _check_same_shape(x, y):
    if x.shape != y.shape:
        raise ShapeMismatchError(f"mode sizes differ: {x.shape} vs {y.shape}")


def tt_axpby(a: float, x: TTVector, b: float, y: TTVector) -> TTVector:
    """Exact ``a x + b y``; ranks add."""
    _check_same_shape(x, y)
    d = x.d
    if d == 1:
        return TTVector([a * x.cores[0] + b * y.cores[0]])
    cores = []
    for k, (cx, cy) in enumerate(zip(x.cores, y.cores)):
        rx0, n, rx1 = cx.shape
        ry0, _, ry1 = cy.shape
        if k == 0:
            c = np.concatenate([a * cx, b * cy], axis=2)
        elif k == d - 1:
            c = np.concatenate([cx, cy], axis=0)
        else:
            c = np.zeros((rx0 + ry0, n, rx1 + ry1))
            c[:rx0, :, :rx1] = cx
            c[rx0:, :, rx1:] = cy
        cores.append(c)
    return TTVector(cores)


def tt_dot(x: TTVector, y: TTVector) -> float:
    _check_same_shape(x, y)
    phi = np.ones((1, 1))
    for cx, cy in zip(x.cores, y.cores):
        phi = np.einsum("ab,anc,bnd->cd", phi, cx, cy, optimize=True)
    return float(phi[0, 0])


def tt_norm(x: TTVector) -> float:
    return float(np.linalg.norm(orthogonalize_right(x).cores[0]))


def tt_apply(A: TTOperator, x: TTVector) -> TTVector:
    """Exact ``A x``; ranks multiply."""
    if A.col_shape != x.shape:
        raise ShapeMismatchError(f"operator columns {A.col_shape} vs vector {x.shape}")
    cores = []
    for ca, cx in zip(A.cores, x.cores):
        ra0, m, n, ra1 = ca.shape
        rx0, _, rx1 = cx.shape
        c = np.einsum("amnb,cnd->acmbd", ca, cx, optimize=True)
        cores.append(c.reshape(ra0 * rx0, m, ra1 * rx1))
    return TTVector(cores)


def tt_transpose_apply(A: TTOperator, x: TTVector) -> TTVector:
    return tt_apply(A.T, x)


def tt_matmul(A: TTOperator, B: TTOperator) -> TTOperator:
    """Exact operator product ``A B``."""
    if A.col_shape != B.row_shape:
        raise ShapeMismatchError("inner mode sizes differ")
    cores = []
    for ca, cb in zip(A.cores, B.cores):
        ra0, m, k, ra1 = ca.shape
        rb0, _, n, rb1 = cb.shape
        c = np.einsum("amkb,ckne->acmnbe", ca, cb, optimize=True)
        cores.append(c.reshape(ra0 * rb0, m, n, ra1 * rb1))
    return TTOperator(cores)


def apply_dense(A: TTOperator, x: np.ndarray) -> np.ndarray:
    """Apply a TT operator to a dense tensor of shape ``A.col_shape``."""
    x = np.asarray(x, dtype=float)
    t = x.reshape(1, 1, -1)  # (rows done, rank, cols remaining)
    for c in A.cores:
        r0, m, n, r1 = c.shape
        t = t.reshape(t.shape[0], r0, n, -1)
        t = np.einsum("Mrnq,rmns->Mmsq", t, c, optimize=True)
        t = t.reshape(-1, r1, t.shape[-1])
    return t.reshape(A.row_shape)


def save_tt(obj, fh: BinaryIO) -> None:
    """Write a TT snapshot: header then little-endian float64 cores."""
    if isinstance(obj, TTOperator):
        kind, rows, cols = 1, obj.row_shape, obj.col_shape
    else:
        kind, rows, cols = 0, obj.shape, obj.shape
    fh.write(_MAGIC)
    fh.write(struct.pack("<II", kind, obj.d))
    fh.write(struct.pack(f"<{obj.d}Q", *rows))
    if kind:
        fh.write(struct.pack(f"<{obj.d}Q", *cols))
    fh.write(struct.pack(f"<{obj.d + 1}Q", *obj.ranks))
    for c in obj.cores:
        fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def load_tt(fh: BinaryIO):
    if fh.read(4) != _MAGIC:
        raise ValueError("not a TT snapshot")
    kind, d = struct.unpack("<II", fh.read(8))
    rows = struct.unpack(f"<{d}Q", fh.read(8 * d))
    cols = struct.unpack(f"<{d}Q", fh.read(8 * d)) if kind else rows
    ranks = struct.unpack(f"<{d + 1}Q", fh.read(8 * (d + 1)))
    cores = []
    for k in range(d):
        shape = (ranks[k], rows[k], cols[k], ranks[k + 1]) if kind else (ranks[k], rows[k], ranks[k + 1])
        count = int(np.prod(shape))
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if data.size != count:
            raise ValueError("truncated TT snapshot")
        cores.append(data.reshape(shape).astype(float))
    return TTOperator(cores) if kind else TTVector(cores)
