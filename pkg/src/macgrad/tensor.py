"""Dense float64 tensor kernels.

Tensors are plain C-contiguous float64 ``numpy.ndarray`` values, treated as
immutable after construction.  Everything else in the library builds on the
operations here: checked matrix multiply, a deterministic symmetric
eigensolver, a dense solver used as an oracle for the rank-1 inverses,
im2col/col2im patch extraction, and a simple binary serialization format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import ContractError, DimensionError, ParseError, SingularMatrixError

__all__ = [
    "as_tensor",
    "matmul",
    "SymEig",
    "sym_eig",
    "dense_solve",
    "outer",
    "transpose",
    "frobenius_norm",
    "l2_norm",
    "reduce_sum",
    "reduce_mean",
    "spectral_norm_sq",
    "im2col",
    "col2im",
    "conv_out_extent",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
]


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (0-d stays 0-d)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Checked 2-D matrix product with float64 accumulation."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = as_tensor(u).ravel()
    v = as_tensor(v).ravel()
    return np.outer(u, v)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_tensor(a).T)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).ravel()))


def reduce_sum(a: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    out = np.asarray(a, dtype=np.float64).sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def reduce_mean(a: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    out = np.asarray(a, dtype=np.float64).mean(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# symmetric eigendecomposition (cyclic Jacobi)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymEig:
    """Full decomposition A = V diag(w) V^T.

    ``eigenvalues`` are sorted descending; column i of ``eigenvectors`` pairs
    with eigenvalue i.  The sign of each eigenvector is fixed so that its
    largest-magnitude entry is positive (ties broken toward the lowest index).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_symmetric(a: np.ndarray, tol: float = 1e-9) -> None:
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 0.0)
    if float(np.max(np.abs(a - a.T))) > tol * scale:
        raise ContractError("matrix is not symmetric within 1e-9")


def _rotation_coeffs(app: float, aqq: float, apq: float) -> tuple[float, float]:
    # Stable Givens angle: tan(2 theta) = 2 apq / (aqq - app), picking the
    # smaller rotation.  Falls back to t = apq / h when h dominates apq.
    h = aqq - app
    g = 100.0 * abs(apq)
    if abs(h) + g == abs(h):
        t = apq / h
    else:
        theta = 0.5 * h / apq
        t = 1.0 / (abs(theta) + np.sqrt(1.0 + theta * theta))
        if theta < 0.0:
            t = -t
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, t * c


def _jacobi_sweeps_numpy(a: np.ndarray, v: np.ndarray, max_sweeps: int) -> int:
    """Row-cyclic threshold Jacobi, numpy-vectorized rotations."""
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = float(np.sum(np.abs(a)) - np.sum(np.abs(np.diag(a))))
        if off == 0.0:
            return sweep
        thresh = 0.2 * off / (n * n) if sweep < 4 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                if sweep >= 4 and abs(a[p, p]) + g == abs(a[p, p]) \
                        and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                elif abs(apq) > thresh:
                    c, s = _rotation_coeffs(a[p, p], a[q, q], apq)
                    col_p = a[:, p].copy()
                    col_q = a[:, q].copy()
                    a[:, p] = c * col_p - s * col_q
                    a[:, q] = s * col_p + c * col_q
                    row_p = a[p, :].copy()
                    row_q = a[q, :].copy()
                    a[p, :] = c * row_p - s * row_q
                    a[q, :] = s * row_p + c * row_q
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    vec_p = v[:, p].copy()
                    vec_q = v[:, q].copy()
                    v[:, p] = c * vec_p - s * vec_q
                    v[:, q] = s * vec_p + c * vec_q
    return -1


def _jacobi_sweeps_scalar(a: np.ndarray, v: np.ndarray, max_sweeps: int) -> int:
    # Same algorithm with explicit loops; compiled by numba when available.
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += abs(a[i, j])
        off *= 2.0
        if off == 0.0:
            return sweep
        thresh = 0.2 * off / (n * n) if sweep < 4 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                if sweep >= 4 and abs(a[p, p]) + g == abs(a[p, p]) \
                        and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                elif abs(apq) > thresh:
                    h = a[q, q] - a[p, p]
                    if abs(h) + g == abs(h):
                        t = apq / h
                    else:
                        theta = 0.5 * h / apq
                        t = 1.0 / (abs(theta) + np.sqrt(1.0 + theta * theta))
                        if theta < 0.0:
                            t = -t
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = t * c
                    for k in range(n):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                    for k in range(n):
                        apk = a[p, k]
                        aqk = a[q, k]
                        a[p, k] = c * apk - s * aqk
                        a[q, k] = s * apk + c * aqk
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        vkp = v[k, p]
                        vkq = v[k, q]
                        v[k, p] = c * vkp - s * vkq
                        v[k, q] = s * vkp + c * vkq
    return -1


try:  # optional accelerator; the algorithm and sweep order are identical
    from numba import njit as _njit

    _jacobi_sweeps_fast = _njit(cache=True, fastmath=False)(_jacobi_sweeps_scalar)
except ImportError:  # pragma: no cover - exercised on minimal installs
    _jacobi_sweeps_fast = None


def sym_eig(a: np.ndarray, max_sweeps: int = 64) -> SymEig:
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi sweeps.

    Deterministic: fixed row-cyclic sweep order, no pivot randomness, so
    repeated calls give bit-identical output.  Intended for desk-scale
    matrices (n <= 4096).
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig expects a square matrix, got {a.shape}")
    n = a.shape[0]
    if n > 4096:
        raise ContractError("sym_eig supports n <= 4096")
    _check_symmetric(a)

    work = 0.5 * (a + a.T)
    v = np.eye(n)
    if n > 1:
        sweeps = (_jacobi_sweeps_fast or _jacobi_sweeps_numpy)(work, v, max_sweeps)
        if sweeps < 0:
            raise RuntimeError("Jacobi eigensolver did not converge")

    eigenvalues = np.diag(work).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    vectors = np.ascontiguousarray(v[:, order])
    for i in range(n):
        col = vectors[:, i]
        if col[int(np.argmax(np.abs(col)))] < 0.0:
            vectors[:, i] = -col
    return SymEig(eigenvalues=eigenvalues, eigenvectors=vectors)


def spectral_norm_sq(x: np.ndarray, iters: int = 200, tol: float = 1e-13) -> float:
    """lambda_max(X^T X) by deterministic power iteration on the Gram matvec.

    Avoids forming X^T X when the feature dimension is large.  Start vector is
    the all-ones direction plus the column mean, which has a nonzero component
    on the top eigenvector for the data handled here.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("spectral_norm_sq expects a 2-D matrix")
    d = x.shape[1]
    v = np.ones(d) + x.mean(axis=0)
    nrm = np.linalg.norm(v)
    v = np.ones(d) / np.sqrt(d) if nrm == 0.0 else v / nrm
    lam = 0.0
    for _ in range(iters):
        w = x.T @ (x @ v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return lam


# ---------------------------------------------------------------------------
# dense solve
# ---------------------------------------------------------------------------

_COND_LIMIT = 1e12


def dense_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for square invertible a.

    Raises :class:`SingularMatrixError` when the 2-norm condition number
    exceeds the 1e12 heuristic, before any garbage solution is produced.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"dense_solve expects a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"rhs rows {b.shape} do not match matrix {a.shape}")
    svals = np.linalg.svd(a, compute_uv=False)
    if svals[-1] == 0.0 or not np.isfinite(svals).all() or svals[0] / svals[-1] > _COND_LIMIT:
        raise SingularMatrixError(
            f"matrix is singular or ill-conditioned (cond ~ {svals[0] / max(svals[-1], 1e-300):.3e})"
        )
    return np.linalg.solve(a, b)


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise DimensionError(
            f"kernel {kernel} with stride {stride}, padding {padding} does not fit extent {extent}"
        )
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Extract convolution patches.

    Input (N, C, H, W); output (N * out_h * out_w, C * kh * kw), one row per
    output position, fastest index over (C, kh, kw).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out_h = conv_out_extent(h, kh, stride, padding)
    out_w = conv_out_extent(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, out_h, out_w))
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            cols[:, :, i, j, :, :] = x[:, :, i:i_max:stride, j:j_max:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, c * kh * kw)


def col2im(
    cols: np.ndarray,
    input_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, c, h, w = input_shape
    out_h = conv_out_extent(h, kh, stride, padding)
    out_w = conv_out_extent(w, kw, stride, padding)
    cols = as_tensor(cols)
    if cols.shape != (n * out_h * out_w, c * kh * kw):
        raise DimensionError(
            f"col2im got {cols.shape}, expected {(n * out_h * out_w, c * kh * kw)}"
        )
    cols = cols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            img[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j, :, :]
    if padding:
        img = img[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# serialization: little-endian u32 rank, u64 extents, raw float64 payload
# ---------------------------------------------------------------------------


def tensor_to_bytes(a: np.ndarray) -> bytes:
    a = as_tensor(a)
    header = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = a.astype("<f8", copy=False).tobytes(order="C")
    return header + payload


def _truncated(offset: int, message: str) -> ParseError:
    return ParseError(f"{message} at byte {offset}")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor; returns (tensor, next offset)."""
    if len(buf) - offset < 4:
        raise _truncated(offset, "truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > 32:
        raise _truncated(offset - 4, f"implausible tensor rank {rank}")
    if len(buf) - offset < 8 * rank:
        raise _truncated(offset, "truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = 8 * count
    if len(buf) - offset < nbytes:
        raise _truncated(offset, "truncated tensor payload")
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += nbytes
    return flat.astype(np.float64).reshape(shape), offset


def write_tensor(f: BinaryIO, a: np.ndarray) -> None:
    f.write(tensor_to_bytes(a))


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(4)
    if len(head) < 4:
        raise _truncated(f.tell(), "truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    ext = f.read(8 * rank)
    if len(ext) < 8 * rank:
        raise _truncated(f.tell(), "truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", ext)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = f.read(8 * count)
    if len(payload) < 8 * count:
        raise _truncated(f.tell(), "truncated tensor payload")
    flat = np.frombuffer(payload, dtype="<f8", count=count)
    return flat.astype(np.float64).reshape(shape)
