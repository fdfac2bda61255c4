import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macgrad.errors import ContractError, DimensionError, ParseError, SingularMatrixError
from macgrad.tensor import (
    as_tensor,
    col2im,
    dense_solve,
    im2col,
    matmul,
    read_tensor,
    spectral_norm_sq,
    sym_eig,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 4))
        assert np.array_equal(matmul(np.eye(3), b), b)

    def test_hand_forced(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]])
        assert np.array_equal(out, [[2.0], [4.0]])

    def test_against_triple_loop(self, rng):
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            matmul(rng.standard_normal((3, 4)), rng.standard_normal((5, 2)))

    def test_associativity(self, rng):
        for _ in range(5):
            a = rng.standard_normal((4, 6))
            b = rng.standard_normal((6, 3))
            c = rng.standard_normal((3, 5))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1.0)


class TestSymEig:
    def test_diagonal(self):
        d = sym_eig(np.diag([3.0, 1.0, 2.0]))
        assert np.array_equal(d.eigenvalues, [3.0, 2.0, 1.0])
        # eigenvectors are permuted identity columns with positive signs
        expected = np.zeros((3, 3))
        expected[0, 0] = expected[2, 1] = expected[1, 2] = 1.0
        assert np.allclose(d.eigenvectors, expected)

    def test_rank_one(self):
        a_bar = np.array([1.0, 1.0]) / np.sqrt(2.0)
        d = sym_eig(np.outer(a_bar, a_bar))
        assert np.allclose(d.eigenvalues, [1.0, 0.0], atol=1e-12)
        assert np.allclose(np.abs(d.eigenvectors[:, 0]), a_bar, atol=1e-12)
        assert d.eigenvectors[0, 0] > 0

    def test_reconstruction_20x20(self, rng):
        m = rng.standard_normal((20, 20))
        a = m + m.T
        d = sym_eig(a)
        recon = d.eigenvectors @ np.diag(d.eigenvalues) @ d.eigenvectors.T
        assert np.linalg.norm(recon - a) < 1e-9

    def test_orthonormal_and_matches_lapack(self, rng):
        m = rng.standard_normal((31, 31))
        a = m + m.T
        d = sym_eig(a)
        assert np.linalg.norm(d.eigenvectors.T @ d.eigenvectors - np.eye(31)) < 1e-8
        assert np.max(np.abs(d.eigenvalues - np.linalg.eigvalsh(a)[::-1])) < 1e-9

    def test_trace_identity_and_ordering(self, rng):
        for _ in range(5):
            m = rng.standard_normal((12, 12))
            a = m + m.T
            d = sym_eig(a)
            assert abs(d.eigenvalues.sum() - np.trace(a)) <= 1e-9 * max(abs(np.trace(a)), 1.0)
            assert np.all(np.diff(d.eigenvalues) <= 1e-12)

    def test_eigen_residual(self, rng):
        m = rng.standard_normal((15, 15))
        a = m + m.T
        d = sym_eig(a)
        for i in range(15):
            v = d.eigenvectors[:, i]
            assert np.linalg.norm(a @ v - d.eigenvalues[i] * v) < 1e-7 * max(
                1.0, abs(d.eigenvalues[i])
            )

    def test_sign_convention_deterministic(self, rng):
        m = rng.standard_normal((9, 9))
        a = m + m.T
        d1 = sym_eig(a)
        d2 = sym_eig(a.copy())
        assert np.array_equal(d1.eigenvectors, d2.eigenvectors)
        for i in range(9):
            col = d1.eigenvectors[:, i]
            assert col[np.argmax(np.abs(col))] > 0

    def test_rejects_nonsymmetric(self, rng):
        with pytest.raises(ContractError):
            sym_eig(rng.standard_normal((4, 4)))


class TestDenseSolve:
    def test_identity(self, rng):
        b = rng.standard_normal((4, 2))
        assert np.allclose(dense_solve(np.eye(4), b), b)

    def test_scaled_identity(self):
        x = dense_solve(2.0 * np.eye(3), np.eye(3))
        assert np.allclose(x, 0.5 * np.eye(3))

    def test_spd_residual(self, rng):
        m = rng.standard_normal((10, 10))
        a = m @ m.T + 0.5 * np.eye(10)
        b = rng.standard_normal((10, 3))
        x = dense_solve(a, b)
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-10

    def test_singular_raises(self):
        a = np.ones((3, 3))
        with pytest.raises(SingularMatrixError):
            dense_solve(a, np.eye(3))


class TestSpectralNorm:
    def test_matches_sym_eig(self, rng):
        x = rng.standard_normal((30, 8))
        lam = spectral_norm_sq(x)
        ref = sym_eig(x.T @ x).eigenvalues[0]
        assert abs(lam - ref) <= 1e-9 * ref


def naive_conv2d(x, kernel, stride, padding):
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for b in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * kernel[o])
    return out


class TestIm2col:
    def test_matches_naive_convolution(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        kernel = rng.standard_normal((4, 3, 3, 2))
        for stride, padding in [(1, 0), (2, 1), (1, 2)]:
            cols = im2col(x, 3, 2, stride, padding)
            z = cols @ kernel.reshape(4, -1).T
            oh = (6 + 2 * padding - 3) // stride + 1
            ow = (5 + 2 * padding - 2) // stride + 1
            got = z.reshape(2, oh, ow, 4).transpose(0, 3, 1, 2)
            assert np.allclose(got, naive_conv2d(x, kernel, stride, padding), atol=1e-12)

    def test_adjoint_pair(self, rng):
        # <im2col(x), y> == <x, col2im(y)> makes col2im the exact transpose
        x = rng.standard_normal((2, 2, 5, 5))
        for stride, padding in [(1, 0), (2, 1)]:
            cols = im2col(x, 3, 3, stride, padding)
            y = rng.standard_normal(cols.shape)
            lhs = float(np.sum(cols * y))
            rhs = float(np.sum(x * col2im(y, x.shape, 3, 3, stride, padding)))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_kernel_too_large(self, rng):
        with pytest.raises(DimensionError):
            im2col(rng.standard_normal((1, 1, 3, 3)), 5, 5)


class TestSerialization:
    @given(
        st.lists(st.integers(min_value=0, max_value=5), min_size=0, max_size=4),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_roundtrip(self, shape, seed):
        arr = np.random.default_rng(seed).standard_normal(shape) if shape else as_tensor(3.14)
        blob = tensor_to_bytes(arr)
        back, consumed = tensor_from_bytes(blob)
        assert consumed == len(blob)
        assert back.shape == tuple(shape)
        assert np.array_equal(back, np.asarray(arr, dtype=np.float64))

    def test_stream_roundtrip(self, rng):
        arr = rng.standard_normal((3, 4, 2))
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        assert np.array_equal(read_tensor(buf), arr)

    def test_header_layout(self):
        blob = tensor_to_bytes(np.zeros((2, 3)))
        assert blob[:4] == (2).to_bytes(4, "little")
        assert blob[4:12] == (2).to_bytes(8, "little")
        assert blob[12:20] == (3).to_bytes(8, "little")
        assert len(blob) == 20 + 6 * 8

    def test_truncated_payload(self):
        blob = tensor_to_bytes(np.zeros((2, 3)))
        with pytest.raises(ParseError):
            tensor_from_bytes(blob[:-1])
