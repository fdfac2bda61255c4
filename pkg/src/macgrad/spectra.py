"""Structural analysis of curvature factors.

Everything here operates on batch-mean second-moment matrices
A = E[a a^T] and P = E[p p^T] built from captured statistics, and produces
JSON-serializable reports: eigenspectra of the factors and of their Kronecker
product, alignment of the top eigenvector of A with the mean activation
(with its perturbation bound), the rank-1 dominance constant for the raw
activation matrix, and the spectrum of attention score matrices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import sym_eig

__all__ = [
    "kf_spectrum",
    "alignment",
    "prop1_check",
    "attention_spectrum",
    "SpectralReport",
    "layer_report",
    "write_reports",
]


def kf_spectrum(a: np.ndarray, p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k eigenvalues of A, P, and A kron P.

    The Kronecker spectrum is the multiset of pairwise eigenvalue products,
    so it is computed by sorting the outer product of the two spectra; the
    big matrix is never formed.
    """
    eig_a = sym_eig(a).eigenvalues
    eig_p = sym_eig(p).eigenvalues
    products = np.sort(np.outer(eig_a, eig_p).ravel())[::-1]
    return eig_a[:k].copy(), eig_p[:k].copy(), products[:k].copy()


def alignment(a: np.ndarray, a_bar: np.ndarray) -> tuple[float, float]:
    """Cosine of the top eigenvector of A against the mean activation.

    Also returns the perturbation bound 2 sqrt(2) |Sigma_a|_F / |a_bar|^2,
    where Sigma_a = A - a_bar a_bar^T is the centered covariance; the bound
    controls how far the top eigenvector can rotate away from a_bar.
    """
    a_bar = np.asarray(a_bar, dtype=np.float64).ravel()
    norm = np.linalg.norm(a_bar)
    if norm == 0.0:
        raise ContractError("zero mean activation, alignment undefined")
    decomp = sym_eig(a)
    top = decomp.eigenvectors[:, 0]
    cos_align = abs(float(top @ (a_bar / norm)))
    sigma = np.asarray(a, dtype=np.float64) - np.outer(a_bar, a_bar)
    dk_bound = 2.0 * np.sqrt(2.0) * float(np.linalg.norm(sigma)) / (norm * norm)
    return cos_align, dk_bound


def prop1_check(x: np.ndarray) -> dict:
    """Rank-1 dominance diagnostics for a raw sample matrix X (m rows).

    Splits X into the mean part plus deviations E, reports the relative
    deviation constant c = |E|_F / (sqrt(m) |x_bar|), the epsilon it implies
    via (1 + c)^2 - 1, and the observed relative error of the rank-1
    approximation of X^T X.  The triangle-inequality chain
    |B + B^T + E^T E|_F <= 2 sqrt(m) |x_bar| |E|_F + |E|_F^2 is re-checked on
    the concrete instance; a violation indicates an implementation bug.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("prop1_check expects a 2-D sample matrix")
    m = x.shape[0]
    x_bar = x.mean(axis=0)
    norm = np.linalg.norm(x_bar)
    if norm == 0.0:
        raise ContractError("zero-mean input")
    e = x - x_bar[None, :]
    e_norm = float(np.linalg.norm(e))
    c = e_norm / (np.sqrt(m) * norm)
    eps_implied = (1.0 + c) ** 2 - 1.0

    gram = x.T @ x
    rank1 = m * np.outer(x_bar, x_bar)
    rel_err = float(np.linalg.norm(gram - rank1)) / max(float(np.linalg.norm(gram)), 1e-300)

    b = np.outer(x_bar, e.sum(axis=0))
    cross = b + b.T + e.T @ e
    lhs = float(np.linalg.norm(cross))
    rhs = 2.0 * np.sqrt(m) * norm * e_norm + e_norm ** 2
    if lhs > rhs * (1.0 + 1e-12):
        raise AssertionError(
            f"triangle-inequality chain violated: {lhs} > {rhs}; this is a bug"
        )
    return {
        "c": c,
        "eps_implied": eps_implied,
        "rel_err": rel_err,
        "cross_norm": lhs,
        "cross_bound": rhs,
    }


def attention_spectrum(t: np.ndarray, k: int = 10) -> dict:
    """Singular spectrum of a score matrix and top-vector alignment with t_bar.

    Works on the (generally nonsymmetric) T through its Gram matrix; the top
    right singular vector is compared against the column-mean attention
    distribution.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise DimensionError(f"score matrix must be square, got {t.shape}")
    gram = t.T @ t
    decomp = sym_eig(gram)
    singular = np.sqrt(np.maximum(decomp.eigenvalues, 0.0))
    t_bar = t.mean(axis=0)
    nrm = np.linalg.norm(t_bar)
    top = decomp.eigenvectors[:, 0]
    align = abs(float(top @ (t_bar / nrm))) if nrm > 0 else 0.0
    return {"singular_values": singular[:k].tolist(), "tbar_align": align}


@dataclass
class SpectralReport:
    layer: str
    top_eig_a: list[float]
    top_eig_p: list[float]
    top_eig_kron: list[float]
    cos_align: float
    sigma_norm: float
    mean_norm_sq: float
    dk_bound: float
    prop1_c: float


def layer_report(layer_id: str, a_rows: np.ndarray, p_rows: np.ndarray, k: int) -> SpectralReport:
    """Build the per-layer report from captured activation/gradient rows."""
    a_rows = np.asarray(a_rows, dtype=np.float64)
    p_rows = np.asarray(p_rows, dtype=np.float64)
    a_mat = a_rows.T @ a_rows / a_rows.shape[0]
    p_mat = p_rows.T @ p_rows / p_rows.shape[0]
    a_bar = a_rows.mean(axis=0)
    eig_a, eig_p, eig_kron = kf_spectrum(a_mat, p_mat, k)
    cos_align, dk_bound = alignment(a_mat, a_bar)
    sigma = a_mat - np.outer(a_bar, a_bar)
    diag = prop1_check(a_rows)
    return SpectralReport(
        layer=layer_id,
        top_eig_a=eig_a.tolist(),
        top_eig_p=eig_p.tolist(),
        top_eig_kron=eig_kron.tolist(),
        cos_align=cos_align,
        sigma_norm=float(np.linalg.norm(sigma)),
        mean_norm_sq=float(a_bar @ a_bar),
        dk_bound=dk_bound,
        prop1_c=diag["c"],
    )


def write_reports(path, reports: list) -> None:
    """Append reports as JSON lines, one object per report."""
    with open(path, "a", encoding="utf-8") as f:
        for r in reports:
            payload = asdict(r) if hasattr(r, "__dataclass_fields__") else r
            f.write(json.dumps(payload, sort_keys=True) + "\n")
