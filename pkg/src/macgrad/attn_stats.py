"""Attention-specific curvature statistics and preconditioning.

The query and key projections share a rank-1 factor built from the mean input
token; the value projection uses the attention-weighted mean token X^T t_bar,
where t_bar is the column-wise average of the score matrix T (the average
attention distribution over tokens).  Per projection the state is a single
d-vector, and the damped rank-1 inverse is applied in closed form.

``empirical_fim_attention`` assembles the exact per-example Fisher blocks for
tiny problem sizes through the vec-Kronecker identities; it exists purely as
an oracle for validating the algebra of the efficient path.
"""

from __future__ import annotations

import json
import logging

import numpy as np

from .errors import ContractError, DimensionError, StateError
from .tensor import tensor_from_bytes, tensor_to_bytes

__all__ = [
    "mean_attention",
    "value_statistic",
    "rank1_right_project",
    "precondition_attn",
    "AttnCurvState",
    "vec_cols",
    "unvec_cols",
    "empirical_fim_attention",
]

logger = logging.getLogger(__name__)

_RHO_FLOOR = 1e-8


def mean_attention(t: np.ndarray, row_tol: float = 1e-6) -> np.ndarray:
    """Column-wise average of a row-stochastic score matrix.

    The result sums to 1 whenever the rows do; rows that are off by more than
    ``row_tol`` are tolerated but logged.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise DimensionError(f"score matrix must be square, got {t.shape}")
    row_err = float(np.max(np.abs(t.sum(axis=1) - 1.0)))
    if row_err > row_tol:
        logger.warning("score matrix rows deviate from stochasticity by %.3e", row_err)
    return t.mean(axis=0)


def value_statistic(x: np.ndarray, t_bar: np.ndarray) -> np.ndarray:
    """Attention-weighted mean token X^T t_bar = sum_i t_bar_i x_i."""
    x = np.asarray(x, dtype=np.float64)
    t_bar = np.asarray(t_bar, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != t_bar.size:
        raise DimensionError(f"X {x.shape} does not match t_bar of length {t_bar.size}")
    return x.T @ t_bar


def rank1_right_project(g: np.ndarray, v: np.ndarray, rho: float) -> np.ndarray:
    """G (I - v v^T / (rho + |v|^2)), the decoupled damped rank-1 inverse."""
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).ravel()
    if g.shape[1] != v.size:
        raise DimensionError(f"gradient has {g.shape[1]} columns, statistic has {v.size}")
    denom = rho + float(v @ v)
    return g - np.outer(g @ v, v) / denom


def precondition_attn(
    g_qkv: np.ndarray,
    x_hat: np.ndarray,
    v_hat: np.ndarray,
    rho: float,
) -> np.ndarray:
    """Block-diagonal preconditioning of a fused QKV gradient.

    ``g_qkv`` is (3d, d) in out-by-in layout; rows [0, d) / [d, 2d) / [2d, 3d)
    are the query / key / value blocks.  Query and key blocks use the mean
    token statistic, the value block uses the attention-weighted one; the
    blocks never mix.
    """
    g_qkv = np.asarray(g_qkv, dtype=np.float64)
    d = np.asarray(x_hat).size
    if g_qkv.shape != (3 * d, d):
        raise DimensionError(f"fused gradient must be {(3 * d, d)}, got {g_qkv.shape}")
    out = np.empty_like(g_qkv)
    out[:d] = rank1_right_project(g_qkv[:d], x_hat, rho)
    out[d:2 * d] = rank1_right_project(g_qkv[d:2 * d], x_hat, rho)
    out[2 * d:] = rank1_right_project(g_qkv[2 * d:], v_hat, rho)
    return out


class AttnCurvState:
    """EMA state for one fused QKV projection: x_tilde for q/k, v_tilde for v.

    State is two d-vectors plus scalars, regardless of sequence length or
    head count.
    """

    kind = "attn_mac"

    def __init__(self, dim: int, beta2: float, damping: float | str, floor: float = _RHO_FLOOR):
        self.dim = dim
        self.beta2 = float(beta2)
        self.damping = damping
        self.floor = floor
        self.x_tilde = np.zeros(dim)
        self.v_tilde = np.zeros(dim)
        self.x_trace_tilde = 0.0
        self.v_trace_tilde = 0.0
        self.k_tau = 0
        self.rho = damping if isinstance(damping, float) else floor
        self._x_hat: np.ndarray | None = None
        self._v_hat: np.ndarray | None = None
        self.frozen = False

    def update(self, x_tokens: np.ndarray, t_heads: np.ndarray) -> None:
        """EMA step from one batch: X (B, N, d), scores (B, H, N, N)."""
        x_tokens = np.asarray(x_tokens, dtype=np.float64)
        t_heads = np.asarray(t_heads, dtype=np.float64)
        if x_tokens.ndim != 3 or x_tokens.shape[2] != self.dim:
            raise DimensionError(f"tokens must be (B, N, {self.dim}), got {x_tokens.shape}")
        b = x_tokens.shape[0]
        x_bar = x_tokens.reshape(-1, self.dim).mean(axis=0)
        x_trace = float((x_tokens.reshape(-1, self.dim) ** 2).sum(axis=1).mean())
        # head-averaged column mean of T, then the weighted token per example
        t_bar = t_heads.mean(axis=(1, 2))                      # (B, N)
        v_stat = np.einsum("bn,bnd->bd", t_bar, x_tokens)      # (B, d)
        v_bar = v_stat.mean(axis=0)
        v_trace = float((v_stat ** 2).sum(axis=1).mean())
        b2 = self.beta2
        self.x_tilde = b2 * self.x_tilde + (1.0 - b2) * x_bar
        self.v_tilde = b2 * self.v_tilde + (1.0 - b2) * v_bar
        self.x_trace_tilde = b2 * self.x_trace_tilde + (1.0 - b2) * x_trace
        self.v_trace_tilde = b2 * self.v_trace_tilde + (1.0 - b2) * v_trace
        self.k_tau += 1

    def update_stats(self, stats, block) -> None:
        if self.frozen:
            return
        if stats.x_tokens is None or stats.t_heads is None:
            raise StateError("no captured attention statistics for this step")
        self.update(stats.x_tokens, stats.t_heads)

    def bias_corrected(self) -> tuple[np.ndarray, np.ndarray]:
        if self.k_tau < 1:
            raise StateError("bias correction requires at least one EMA update")
        c = 1.0 - self.beta2 ** self.k_tau
        return self.x_tilde / c, self.v_tilde / c

    def rebuild(self) -> None:
        if self.frozen or self.k_tau == 0:
            return
        x_hat, v_hat = self.bias_corrected()
        if self.damping == "adaptive":
            c = 1.0 - self.beta2 ** self.k_tau
            raw = ((self.x_trace_tilde / c) - float(x_hat @ x_hat)) / self.dim
            self.rho = max(self.floor, raw)
        else:
            self.rho = float(self.damping)
        self._x_hat, self._v_hat = x_hat, v_hat

    def precondition(self, g: np.ndarray, stats=None) -> np.ndarray:
        if self._x_hat is None:
            return np.asarray(g, dtype=np.float64).copy()
        return precondition_attn(g, self._x_hat, self._v_hat, self.rho)

    def state_bytes(self) -> int:
        total = self.x_tilde.nbytes + self.v_tilde.nbytes
        for cache in (self._x_hat, self._v_hat):
            if cache is not None:
                total += cache.nbytes
        return total

    def _scalars(self) -> dict:
        return {
            "kind": self.kind, "dim": self.dim, "beta2": self.beta2,
            "damping": self.damping, "floor": self.floor, "k_tau": self.k_tau,
            "rho": self.rho, "x_trace_tilde": self.x_trace_tilde,
            "v_trace_tilde": self.v_trace_tilde, "frozen": self.frozen,
            "has_hat": self._x_hat is not None,
        }

    def _tensors(self) -> list[np.ndarray]:
        out = [self.x_tilde, self.v_tilde]
        if self._x_hat is not None:
            out += [self._x_hat, self._v_hat]
        return out

    def to_payload(self) -> bytes:
        header = json.dumps(self._scalars(), sort_keys=True).encode()
        body = b"".join(tensor_to_bytes(t) for t in self._tensors())
        return len(header).to_bytes(4, "little") + header + body

    def _restore(self, scalars: dict, tensors: list[np.ndarray]) -> None:
        self.k_tau = int(scalars["k_tau"])
        self.rho = scalars["rho"]
        self.x_trace_tilde = scalars["x_trace_tilde"]
        self.v_trace_tilde = scalars["v_trace_tilde"]
        self.frozen = bool(scalars["frozen"])
        self.x_tilde, self.v_tilde = tensors[0], tensors[1]
        if scalars["has_hat"]:
            self._x_hat, self._v_hat = tensors[2], tensors[3]


# ---------------------------------------------------------------------------
# exact Fisher blocks at toy sizes (oracle only)
# ---------------------------------------------------------------------------


def vec_cols(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization (Fortran order)."""
    return np.asarray(m, dtype=np.float64).reshape(-1, order="F")


def unvec_cols(v: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(shape, order="F")


_MAX_ORACLE_N = 6
_MAX_ORACLE_D = 8


def empirical_fim_attention(batch: list[dict], projection: str) -> np.ndarray:
    """Mean of vec(grad) vec(grad)^T over a batch, via the Kronecker route.

    Each batch entry carries the per-example matrices for one head:
    ``x`` (N, d), ``delta_r`` (N, N), ``k``/``q`` (N, d_k), ``t`` (N, N),
    ``delta_h`` (N, d_k).  The gradient is formed as, e.g. for the query
    projection, (K^T kron X^T) vec(Delta_R); explicitly materializing the
    Kronecker product bounds this to toy sizes.
    """
    if projection not in ("q", "k", "v"):
        raise ContractError(f"projection must be q, k or v, got {projection!r}")
    fim = None
    for item in batch:
        x = np.asarray(item["x"], dtype=np.float64)
        n, d = x.shape
        if n > _MAX_ORACLE_N or d > _MAX_ORACLE_D:
            raise ContractError(f"oracle limited to N<={_MAX_ORACLE_N}, d<={_MAX_ORACLE_D}")
        if projection == "q":
            kron = np.kron(item["k"].T, x.T)
            gvec = kron @ vec_cols(item["delta_r"])
        elif projection == "k":
            kron = np.kron(item["q"].T, x.T)
            gvec = kron @ vec_cols(np.asarray(item["delta_r"]).T)
        else:
            # vec(X^T T^T Delta_H) = (Delta_H^T kron X^T) vec(T^T)
            kron = np.kron(np.asarray(item["delta_h"]).T, x.T)
            gvec = kron @ vec_cols(np.asarray(item["t"]).T)
        outer = np.outer(gvec, gvec)
        fim = outer if fim is None else fim + outer
    if fim is None:
        raise ContractError("empty batch")
    return fim / len(batch)
