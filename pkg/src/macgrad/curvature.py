"""Per-layer curvature state and gradient preconditioning.

Implements the rank-1 mean-activation preconditioner (``mac``), its variant
with a diagonal pre-activation second-moment factor (``smac``), and the
reference baselines ``kfac``, ``foof`` and ``eva``, plus plain ``sgd`` and
``adamw``.  Gradients are handled as matrices in (out, in) layout; layers
with a bias carry an extra constant-1 input coordinate so that weight and
bias share one preconditioner.

The rank-1 factor M = I - a a^T / (rho + |a|^2) equals rho (a a^T + rho I)^-1
exactly (Sherman-Morrison), and is applied as two matrix-vector products so
per-layer state stays linear in the layer width.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import attn_stats
from .errors import CheckpointError, ConfigError, DimensionError, StateError
from .nn import Attention, BatchStats, Layer, Model, augment_ones
from .tensor import dense_solve, tensor_from_bytes, tensor_to_bytes

__all__ = [
    "RHO_FLOOR",
    "MacFactor",
    "build_mac_factor",
    "adaptive_rho",
    "precondition_mac",
    "precondition_smac",
    "precondition_kfac",
    "precondition_foof",
    "precondition_eva",
    "apply_update",
    "update_activation_ema",
    "bias_correct",
    "MacState",
    "SmacState",
    "KfacState",
    "FoofState",
    "EvaState",
    "OptimizerConfig",
    "OPTIMIZER_NAMES",
    "make_optimizer",
    "SgdOptimizer",
    "AdamWOptimizer",
    "CurvatureOptimizer",
]

RHO_FLOOR = 1e-8


@dataclass(frozen=True)
class MacFactor:
    """Implicit representation of M = I - a a^T / (rho + |a|^2).

    ``a_hat is None`` denotes the identity factor used before the first
    rebuild.  ``dense`` materializes M for oracles and small layers; the
    training path only ever calls :meth:`apply_right`.
    """

    a_hat: np.ndarray | None
    rho: float

    def apply_right(self, g: np.ndarray) -> np.ndarray:
        if self.a_hat is None:
            return g.copy()
        a = self.a_hat
        if g.shape[1] != a.size:
            raise DimensionError(f"gradient has {g.shape[1]} columns, factor has {a.size}")
        denom = self.rho + float(a @ a)
        return g - np.outer(g @ a, a) / denom

    def dense(self) -> np.ndarray:
        if self.a_hat is None:
            raise StateError("identity factor has no fixed dimension")
        a = self.a_hat
        denom = self.rho + float(a @ a)
        return np.eye(a.size) - np.outer(a, a) / denom


def build_mac_factor(a_hat: np.ndarray, rho: float) -> MacFactor:
    if rho < RHO_FLOOR:
        raise ConfigError(f"damping {rho} below floor {RHO_FLOOR}")
    return MacFactor(a_hat=np.asarray(a_hat, dtype=np.float64).ravel().copy(), rho=float(rho))


def adaptive_rho(second_moment_trace: float, a_hat: np.ndarray, floor: float = RHO_FLOOR) -> float:
    """Trace-matching damping: rho = (tr E[a a^T] - |a_hat|^2) / dim, clamped."""
    a_hat = np.asarray(a_hat, dtype=np.float64).ravel()
    raw = (float(second_moment_trace) - float(a_hat @ a_hat)) / a_hat.size
    return max(floor, raw)


def precondition_mac(g: np.ndarray, factor: MacFactor) -> np.ndarray:
    """G M, computed matrix-free."""
    return factor.apply_right(np.asarray(g, dtype=np.float64))


def precondition_smac(
    g: np.ndarray, factor: MacFactor, p_hat: np.ndarray, rho: float
) -> np.ndarray:
    """diag(p_hat + rho)^-1 G M."""
    p_hat = np.asarray(p_hat, dtype=np.float64).ravel()
    if np.any(p_hat < 0):
        raise ConfigError("p_hat must be elementwise nonnegative")
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != p_hat.size:
        raise DimensionError(f"gradient has {g.shape[0]} rows, p_hat has {p_hat.size}")
    return factor.apply_right(g / (p_hat + rho)[:, None])


def precondition_kfac(g: np.ndarray, a_mat: np.ndarray, p_mat: np.ndarray, rho: float) -> np.ndarray:
    """(P + rho I)^-1 G (A + rho I)^-1 via dense solves."""
    g = np.asarray(g, dtype=np.float64)
    left = dense_solve(p_mat + rho * np.eye(p_mat.shape[0]), g)
    return dense_solve(a_mat + rho * np.eye(a_mat.shape[0]), left.T).T


def precondition_foof(g: np.ndarray, a_mat: np.ndarray, rho: float) -> np.ndarray:
    """G (A + rho I)^-1."""
    g = np.asarray(g, dtype=np.float64)
    return dense_solve(a_mat + rho * np.eye(a_mat.shape[0]), g.T).T


def _sm_inverse_apply_left(g: np.ndarray, v: np.ndarray, rho: float) -> np.ndarray:
    # (v v^T + rho I)^-1 G, true inverse including the 1/rho scale
    denom = rho + float(v @ v)
    return (g - np.outer(v, v @ g) / denom) / rho


def _sm_inverse_apply_right(g: np.ndarray, v: np.ndarray, rho: float) -> np.ndarray:
    denom = rho + float(v @ v)
    return (g - np.outer(g @ v, v) / denom) / rho


def precondition_eva(g: np.ndarray, a_bar: np.ndarray, p_bar: np.ndarray, rho: float) -> np.ndarray:
    """(p p^T + rho I)^-1 G (a a^T + rho I)^-1, both via Sherman-Morrison."""
    g = np.asarray(g, dtype=np.float64)
    a_bar = np.asarray(a_bar, dtype=np.float64).ravel()
    p_bar = np.asarray(p_bar, dtype=np.float64).ravel()
    return _sm_inverse_apply_right(_sm_inverse_apply_left(g, p_bar, rho), a_bar, rho)


def apply_update(
    theta: np.ndarray,
    g_hat: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
    decoupled: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Momentum step on the preconditioned gradient; returns (theta, velocity).

    Coupled decay folds wd * theta into the velocity input; decoupled decay
    shrinks theta separately from the momentum buffer.
    """
    if decoupled:
        v = momentum * velocity + g_hat
        new_theta = theta - lr * v - lr * weight_decay * theta
    else:
        v = momentum * velocity + (g_hat + weight_decay * theta)
        new_theta = theta - lr * v
    return new_theta, v


# ---------------------------------------------------------------------------
# per-layer states
# ---------------------------------------------------------------------------


class MacState:
    """EMA of the mean activation plus the cached rank-1 factor."""

    kind = "mac"

    def __init__(self, dim: int, beta2: float, damping: float | str, floor: float = RHO_FLOOR):
        self.dim = dim
        self.beta2 = float(beta2)
        self.damping = damping
        self.floor = floor
        self.a_tilde = np.zeros(dim)
        self.trace_tilde = 0.0
        self.k_tau = 0
        self.rho = damping if isinstance(damping, float) else floor
        self.factor = MacFactor(a_hat=None, rho=float(self.rho))
        self.frozen = False

    def update_stats(self, stats, block) -> None:
        if self.frozen:
            return
        rows = block.a_rows(stats)
        a_bar = rows.mean(axis=0)
        trace = float((rows * rows).sum(axis=1).mean())
        update_activation_ema(self, a_bar, trace)

    def rebuild(self) -> None:
        if self.frozen or self.k_tau == 0:
            return
        a_hat = bias_correct(self)
        trace_hat = self.trace_tilde / (1.0 - self.beta2 ** self.k_tau)
        if self.damping == "adaptive":
            self.rho = adaptive_rho(trace_hat, a_hat, self.floor)
        else:
            self.rho = float(self.damping)
        self.factor = build_mac_factor(a_hat, self.rho)

    def precondition(self, g: np.ndarray, stats=None) -> np.ndarray:
        return precondition_mac(g, self.factor)

    def state_bytes(self) -> int:
        total = self.a_tilde.nbytes
        if self.factor.a_hat is not None:
            total += self.factor.a_hat.nbytes
        return total

    def _scalars(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "beta2": self.beta2,
            "damping": self.damping,
            "floor": self.floor,
            "k_tau": self.k_tau,
            "rho": self.rho,
            "trace_tilde": self.trace_tilde,
            "frozen": self.frozen,
            "has_factor": self.factor.a_hat is not None,
        }

    def _tensors(self) -> list[np.ndarray]:
        out = [self.a_tilde]
        if self.factor.a_hat is not None:
            out.append(self.factor.a_hat)
        return out

    def to_payload(self) -> bytes:
        header = json.dumps(self._scalars(), sort_keys=True).encode()
        body = b"".join(tensor_to_bytes(t) for t in self._tensors())
        return len(header).to_bytes(4, "little") + header + body

    def _restore(self, scalars: dict, tensors: list[np.ndarray]) -> None:
        self.k_tau = int(scalars["k_tau"])
        self.rho = scalars["rho"]
        self.trace_tilde = scalars["trace_tilde"]
        self.frozen = bool(scalars["frozen"])
        self.a_tilde = tensors[0]
        if scalars["has_factor"]:
            self.factor = MacFactor(a_hat=tensors[1], rho=float(self.rho))


def update_activation_ema(state, a_bar: np.ndarray, batch_trace: float = 0.0) -> None:
    """One EMA step on the maintained mean-activation statistic."""
    a_bar = np.asarray(a_bar, dtype=np.float64).ravel()
    if a_bar.size != state.a_tilde.size:
        raise DimensionError(f"statistic dim {a_bar.size} != state dim {state.a_tilde.size}")
    b2 = state.beta2
    state.a_tilde = b2 * state.a_tilde + (1.0 - b2) * a_bar
    state.trace_tilde = b2 * state.trace_tilde + (1.0 - b2) * float(batch_trace)
    state.k_tau += 1


def bias_correct(state) -> np.ndarray:
    """a_hat = a_tilde / (1 - beta2^k_tau)."""
    if state.k_tau < 1:
        raise StateError("bias correction requires at least one EMA update")
    return state.a_tilde / (1.0 - state.beta2 ** state.k_tau)


class SmacState(MacState):
    """MAC plus a diagonal second-moment factor over output rows."""

    kind = "smac"

    def __init__(self, dim: int, out_dim: int, beta2: float, damping: float | str,
                 floor: float = RHO_FLOOR):
        super().__init__(dim, beta2, damping, floor)
        self.out_dim = out_dim
        self.p_tilde = np.zeros(out_dim)
        self._p_hat = np.zeros(out_dim)

    def update_stats(self, stats, block) -> None:
        super().update_stats(stats, block)
        prows = block.p_rows(stats)
        # EMA of E[p^2] shares the k_tau counter bumped by the base update
        self.p_tilde = self.beta2 * self.p_tilde + (1.0 - self.beta2) * (prows * prows).mean(axis=0)

    def p_hat(self) -> np.ndarray:
        if self.k_tau < 1:
            raise StateError("bias correction requires at least one EMA update")
        return self.p_tilde / (1.0 - self.beta2 ** self.k_tau)

    def rebuild(self) -> None:
        super().rebuild()
        if self.k_tau > 0:
            self._p_hat = self.p_hat()

    def precondition(self, g, stats=None):
        if self.factor.a_hat is None:
            return g.copy()
        return precondition_smac(g, self.factor, self._p_hat, self.rho)

    def state_bytes(self) -> int:
        return super().state_bytes() + self.p_tilde.nbytes + self._p_hat.nbytes

    def _scalars(self):
        d = super()._scalars()
        d["out_dim"] = self.out_dim
        return d

    def _tensors(self):
        return super()._tensors() + [self.p_tilde, self._p_hat]

    def _restore(self, scalars, tensors):
        n_base = 2 if scalars["has_factor"] else 1
        super()._restore(scalars, tensors[:n_base])
        self.p_tilde, self._p_hat = tensors[n_base], tensors[n_base + 1]


class KfacState:
    """Full Kronecker factors A = E[a a^T], P = E[p p^T] (reference oracle)."""

    kind = "kfac"

    def __init__(self, dim: int, out_dim: int, beta2: float, damping: float | str,
                 floor: float = RHO_FLOOR):
        if damping == "adaptive":
            raise ConfigError("adaptive damping applies to the rank-1 factor only")
        self.dim = dim
        self.out_dim = out_dim
        self.beta2 = float(beta2)
        self.rho = float(damping)
        self.a_mat = np.zeros((dim, dim))
        self.p_mat = np.zeros((out_dim, out_dim))
        self.k_tau = 0
        self._a_inv: np.ndarray | None = None
        self._p_inv: np.ndarray | None = None
        self.frozen = False

    def update_stats(self, stats, block) -> None:
        rows = block.a_rows(stats)
        prows = block.p_rows(stats)
        b2 = self.beta2
        self.a_mat = b2 * self.a_mat + (1.0 - b2) * (rows.T @ rows) / rows.shape[0]
        self.p_mat = b2 * self.p_mat + (1.0 - b2) * (prows.T @ prows) / prows.shape[0]
        self.k_tau += 1

    def rebuild(self) -> None:
        if self.k_tau == 0:
            return
        correction = 1.0 - self.beta2 ** self.k_tau
        a_hat = self.a_mat / correction
        p_hat = self.p_mat / correction
        self._a_inv = dense_solve(a_hat + self.rho * np.eye(self.dim), np.eye(self.dim))
        self._p_inv = dense_solve(p_hat + self.rho * np.eye(self.out_dim), np.eye(self.out_dim))

    def precondition(self, g, stats=None):
        if self._a_inv is None:
            return g.copy()
        return self._p_inv @ g @ self._a_inv

    def state_bytes(self) -> int:
        total = self.a_mat.nbytes + self.p_mat.nbytes
        for cache in (self._a_inv, self._p_inv):
            if cache is not None:
                total += cache.nbytes
        return total

    def _scalars(self):
        return {
            "kind": self.kind, "dim": self.dim, "out_dim": self.out_dim,
            "beta2": self.beta2, "rho": self.rho, "k_tau": self.k_tau,
            "has_inv": self._a_inv is not None, "frozen": self.frozen,
        }

    def _tensors(self):
        out = [self.a_mat, self.p_mat]
        if self._a_inv is not None:
            out += [self._a_inv, self._p_inv]
        return out

    def to_payload(self) -> bytes:
        header = json.dumps(self._scalars(), sort_keys=True).encode()
        body = b"".join(tensor_to_bytes(t) for t in self._tensors())
        return len(header).to_bytes(4, "little") + header + body

    def _restore(self, scalars, tensors):
        self.k_tau = int(scalars["k_tau"])
        self.rho = scalars["rho"]
        self.a_mat, self.p_mat = tensors[0], tensors[1]
        if scalars["has_inv"]:
            self._a_inv, self._p_inv = tensors[2], tensors[3]


class FoofState(KfacState):
    """Full activation factor only; pre-activation side is the identity."""

    kind = "foof"

    def update_stats(self, stats, block) -> None:
        rows = block.a_rows(stats)
        self.a_mat = self.beta2 * self.a_mat + (1.0 - self.beta2) * (rows.T @ rows) / rows.shape[0]
        self.k_tau += 1

    def rebuild(self) -> None:
        if self.k_tau == 0:
            return
        a_hat = self.a_mat / (1.0 - self.beta2 ** self.k_tau)
        self._a_inv = dense_solve(a_hat + self.rho * np.eye(self.dim), np.eye(self.dim))

    def precondition(self, g, stats=None):
        if self._a_inv is None:
            return g.copy()
        return g @ self._a_inv

    def state_bytes(self) -> int:
        total = self.a_mat.nbytes
        if self._a_inv is not None:
            total += self._a_inv.nbytes
        return total

    def _tensors(self):
        out = [self.a_mat, np.zeros(0)]
        if self._a_inv is not None:
            out += [self._a_inv, np.zeros(0)]
        return out

    def _restore(self, scalars, tensors):
        self.k_tau = int(scalars["k_tau"])
        self.rho = scalars["rho"]
        self.a_mat = tensors[0]
        if scalars["has_inv"]:
            self._a_inv = tensors[2]


class EvaState:
    """Rank-1 factors on both sides from mean activation and mean gradient."""

    kind = "eva"

    def __init__(self, dim: int, out_dim: int, beta2: float, damping: float | str,
                 floor: float = RHO_FLOOR):
        if damping == "adaptive":
            raise ConfigError("adaptive damping applies to the rank-1 factor only")
        self.dim = dim
        self.out_dim = out_dim
        self.beta2 = float(beta2)
        self.rho = float(damping)
        self.a_tilde = np.zeros(dim)
        self.p_tilde = np.zeros(out_dim)
        self.k_tau = 0
        self._a_hat: np.ndarray | None = None
        self._p_hat: np.ndarray | None = None
        self.frozen = False

    def update_stats(self, stats, block) -> None:
        rows = block.a_rows(stats)
        prows = block.p_rows(stats)
        b2 = self.beta2
        self.a_tilde = b2 * self.a_tilde + (1.0 - b2) * rows.mean(axis=0)
        self.p_tilde = b2 * self.p_tilde + (1.0 - b2) * prows.mean(axis=0)
        self.k_tau += 1

    def rebuild(self) -> None:
        if self.k_tau == 0:
            return
        correction = 1.0 - self.beta2 ** self.k_tau
        self._a_hat = self.a_tilde / correction
        self._p_hat = self.p_tilde / correction

    def precondition(self, g, stats=None):
        if self._a_hat is None:
            return g.copy()
        return precondition_eva(g, self._a_hat, self._p_hat, self.rho)

    def state_bytes(self) -> int:
        total = self.a_tilde.nbytes + self.p_tilde.nbytes
        for cache in (self._a_hat, self._p_hat):
            if cache is not None:
                total += cache.nbytes
        return total

    def _scalars(self):
        return {
            "kind": self.kind, "dim": self.dim, "out_dim": self.out_dim,
            "beta2": self.beta2, "rho": self.rho, "k_tau": self.k_tau,
            "has_hat": self._a_hat is not None, "frozen": self.frozen,
        }

    def _tensors(self):
        out = [self.a_tilde, self.p_tilde]
        if self._a_hat is not None:
            out += [self._a_hat, self._p_hat]
        return out

    def to_payload(self) -> bytes:
        header = json.dumps(self._scalars(), sort_keys=True).encode()
        body = b"".join(tensor_to_bytes(t) for t in self._tensors())
        return len(header).to_bytes(4, "little") + header + body

    def _restore(self, scalars, tensors):
        self.k_tau = int(scalars["k_tau"])
        self.rho = scalars["rho"]
        self.a_tilde, self.p_tilde = tensors[0], tensors[1]
        if scalars["has_hat"]:
            self._a_hat, self._p_hat = tensors[2], tensors[3]


def state_from_payload(payload: bytes):
    """Reconstruct any curvature state from its checkpoint payload."""
    hlen = int.from_bytes(payload[:4], "little")
    scalars = json.loads(payload[4:4 + hlen].decode())
    tensors = []
    offset = 4 + hlen
    while offset < len(payload):
        t, offset = tensor_from_bytes(payload, offset)
        tensors.append(t)
    kind = scalars["kind"]
    damping = scalars.get("damping", scalars.get("rho"))
    if kind == "mac":
        state = MacState(scalars["dim"], scalars["beta2"], damping, scalars["floor"])
    elif kind == "smac":
        state = SmacState(scalars["dim"], scalars["out_dim"], scalars["beta2"], damping,
                          scalars["floor"])
    elif kind == "kfac":
        state = KfacState(scalars["dim"], scalars["out_dim"], scalars["beta2"], scalars["rho"])
    elif kind == "foof":
        state = FoofState(scalars["dim"], scalars["out_dim"], scalars["beta2"], scalars["rho"])
    elif kind == "eva":
        state = EvaState(scalars["dim"], scalars["out_dim"], scalars["beta2"], scalars["rho"])
    elif kind == "attn_mac":
        state = attn_stats.AttnCurvState(scalars["dim"], scalars["beta2"], damping,
                                         scalars["floor"])
    else:
        raise CheckpointError(f"unknown curvature state kind {kind!r}")
    state._restore(scalars, tensors)
    return state


# ---------------------------------------------------------------------------
# gradient blocks: map layers onto (out, in) gradient matrices and stats
# ---------------------------------------------------------------------------


class DenseBlock:
    """Linear or conv layer; weight and bias fused via the 1-augmented input."""

    part = "main"

    def __init__(self, layer: Layer):
        if layer.kind == "linear":
            self.w_name, self.b_name = "W", "b"
            self.in_dim = layer.W.shape[1] + 1
            self.out_dim = layer.W.shape[0]
        elif layer.kind == "conv":
            self.w_name, self.b_name = "kernel", "bias"
            oc, ic, kh, kw = layer.kernel.shape
            self.in_dim = ic * kh * kw + 1
            self.out_dim = oc
        else:
            raise ConfigError(f"unsupported layer kind {layer.kind}")

    def grad(self, layer: Layer) -> np.ndarray:
        g = layer.grads()
        w = g[self.w_name].reshape(self.out_dim, -1)
        return np.hstack([w, g[self.b_name][:, None]])

    def scatter(self, layer: Layer, g_hat: np.ndarray) -> dict[str, np.ndarray]:
        w_shape = layer.params()[self.w_name].shape
        return {self.w_name: g_hat[:, :-1].reshape(w_shape), self.b_name: g_hat[:, -1]}

    def a_rows(self, stats: BatchStats) -> np.ndarray:
        if stats.a_rows is None:
            raise StateError("no captured activations for this step")
        return augment_ones(stats.a_rows)

    def p_rows(self, stats: BatchStats) -> np.ndarray:
        if stats.p_rows is None:
            raise StateError("no captured pre-activation gradients for this step")
        return stats.p_rows


class AttnQkvBlock:
    """Fused QKV projection; gradient exposed in (3d, d) out-by-in layout."""

    part = "qkv"

    def __init__(self, layer: Attention):
        self.in_dim = layer.dim
        self.out_dim = 3 * layer.dim

    def grad(self, layer: Attention) -> np.ndarray:
        return layer.grads()["W_qkv"].T

    def scatter(self, layer: Attention, g_hat: np.ndarray) -> dict[str, np.ndarray]:
        return {"W_qkv": g_hat.T}

    def a_rows(self, stats: BatchStats) -> np.ndarray:
        if stats.a_rows is None:
            raise StateError("no captured activations for this step")
        return stats.a_rows

    def p_rows(self, stats: BatchStats) -> np.ndarray:
        if stats.qkv_grad_rows is None:
            raise StateError("no captured projection gradients for this step")
        return stats.qkv_grad_rows


class AttnOutBlock:
    """Output projection, treated as a plain linear layer without bias."""

    part = "out"

    def __init__(self, layer: Attention):
        self.in_dim = layer.dim
        self.out_dim = layer.dim

    def grad(self, layer: Attention) -> np.ndarray:
        return layer.grads()["W_out"].T

    def scatter(self, layer: Attention, g_hat: np.ndarray) -> dict[str, np.ndarray]:
        return {"W_out": g_hat.T}

    def a_rows(self, stats: BatchStats) -> np.ndarray:
        if stats.out_in_rows is None:
            raise StateError("no captured activations for this step")
        return stats.out_in_rows

    def p_rows(self, stats: BatchStats) -> np.ndarray:
        if stats.out_grad_rows is None:
            raise StateError("no captured output gradients for this step")
        return stats.out_grad_rows


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

OPTIMIZER_NAMES = ("mac", "smac", "kfac", "foof", "eva", "sgd", "adamw")


@dataclass
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    ema_beta2: float = 0.95
    damping: float | str = 1.0
    tau_cov: int = 5
    tau_inv: int = 50
    weight_decay: float = 0.0
    decoupled_wd: bool = False
    precompute_first_layer: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.name not in OPTIMIZER_NAMES:
            raise ConfigError(f"unknown optimizer {self.name!r}; choose from {OPTIMIZER_NAMES}")
        if isinstance(self.damping, str) and self.damping != "adaptive":
            raise ConfigError("damping must be a float or 'adaptive'")
        if self.tau_cov < 1 or self.tau_inv < 1:
            raise ConfigError("tau_cov and tau_inv must be >= 1")
        if not 0.0 <= self.ema_beta2 < 1.0:
            raise ConfigError("ema_beta2 must lie in [0, 1)")


class _VelocityMixin:
    def _init_velocities(self, model: Model) -> None:
        self.velocity = {k: np.zeros_like(p) for k, p in model.params().items()}

    def _apply(self, model: Model, key: str, layer: Layer, name: str, g_hat: np.ndarray) -> None:
        p = getattr(layer, name)
        new_p, self.velocity[key] = apply_update(
            p, g_hat, self.velocity[key], self.cfg.lr * self.lr_scale, self.cfg.momentum,
            self.cfg.weight_decay, self.cfg.decoupled_wd,
        )
        p[...] = new_p


class SgdOptimizer(_VelocityMixin):
    """Momentum SGD; the degenerate identity preconditioner."""

    def __init__(self, model: Model, cfg: OptimizerConfig):
        self.cfg = cfg
        self.lr_scale = 1.0
        self._init_velocities(model)

    def needs_capture(self, step_idx: int) -> bool:
        return False

    def step(self, model: Model, step_idx: int) -> None:
        for i, layer in model.trainable_layers():
            for name, g in layer.grads().items():
                self._apply(model, f"{i}.{name}", layer, name, g)

    def state_bytes(self) -> dict[str, int]:
        return {}

    def states(self) -> dict[str, object]:
        return {}


class AdamWOptimizer:
    """Decoupled-weight-decay Adam baseline."""

    def __init__(self, model: Model, cfg: OptimizerConfig):
        self.cfg = cfg
        self.lr_scale = 1.0
        self.m = {k: np.zeros_like(p) for k, p in model.params().items()}
        self.v = {k: np.zeros_like(p) for k, p in model.params().items()}
        self.t = 0

    def needs_capture(self, step_idx: int) -> bool:
        return False

    def step(self, model: Model, step_idx: int) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        for i, layer in model.trainable_layers():
            for name, g in layer.grads().items():
                key = f"{i}.{name}"
                self.m[key] = b1 * self.m[key] + (1 - b1) * g
                self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
                m_hat = self.m[key] / (1 - b1 ** self.t)
                v_hat = self.v[key] / (1 - b2 ** self.t)
                p = getattr(layer, name)
                lr = cfg.lr * self.lr_scale
                p[...] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps) - lr * cfg.weight_decay * p

    def state_bytes(self) -> dict[str, int]:
        return {}

    def states(self) -> dict[str, object]:
        return {}


class CurvatureOptimizer(_VelocityMixin):
    """Shared schedule/bookkeeping for mac, smac, kfac, foof and eva.

    Statistics are refreshed on steps divisible by tau_cov and the cached
    inverse factors on steps divisible by tau_inv (step indices start at 1,
    so nothing happens before the first full period; until the first rebuild
    the preconditioner is the identity).
    """

    def __init__(self, model: Model, cfg: OptimizerConfig):
        cfg.validate()
        self.cfg = cfg
        self.lr_scale = 1.0
        self._init_velocities(model)
        self.blocks: list[tuple[int, Layer, object, object]] = []
        for i, layer in model.trainable_layers():
            if isinstance(layer, Attention):
                qkv = AttnQkvBlock(layer)
                out = AttnOutBlock(layer)
                self.blocks.append((i, layer, qkv, self._make_state(qkv, attention=True)))
                self.blocks.append((i, layer, out, self._make_state(out, attention=False)))
            else:
                block = DenseBlock(layer)
                self.blocks.append((i, layer, block, self._make_state(block, attention=False)))

    def _make_state(self, block, attention: bool):
        cfg = self.cfg
        name = cfg.name
        if name == "mac":
            if attention:
                return attn_stats.AttnCurvState(block.in_dim, cfg.ema_beta2, cfg.damping)
            return MacState(block.in_dim, cfg.ema_beta2, cfg.damping)
        if name == "smac":
            if attention:
                # the fused projection keeps the attention-aware rank-1 rule;
                # no diagonal factor is defined for it
                return attn_stats.AttnCurvState(block.in_dim, cfg.ema_beta2, cfg.damping)
            return SmacState(block.in_dim, block.out_dim, cfg.ema_beta2, cfg.damping)
        if name == "kfac":
            return KfacState(block.in_dim, block.out_dim, cfg.ema_beta2, cfg.damping)
        if name == "foof":
            return FoofState(block.in_dim, block.out_dim, cfg.ema_beta2, cfg.damping)
        if name == "eva":
            return EvaState(block.in_dim, block.out_dim, cfg.ema_beta2, cfg.damping)
        raise ConfigError(f"not a curvature optimizer: {name!r}")

    def needs_capture(self, step_idx: int) -> bool:
        return step_idx % self.cfg.tau_cov == 0

    def prime_first_layer(self, dataset_mean_rows: np.ndarray) -> None:
        """Optional precomputed input-layer factor from the dataset mean."""
        if not self.blocks:
            return
        _, layer, block, state = self.blocks[0]
        if not isinstance(state, MacState):
            raise ConfigError("precomputed first-layer factor applies to mac/smac only")
        rows = augment_ones(dataset_mean_rows.reshape(1, -1)) if getattr(
            block, "part", "main") == "main" else dataset_mean_rows.reshape(1, -1)
        a0 = rows.ravel()
        rho = state.damping if isinstance(state.damping, float) else state.floor
        state.factor = build_mac_factor(a0, rho)
        state.rho = rho
        state.frozen = True

    def step(self, model: Model, step_idx: int) -> None:
        update_stats = step_idx % self.cfg.tau_cov == 0
        rebuild = step_idx % self.cfg.tau_inv == 0
        for i, layer, block, state in self.blocks:
            if update_stats:
                state.update_stats(layer.stats, block)
            if rebuild:
                state.rebuild()
            g_hat = state.precondition(block.grad(layer), layer.stats)
            for name, g in block.scatter(layer, g_hat).items():
                self._apply(model, f"{i}.{name}", layer, name, g)

    def state_bytes(self) -> dict[str, int]:
        return {f"{i}.{block.part}": state.state_bytes()
                for i, _, block, state in self.blocks}

    def states(self) -> dict[str, object]:
        return {f"{i}.{block.part}": state for i, _, block, state in self.blocks}

    def load_states(self, payloads: dict[str, bytes]) -> None:
        for blk_key, state in self.states().items():
            if blk_key not in payloads:
                raise CheckpointError(f"checkpoint missing curvature section for {blk_key}")
            restored = state_from_payload(payloads[blk_key])
            if restored.kind != state.kind:
                raise CheckpointError(
                    f"curvature state {blk_key!r} holds {restored.kind!r} statistics, "
                    f"incompatible with a {state.kind!r} run"
                )
        for idx, (i, layer, block, _) in enumerate(self.blocks):
            restored = state_from_payload(payloads[f"{i}.{block.part}"])
            self.blocks[idx] = (i, layer, block, restored)


def make_optimizer(model: Model, cfg: OptimizerConfig):
    cfg.validate()
    if cfg.name == "sgd":
        return SgdOptimizer(model, cfg)
    if cfg.name == "adamw":
        return AdamWOptimizer(model, cfg)
    return CurvatureOptimizer(model, cfg)
