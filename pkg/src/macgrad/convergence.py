"""Desk-scale contraction harness for the two-layer ReLU network.

The network is f(x) = (1/sqrt(m)) sum_r q_r relu(w_r^T x) with the output
weights q_r drawn once from Unif(-1, 1) and frozen.  Training uses the
rank-1-plus-damping natural-gradient step

    W <- W - eta * G (x_bar x_bar^T + rho I)^{-1}

with the inverse applied through the Sherman-Morrison identity.  The harness
estimates the limiting kernel Gram matrix by Monte Carlo, runs the update for
a number of iterations, and checks the predicted per-step contraction factor,
the weight-drift bound, and the Jacobian-drift condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import sym_eig

__all__ = [
    "TwoLayerNet",
    "make_dataset",
    "gram_sigma_inf",
    "gram_closed_form",
    "mac_ngd_step",
    "ConvergenceTrace",
    "run_harness",
    "verify_theorem1",
    "convergence_factor_compare",
]


@dataclass
class TwoLayerNet:
    w: np.ndarray  # (m, d) hidden weights, rows w_r
    q: np.ndarray  # (m,) frozen output weights in (-1, 1)

    @classmethod
    def init(cls, m: int, d: int, rng: np.random.Generator) -> "TwoLayerNet":
        return cls(w=rng.standard_normal((m, d)), q=rng.uniform(-1.0, 1.0, m))

    @property
    def m(self) -> int:
        return self.w.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.w.T
        return np.maximum(z, 0.0) @ self.q / np.sqrt(self.m)

    def tangent_rows(self, x: np.ndarray) -> np.ndarray:
        """S with rows s_i = (1/sqrt(m)) q (.) 1(w_r^T x_i > 0); J = X *r S."""
        active = (x @ self.w.T) > 0.0  # derivative at the kink is 0
        return active * self.q / np.sqrt(self.m)


def make_dataset(n: int, d: int, seed: int,
                 parallel_tol: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm rows, pairwise non-parallel, targets in [-1, 1]."""
    rng = np.random.default_rng(seed)
    rows: list[np.ndarray] = []
    attempts = 0
    while len(rows) < n:
        attempts += 1
        if attempts > 100 * n:
            raise RuntimeError("rejection sampling failed to produce non-parallel rows")
        v = rng.standard_normal(d)
        nrm = np.linalg.norm(v)
        if nrm < 1e-12:
            continue
        v = v / nrm
        if any(abs(float(v @ u)) > 1.0 - parallel_tol for u in rows):
            continue
        rows.append(v)
    x = np.stack(rows)
    y = rng.uniform(-1.0, 1.0, n)
    return x, y


def gram_sigma_inf(
    x: np.ndarray, mc_samples: int, seed: int = 0, chunk: int = 20000
) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimate of the limiting Gram matrix and its standard error.

    Sigma_ij = E_w[x_i^T x_j 1(w^T x_i >= 0, w^T x_j >= 0)] over w ~ N(0, I).
    Returns (estimate, elementwise standard error).
    """
    x = np.asarray(x, dtype=np.float64)
    if mc_samples < 1000:
        import warnings

        warnings.warn("fewer than 1000 Monte-Carlo samples; estimate will be noisy")
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    gram_x = x @ x.T
    count = np.zeros((n, n))
    done = 0
    while done < mc_samples:
        take = min(chunk, mc_samples - done)
        w = rng.standard_normal((take, x.shape[1]))
        active = (w @ x.T) >= 0.0
        count += active.T.astype(np.float64) @ active.astype(np.float64)
        done += take
    p_hat = count / mc_samples
    sigma = gram_x * p_hat
    se = np.abs(gram_x) * np.sqrt(np.maximum(p_hat * (1.0 - p_hat), 0.0) / mc_samples)
    return sigma, se


def gram_closed_form(x: np.ndarray) -> np.ndarray:
    """Sigma_ij = x_i^T x_j (pi - theta_ij) / (2 pi) for unit-norm rows."""
    x = np.asarray(x, dtype=np.float64)
    gram_x = x @ x.T
    theta = np.arccos(np.clip(gram_x, -1.0, 1.0))
    return gram_x * (np.pi - theta) / (2.0 * np.pi)


def mac_ngd_step(net: TwoLayerNet, x: np.ndarray, y: np.ndarray,
                 eta: float, rho: float) -> float:
    """One preconditioned step; returns the pre-step squared residual.

    The gradient direction is J^T (u - y) reshaped to the weight matrix, then
    right-multiplied by (x_bar x_bar^T + rho I)^{-1} expanded via
    Sherman-Morrison, so cost stays linear in the weight count.
    """
    u = net.forward(x)
    r = u - y
    s = net.tangent_rows(x)
    g = (s * r[:, None]).T @ x  # (m, d)
    x_bar = x.mean(axis=0)
    denom = rho + float(x_bar @ x_bar)
    step = (g - np.outer(g @ x_bar, x_bar) / denom) / rho
    net.w -= eta * step
    return float(r @ r)


@dataclass
class ConvergenceTrace:
    residual_sq: list[float] = field(default_factory=list)
    contraction_factor: float = 1.0
    weight_drift: list[float] = field(default_factory=list)
    jacobian_drift: list[float] = field(default_factory=list)
    lambda_gamma: float = 0.0
    lambda_min_gram: float = 0.0
    lambda_max_xtx: float = 0.0
    lambda_min_xtx: float = 0.0
    mean_norm_sq: float = 0.0
    eta: float = 0.0
    rho: float = 0.0
    m: int = 0


def _spec_norm_sym(a: np.ndarray) -> float:
    return float(np.max(np.abs(sym_eig(a).eigenvalues)))


def run_harness(
    m: int,
    n: int,
    d: int,
    rho: float,
    iters: int,
    seed: int,
    mc_samples: int = 100_000,
    eta_multiplier: float = 0.1,
    eta: float | None = None,
) -> ConvergenceTrace:
    """Train the two-layer net and record everything the theorem talks about.

    When ``eta`` is not given it is set to
    eta_multiplier * rho / (lambda_max(X^T X) * lambda_gamma_hat), with
    lambda_gamma_hat a conservative estimate (Monte-Carlo minimum eigenvalue
    minus two standard errors in Frobenius aggregate).
    """
    x, y = make_dataset(n, d, seed)
    # decorrelate the weight draw from the dataset draw
    net = TwoLayerNet.init(m, d, np.random.default_rng(seed + 1_000_003))

    sigma, se = gram_sigma_inf(x, mc_samples, seed=seed + 2_000_003)
    lambda_min_gram = float(sym_eig(0.5 * (sigma + sigma.T)).eigenvalues[-1])
    lambda_gamma = max(lambda_min_gram - 2.0 * float(np.linalg.norm(se)), 1e-6)

    xtx_eigs = sym_eig(x.T @ x).eigenvalues
    lambda_max_xtx = float(xtx_eigs[0])
    lambda_min_xtx = float(xtx_eigs[-1])
    x_bar = x.mean(axis=0)
    mean_norm_sq = float(x_bar @ x_bar)

    if eta is None:
        eta = eta_multiplier * rho / (lambda_max_xtx * lambda_gamma)
    factor = 1.0 - eta * lambda_gamma * lambda_min_xtx / (2.0 * (mean_norm_sq + rho))

    w0 = net.w.copy()
    s0 = net.tangent_rows(x)
    gram_x = x @ x.T

    trace = ConvergenceTrace(
        contraction_factor=factor,
        lambda_gamma=lambda_gamma,
        lambda_min_gram=lambda_min_gram,
        lambda_max_xtx=lambda_max_xtx,
        lambda_min_xtx=lambda_min_xtx,
        mean_norm_sq=mean_norm_sq,
        eta=eta,
        rho=rho,
        m=m,
    )
    for _ in range(iters):
        res_sq = mac_ngd_step(net, x, y, eta, rho)
        trace.residual_sq.append(res_sq)
        trace.weight_drift.append(float(np.linalg.norm(net.w - w0)))
        ds = net.tangent_rows(x) - s0
        trace.jacobian_drift.append(float(np.sqrt(max(_spec_norm_sym(gram_x * (ds @ ds.T)), 0.0))))
    final = net.forward(x) - y
    trace.residual_sq.append(float(final @ final))
    return trace


def verify_theorem1(trace: ConvergenceTrace) -> dict:
    """Check the contraction, drift and Jacobian-stability statements.

    Returns fractions instead of asserting, so a caller can both gate on the
    documented thresholds and flag deliberately under-parameterized runs.
    """
    res = np.asarray(trace.residual_sq)
    ratios = res[1:] / np.maximum(res[:-1], 1e-300)
    contraction_ok = ratios <= trace.contraction_factor + 1e-12
    monotone_ok = ratios <= 1.0 + 1e-12

    drift_bound = np.sqrt(trace.lambda_max_xtx) * np.sqrt(res[0]) / trace.lambda_gamma
    drift_ok = np.asarray(trace.weight_drift) <= drift_bound

    sigma_max_x = np.sqrt(trace.lambda_max_xtx)
    implied_c = np.asarray(trace.jacobian_drift) * 2.0 * sigma_max_x / trace.rho
    report = {
        "iterations": int(len(ratios)),
        "contraction_factor": trace.contraction_factor,
        "contraction_frac": float(np.mean(contraction_ok)) if len(ratios) else 1.0,
        "monotone_frac": float(np.mean(monotone_ok)) if len(ratios) else 1.0,
        "weight_drift_bound": float(drift_bound),
        "weight_drift_max": float(np.max(trace.weight_drift)) if trace.weight_drift else 0.0,
        "weight_drift_ok": bool(np.all(drift_ok)),
        "condition2_c_max": float(np.max(implied_c)) if len(implied_c) else 0.0,
        "condition2_ok": bool(np.all(implied_c < 0.5)),
        "final_residual_sq": float(res[-1]),
        "initial_residual_sq": float(res[0]),
    }
    report["violated"] = sorted(
        name
        for name, ok in [
            ("contraction", report["contraction_frac"] >= 0.9),
            ("monotone", report["monotone_frac"] >= 0.95),
            ("weight_drift", report["weight_drift_ok"]),
            ("condition2", report["condition2_ok"]),
        ]
        if not ok
    )
    return report


def convergence_factor_compare(x: np.ndarray) -> tuple[float, float, float]:
    """(|x_bar|^2, lambda_max(X^T X), lambda_min(X^T X)); asserts the identity
    |x_bar|^2 <= lambda_max, which holds because x_bar x_bar^T is a scaled
    compression of X^T X."""
    x = np.asarray(x, dtype=np.float64)
    x_bar = x.mean(axis=0)
    eigs = sym_eig(x.T @ x).eigenvalues
    mean_sq = float(x_bar @ x_bar)
    lam_max, lam_min = float(eigs[0]), float(eigs[-1])
    if mean_sq > lam_max * (1.0 + 1e-10) + 1e-12:
        raise ContractError(f"|x_bar|^2 = {mean_sq} exceeds lambda_max = {lam_max}")
    return mean_sq, lam_max, lam_min


def trace_to_jsonl(trace: ConvergenceTrace, seed: int, path) -> None:
    with open(path, "a", encoding="utf-8") as f:
        summary = {
            "kind": "summary",
            "seed": seed,
            "contraction_factor": trace.contraction_factor,
            "lambda_gamma": trace.lambda_gamma,
            "lambda_max_xtx": trace.lambda_max_xtx,
            "lambda_min_xtx": trace.lambda_min_xtx,
            "mean_norm_sq": trace.mean_norm_sq,
            "eta": trace.eta,
            "rho": trace.rho,
            "m": trace.m,
        }
        f.write(json.dumps(summary, sort_keys=True) + "\n")
        for i, r in enumerate(trace.residual_sq):
            row = {"kind": "iter", "seed": seed, "iter": i, "residual_sq": r}
            if i < len(trace.weight_drift):
                row["weight_drift"] = trace.weight_drift[i]
                row["jacobian_drift"] = trace.jacobian_drift[i]
            f.write(json.dumps(row, sort_keys=True) + "\n")
