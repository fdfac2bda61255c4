import logging

import numpy as np
import pytest

from macgrad.attn_stats import (
    AttnCurvState,
    empirical_fim_attention,
    mean_attention,
    precondition_attn,
    unvec_cols,
    value_statistic,
    vec_cols,
)
from macgrad.nn import Attention, softmax, squared_loss
from macgrad.tensor import dense_solve


def random_stochastic(rng, n):
    return softmax(rng.standard_normal((n, n)))


class TestMeanAttention:
    def test_uniform(self):
        t = np.full((4, 4), 0.25)
        assert np.allclose(mean_attention(t), 0.25)

    def test_identity_scores(self):
        t_bar = mean_attention(np.eye(5))
        assert np.allclose(t_bar, 0.2)

    def test_random_stochastic_sums_to_one(self, rng):
        t = random_stochastic(rng, 5)
        t_bar = mean_attention(t)
        assert abs(t_bar.sum() - 1.0) <= 1e-9
        assert np.allclose(t_bar, t.mean(axis=0))

    def test_nonstochastic_logged_not_raised(self, rng, caplog):
        with caplog.at_level(logging.WARNING, logger="macgrad.attn_stats"):
            mean_attention(np.full((3, 3), 0.9))
        assert any("stochastic" in r.message for r in caplog.records)


class TestValueStatistic:
    def test_identical_tokens(self, rng):
        x = np.tile(rng.standard_normal(4), (6, 1))
        t_bar = mean_attention(random_stochastic(rng, 6))
        assert np.allclose(value_statistic(x, t_bar), x[0], atol=1e-12)

    def test_one_hot_picks_row(self, rng):
        x = rng.standard_normal((5, 3))
        t_bar = np.zeros(5)
        t_bar[2] = 1.0
        assert np.allclose(value_statistic(x, t_bar), x[2])

    def test_matches_loop(self, rng):
        x = rng.standard_normal((6, 4))
        t_bar = mean_attention(random_stochastic(rng, 6))
        loop = sum(t_bar[i] * x[i] for i in range(6))
        assert np.max(np.abs(value_statistic(x, t_bar) - loop)) < 1e-12


class TestAttnState:
    def test_single_example_beta_zero(self, rng):
        state = AttnCurvState(3, beta2=0.0, damping=1.0)
        x = rng.standard_normal((1, 4, 3))
        t = softmax(rng.standard_normal((1, 2, 4, 4)))
        state.update(x, t)
        assert np.allclose(state.x_tilde, x[0].mean(axis=0))
        t_bar = t[0].mean(axis=(0, 1))
        assert np.allclose(state.v_tilde, x[0].T @ t_bar)

    def test_identical_examples_converge(self, rng):
        state = AttnCurvState(3, beta2=0.5, damping=1.0)
        x = rng.standard_normal((1, 4, 3))
        t = softmax(rng.standard_normal((1, 2, 4, 4)))
        for _ in range(60):
            state.update(x, t)
        x_hat, v_hat = state.bias_corrected()
        assert np.allclose(x_hat, x[0].mean(axis=0), atol=1e-12)
        assert np.allclose(v_hat, x[0].T @ t[0].mean(axis=(0, 1)), atol=1e-12)

    def test_multi_head_average_matches_per_head_loop(self, rng):
        state = AttnCurvState(4, beta2=0.0, damping=1.0)
        b, h, n = 3, 2, 5
        x = rng.standard_normal((b, n, 4))
        t = softmax(rng.standard_normal((b, h, n, n)))
        state.update(x, t)
        # per-head loop: v statistic averaged over heads then batch
        acc = np.zeros(4)
        for bi in range(b):
            per_head = np.zeros(4)
            for hi in range(h):
                per_head += x[bi].T @ t[bi, hi].mean(axis=0)
            acc += per_head / h
        assert np.allclose(state.v_tilde, acc / b, atol=1e-12)


class TestPreconditionAttn:
    def test_zero_statistics_identity(self, rng):
        g = rng.standard_normal((9, 3))
        out = precondition_attn(g, np.zeros(3), np.zeros(3), 1.0)
        assert np.allclose(out, g)

    def test_degenerate_equal_statistics(self, rng):
        # uniform attention over identical tokens makes both statistics equal,
        # so all three blocks see the same factor
        d = 3
        x_hat = rng.standard_normal(d)
        g = rng.standard_normal((3 * d, d))
        out = precondition_attn(g, x_hat, x_hat.copy(), 0.7)
        denom = 0.7 + x_hat @ x_hat
        m = np.eye(d) - np.outer(x_hat, x_hat) / denom
        assert np.allclose(out, g @ m, atol=1e-12)

    def test_block_dense_oracle(self, rng):
        d = 4
        rho = 0.33
        x_hat = rng.standard_normal(d)
        v_hat = rng.standard_normal(d)
        g = rng.standard_normal((3 * d, d))
        out = precondition_attn(g, x_hat, v_hat, rho)

        def damped_inv(v):
            return rho * dense_solve(np.outer(v, v) + rho * np.eye(d), np.eye(d))

        oracle = np.vstack([
            g[:d] @ damped_inv(x_hat),
            g[d:2 * d] @ damped_inv(x_hat),
            g[2 * d:] @ damped_inv(v_hat),
        ])
        assert np.linalg.norm(out - oracle) <= 1e-10

    def test_value_statistic_does_not_touch_qk_blocks(self, rng):
        d = 4
        x_hat = rng.standard_normal(d)
        g = rng.standard_normal((3 * d, d))
        out1 = precondition_attn(g, x_hat, rng.standard_normal(d), 0.5)
        out2 = precondition_attn(g, x_hat, rng.standard_normal(d), 0.5)
        assert np.array_equal(out1[: 2 * d], out2[: 2 * d])
        assert not np.array_equal(out1[2 * d:], out2[2 * d:])


def capture_head_quantities(rng, n=4, d=4, heads=1, scale=25.0):
    """Run a real forward/backward and collect per-head matrices."""
    layer = Attention(d, heads, rng)
    layer.W_qkv *= scale
    layer.W_out *= scale
    x = rng.standard_normal((1, n, d))
    target = rng.standard_normal((1, n, d))
    y = layer.forward(x, capture=True)
    _, g = squared_loss(y.reshape(1, -1), target.reshape(1, -1))
    layer.backward(g.reshape(1, n, d))
    z = x[0] @ layer.W_qkv
    dk = d // heads
    items = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        items.append({
            "x": x[0],
            "q": z[:, :d][:, sl],
            "k": z[:, d:2 * d][:, sl],
            "delta_r": layer.stats.delta_r[0, h],
            "t": layer.stats.t_heads[0, h],
            "delta_h": layer.stats.delta_h[0, h],
        })
    return items


class TestEmpiricalFim:
    def test_vec_kronecker_identity(self, rng):
        # (K^T kron X^T) vec(Delta_R) == vec(X^T Delta_R K)
        for _ in range(5):
            n, d, dk = 5, 4, 2
            x = rng.standard_normal((n, d))
            k = rng.standard_normal((n, dk))
            delta = rng.standard_normal((n, n))
            lhs = np.kron(k.T, x.T) @ vec_cols(delta)
            rhs = vec_cols(x.T @ delta @ k)
            assert np.max(np.abs(lhs - rhs)) <= 1e-10

    def test_zero_delta_gives_zero_matrix(self, rng):
        item = {
            "x": rng.standard_normal((3, 3)),
            "k": rng.standard_normal((3, 3)),
            "q": rng.standard_normal((3, 3)),
            "delta_r": np.zeros((3, 3)),
            "t": np.zeros((3, 3)),
            "delta_h": rng.standard_normal((3, 3)),
        }
        for proj in ("q", "k"):
            assert np.array_equal(empirical_fim_attention([item], proj),
                                  np.zeros((9, 9)))

    def test_single_example_fim_is_rank_one(self, rng):
        items = capture_head_quantities(rng)
        for proj in ("q", "k", "v"):
            fim = empirical_fim_attention(items, proj)
            assert np.linalg.matrix_rank(fim, tol=1e-10) == 1

    @pytest.mark.parametrize("proj", ["q", "k", "v"])
    def test_matches_direct_per_parameter_gradients(self, proj, rng):
        # direct route: assemble dL/dW entrywise from the chain rule with
        # explicit loops, then take the outer product of its vectorization
        items = capture_head_quantities(rng, n=4, d=4, heads=2)
        fim = empirical_fim_attention(items, proj)
        direct = np.zeros_like(fim)
        for item in items:
            x, dr, t, dh = item["x"], item["delta_r"], item["t"], item["delta_h"]
            k, q = item["k"], item["q"]
            n, d = x.shape
            dk = k.shape[1]
            g = np.zeros((d, dk))
            for r in range(d):
                for c in range(dk):
                    total = 0.0
                    for i in range(n):
                        for j in range(n):
                            if proj == "q":
                                total += dr[i, j] * x[i, r] * k[j, c]
                            elif proj == "k":
                                total += dr[i, j] * x[j, r] * q[i, c]
                            else:
                                total += t[i, j] * x[j, r] * dh[i, c]
                    g[r, c] = total
            gv = vec_cols(g)
            direct += np.outer(gv, gv)
        direct /= len(items)
        assert np.max(np.abs(fim - direct)) <= 1e-9

    def test_fim_matches_layer_gradient(self, rng):
        # the vec in the FIM is exactly the captured layer gradient block
        items = capture_head_quantities(rng, n=4, d=4, heads=1)
        item = items[0]
        g_closed = item["x"].T @ item["delta_r"] @ item["k"]
        fim = empirical_fim_attention(items, "q")
        gv = vec_cols(g_closed)
        assert np.allclose(fim, np.outer(gv, gv), atol=1e-9)
        assert np.allclose(unvec_cols(gv, g_closed.shape), g_closed)
