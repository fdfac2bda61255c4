import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macgrad.errors import StateError
from macgrad.nn import (
    Attention,
    Linear,
    Model,
    attention_grad_wq,
    attention_grad_wk,
    attention_grad_wv,
    build_model,
    cross_entropy_loss,
    finite_difference_grads,
    loss_and_grad,
    softmax,
    squared_loss,
)


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_gradients(model, x, y, loss_kind, tol=1e-5):
    logits = model.forward(x, capture=True)
    model.backward(logits, y, loss_kind)
    analytic = {k: g.copy() for k, g in model.grads().items()}
    numeric = finite_difference_grads(model, x, y, loss_kind)
    for key in analytic:
        assert rel_err(analytic[key], numeric[key]) <= tol, key


class TestForward:
    def test_identity_linear(self, rng):
        layer = Linear(2, 2, rng)
        layer.W[...] = np.eye(2)
        layer.b[...] = 0.0
        model = Model([layer], (2,))
        out = model.forward(np.array([[1.0, 2.0]]))
        assert np.allclose(out, [[1.0, 2.0]])

    def test_relu(self, rng):
        model = build_model({"input": [2], "layers": [{"type": "relu"}]}, seed=0)
        assert np.array_equal(model.forward(np.array([[-1.0, 3.0]])), [[0.0, 3.0]])

    def test_attention_identical_rows(self, rng):
        layer = Attention(4, 2, rng)
        x = np.tile(rng.standard_normal(4), (1, 5, 1))  # every token identical
        y = layer.forward(x, capture=True)
        # uniform scores; every output row equals the common projected row
        t = layer.stats.t_heads
        assert np.allclose(t, 1.0 / 5.0, atol=1e-12)
        assert np.allclose(y - y[:, :1, :], 0.0, atol=1e-12)
        assert np.allclose(t.sum(axis=-1), 1.0, atol=1e-9)

    def test_backward_requires_forward(self, rng):
        model = build_model(
            {"input": [3], "layers": [{"type": "linear", "out": 2}]}, seed=0
        )
        with pytest.raises(StateError):
            model.backward(np.zeros((1, 2)), np.zeros(1, dtype=np.int64), "cross_entropy")


class TestLosses:
    def test_squared_zero_at_match(self, rng):
        u = rng.standard_normal((4, 3))
        loss, grad = squared_loss(u, u.copy())
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros_like(u))

    def test_cross_entropy_symmetric_logits(self):
        loss, grad = cross_entropy_loss(np.array([[0.0, 0.0]]), np.array([0]))
        assert np.allclose(grad, [[-0.5, 0.5]])
        assert abs(loss - np.log(2.0)) < 1e-12

    def test_softmax_rows_sum_to_one(self, rng):
        z = rng.standard_normal((6, 9))
        assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)

    @given(st.integers(min_value=0, max_value=2**32 - 1),
           st.floats(min_value=-50, max_value=50))
    @settings(max_examples=30, deadline=None)
    def test_softmax_shift_invariance(self, seed, shift):
        z = np.random.default_rng(seed).standard_normal((3, 5))
        assert np.max(np.abs(softmax(z + shift) - softmax(z))) <= 1e-12


MLP_CFG = {
    "input": [6],
    "layers": [
        {"type": "linear", "out": 5},
        {"type": "relu"},
        {"type": "linear", "out": 3},
    ],
}

CNN_CFG = {
    "input": [2, 6, 6],
    "layers": [
        {"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 2, "padding": 1},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "linear", "out": 4},
    ],
}

ATTN_CFG = {
    "input": [8],
    "layers": [
        {"type": "reshape", "target": [2, 4]},
        {"type": "attention", "heads": 2},
        {"type": "mean_pool"},
        {"type": "linear", "out": 3},
    ],
}


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_mlp_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        model = build_model(MLP_CFG, seed=seed)
        x = rng.standard_normal((4, 6))
        y = rng.integers(0, 3, 4)
        check_gradients(model, x, y, "cross_entropy")

    @pytest.mark.parametrize("seed", range(5))
    def test_mlp_squared(self, seed):
        rng = np.random.default_rng(seed)
        model = build_model(MLP_CFG, seed=seed)
        x = rng.standard_normal((4, 6))
        y = rng.standard_normal((4, 3))
        check_gradients(model, x, y, "squared")

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_net(self, seed):
        rng = np.random.default_rng(seed)
        model = build_model(CNN_CFG, seed=seed)
        x = rng.standard_normal((3, 2, 6, 6))
        y = rng.integers(0, 4, 3)
        check_gradients(model, x, y, "cross_entropy")

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_net(self, seed):
        rng = np.random.default_rng(seed)
        model = build_model(ATTN_CFG, seed=seed)
        # attention init is small; scale up so gradients are well away from
        # the finite-difference noise floor
        for _, layer in model.trainable_layers():
            if isinstance(layer, Attention):
                layer.W_qkv *= 20.0
                layer.W_out *= 20.0
        x = rng.standard_normal((3, 8))
        y = rng.integers(0, 3, 3)
        check_gradients(model, x, y, "cross_entropy")

    def test_batch_gradient_is_mean_of_per_example(self, rng):
        model = build_model(MLP_CFG, seed=7)
        x = rng.standard_normal((6, 6))
        y = rng.integers(0, 3, 6)
        logits = model.forward(x, capture=False)
        model.backward(logits, y, "cross_entropy")
        batch_grads = {k: g.copy() for k, g in model.grads().items()}

        sums = {k: np.zeros_like(g) for k, g in batch_grads.items()}
        for i in range(6):
            logits = model.forward(x[i:i + 1], capture=False)
            model.backward(logits, y[i:i + 1], "cross_entropy")
            for k, g in model.grads().items():
                sums[k] += g
        for k in batch_grads:
            assert rel_err(batch_grads[k], sums[k] / 6.0) < 1e-12


class TestAttentionIdentities:
    def test_zero_delta(self, rng):
        x = rng.standard_normal((4, 3))
        k = rng.standard_normal((4, 2))
        assert np.array_equal(attention_grad_wq(x, np.zeros((4, 4)), k), np.zeros((3, 2)))

    def test_single_token_outer_product(self, rng):
        x = rng.standard_normal((1, 3))
        k = rng.standard_normal((1, 2))
        delta = np.array([[2.5]])
        expected = 2.5 * np.outer(x[0], k[0])
        assert np.allclose(attention_grad_wq(x, delta, k), expected, atol=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_closed_forms_match_finite_differences(self, seed):
        # differentiate the full attention forward numerically w.r.t. each
        # projection and compare against the captured closed forms
        rng = np.random.default_rng(seed)
        n, d, heads = 5, 4, 2
        layer = Attention(d, heads, rng)
        layer.W_qkv *= 30.0
        layer.W_out *= 30.0
        x = rng.standard_normal((1, n, d))
        target = rng.standard_normal((1, n, d))

        y = layer.forward(x, capture=True)
        _, g = squared_loss(y.reshape(1, -1), target.reshape(1, -1))
        layer.backward(g.reshape(1, n, d))
        analytic = layer.grads()["W_qkv"].copy()

        dk = d // heads
        stats = layer.stats
        z = x[0] @ layer.W_qkv
        q_full, k_full = z[:, :d], z[:, d:2 * d]
        closed = np.zeros((d, 3 * d))
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            delta_r = stats.delta_r[0, h]
            closed[:, :d][:, sl] += attention_grad_wq(x[0], delta_r, k_full[:, sl])
            closed[:, d:2 * d][:, sl] += attention_grad_wk(x[0], delta_r, q_full[:, sl])
            closed[:, 2 * d:][:, sl] += attention_grad_wv(
                x[0], stats.t_heads[0, h], stats.delta_h[0, h]
            )
        assert rel_err(closed, analytic) < 1e-12

        def loss_fn():
            out = layer.forward(x, capture=False)
            value, _ = squared_loss(out.reshape(1, -1), target.reshape(1, -1))
            return value

        h_step = 1e-6
        numeric = np.zeros_like(layer.W_qkv)
        flat = layer.W_qkv.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h_step
            up = loss_fn()
            flat[j] = orig - h_step
            down = loss_fn()
            flat[j] = orig
            nflat[j] = (up - down) / (2 * h_step)
        assert rel_err(closed, numeric) < 1e-5


class TestBuilder:
    def test_rejects_unknown_layer_keys(self):
        from macgrad.errors import ConfigError

        with pytest.raises(ConfigError):
            build_model(
                {"input": [4], "layers": [{"type": "linear", "out": 2, "bogus": 1}]}, seed=0
            )

    def test_loss_kind_rejected(self):
        from macgrad.errors import ConfigError

        with pytest.raises(ConfigError):
            loss_and_grad(np.zeros((1, 2)), np.zeros(1), "hinge")
