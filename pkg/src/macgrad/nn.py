"""Layers, forward/backward passes, and statistic capture.

The model is a stack of layers with hand-written reverse-mode gradients.
Backward propagates the gradient of the *mean* batch loss; wherever a
per-example quantity is captured for curvature estimation (pre-activation
gradients, attention score gradients) it is rescaled by the batch size so
that stored statistics refer to per-example losses.

Captured quantities per layer live in :class:`BatchStats`:

* ``a_rows``   input rows, one per example (or per example x position for
  convolutions, per token for attention), without the bias coordinate;
* ``p_rows``   per-example gradients of the loss w.r.t. pre-activations;
* attention layers additionally record the token matrix ``x_tokens``, the
  attention scores ``t_heads``, and the score/head-output gradients
  ``delta_r`` / ``delta_h`` together with the fused-projection gradient rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import as_tensor, col2im, conv_out_extent, im2col

__all__ = [
    "BatchStats",
    "Layer",
    "Linear",
    "ReLU",
    "Conv2d",
    "Flatten",
    "Reshape",
    "MeanPoolTokens",
    "Attention",
    "Model",
    "softmax",
    "cross_entropy_loss",
    "squared_loss",
    "loss_and_grad",
    "attention_grad_wq",
    "attention_grad_wk",
    "attention_grad_wv",
    "build_model",
    "finite_difference_grads",
    "augment_ones",
]


def augment_ones(rows: np.ndarray) -> np.ndarray:
    """Append the constant-1 bias coordinate to each row."""
    rows = np.asarray(rows, dtype=np.float64)
    return np.hstack([rows, np.ones((rows.shape[0], 1))])


@dataclass
class BatchStats:
    """Per-layer quantities captured during one forward/backward pass."""

    a_rows: np.ndarray | None = None
    p_rows: np.ndarray | None = None
    has_bias: bool = False
    # attention only
    x_tokens: np.ndarray | None = None      # (B, N, d)
    t_heads: np.ndarray | None = None       # (B, H, N, N), rows sum to 1
    delta_r: np.ndarray | None = None       # (B, H, N, N) grad wrt raw Q K^T
    delta_h: np.ndarray | None = None       # (B, H, N, d_k) grad wrt head output
    qkv_grad_rows: np.ndarray | None = None  # (B*N, 3d) per-token grad wrt Z
    out_in_rows: np.ndarray | None = None    # (B*N, d) tokens feeding W_out
    out_grad_rows: np.ndarray | None = None  # (B*N, d) per-token grad wrt output


class Layer:
    """Base layer; stateless layers only implement forward/backward."""

    kind = "stateless"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, capture: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / in_features)
        self.W = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.b = np.zeros(out_features)
        self._x: np.ndarray | None = None
        self._gW: np.ndarray | None = None
        self._gb: np.ndarray | None = None
        self.stats = BatchStats(has_bias=True)

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self._gW, "b": self._gb}

    def forward(self, x, capture):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.W.shape[1]:
            raise DimensionError(f"linear expects (B, {self.W.shape[1]}), got {x.shape}")
        self._x = x
        self.stats = BatchStats(has_bias=True)
        if capture:
            self.stats.a_rows = x
        return x @ self.W.T + self.b

    def backward(self, g):
        if self._x is None:
            raise StateError("linear backward called before forward")
        x = self._x
        self._gW = g.T @ x
        self._gb = g.sum(axis=0)
        if self.stats.a_rows is not None:
            self.stats.p_rows = g * g.shape[0]
        return g @ self.W

    def output_shape(self, in_shape):
        return (self.W.shape[0],)


class ReLU(Layer):
    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x, capture):
        x = as_tensor(x)
        # derivative at exactly 0 is taken as 0 (strict inequality)
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        if self._mask is None:
            raise StateError("relu backward called before forward")
        return g * self._mask

    def output_shape(self, in_shape):
        return in_shape


class Conv2d(Layer):
    kind = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        padding: int,
        rng: np.random.Generator,
    ):
        fan_in = in_channels * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.kernel = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel, kernel))
        self.bias = np.zeros(out_channels)
        self.stride = stride
        self.padding = padding
        self._cols: np.ndarray | None = None
        self._in_shape: tuple[int, int, int, int] | None = None
        self._gk: np.ndarray | None = None
        self._gb: np.ndarray | None = None
        self.stats = BatchStats(has_bias=True)

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def grads(self):
        return {"kernel": self._gk, "bias": self._gb}

    def forward(self, x, capture):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.kernel.shape[1]:
            raise DimensionError(f"conv2d expects (B, {self.kernel.shape[1]}, H, W), got {x.shape}")
        oc, ic, kh, kw = self.kernel.shape
        self._in_shape = x.shape
        cols = im2col(x, kh, kw, self.stride, self.padding)
        self._cols = cols
        self.stats = BatchStats(has_bias=True)
        if capture:
            self.stats.a_rows = cols
        out_h = conv_out_extent(x.shape[2], kh, self.stride, self.padding)
        out_w = conv_out_extent(x.shape[3], kw, self.stride, self.padding)
        z = cols @ self.kernel.reshape(oc, -1).T + self.bias
        return z.reshape(x.shape[0], out_h, out_w, oc).transpose(0, 3, 1, 2)

    def backward(self, g):
        if self._cols is None or self._in_shape is None:
            raise StateError("conv2d backward called before forward")
        oc, ic, kh, kw = self.kernel.shape
        b = g.shape[0]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        self._gk = (gmat.T @ self._cols).reshape(self.kernel.shape)
        self._gb = gmat.sum(axis=0)
        if self.stats.a_rows is not None:
            # one "example" per spatial position; rescale to per-example losses
            self.stats.p_rows = gmat * b
        gcols = gmat @ self.kernel.reshape(oc, -1)
        return col2im(gcols, self._in_shape, kh, kw, self.stride, self.padding)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        oc, ic, kh, kw = self.kernel.shape
        return (oc, conv_out_extent(h, kh, self.stride, self.padding),
                conv_out_extent(w, kw, self.stride, self.padding))


class Flatten(Layer):
    def __init__(self):
        self._shape: tuple[int, ...] | None = None

    def forward(self, x, capture):
        x = as_tensor(x)
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        if self._shape is None:
            raise StateError("flatten backward called before forward")
        return g.reshape(self._shape)

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Reshape(Layer):
    """Reshape per-example features, e.g. flat vectors into (tokens, dim)."""

    def __init__(self, target: tuple[int, ...]):
        self.target = tuple(int(t) for t in target)
        self._shape: tuple[int, ...] | None = None

    def forward(self, x, capture):
        x = as_tensor(x)
        self._shape = x.shape
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, g):
        if self._shape is None:
            raise StateError("reshape backward called before forward")
        return g.reshape(self._shape)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.target)):
            raise ConfigError(f"cannot reshape {in_shape} into {self.target}")
        return self.target


class MeanPoolTokens(Layer):
    """Average over the token axis: (B, N, d) -> (B, d)."""

    def __init__(self):
        self._n: int | None = None

    def forward(self, x, capture):
        x = as_tensor(x)
        if x.ndim != 3:
            raise DimensionError(f"mean_pool expects (B, N, d), got {x.shape}")
        self._n = x.shape[1]
        return x.mean(axis=1)

    def backward(self, g):
        if self._n is None:
            raise StateError("mean_pool backward called before forward")
        return np.repeat(g[:, None, :], self._n, axis=1) / self._n

    def output_shape(self, in_shape):
        return (in_shape[1],)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis, max-subtracted for stability."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rows_backward(t: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    # closed-form softmax Jacobian action: T (.) (g - rowsum(g (.) T))
    inner = (g_t * t).sum(axis=-1, keepdims=True)
    return t * (g_t - inner)


class Attention(Layer):
    """Multi-head self-attention with a fused QKV projection.

    Weight layout follows z = x @ W_qkv with W_qkv of shape (d, 3d); the
    query/key/value blocks are the column ranges [0, d), [d, 2d), [2d, 3d).
    The output projection W_out is (d, d).  Neither projection carries a bias.
    """

    kind = "attention"

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.d_k = dim // heads
        self.W_qkv = rng.normal(0.0, 0.02, size=(dim, 3 * dim))
        self.W_out = rng.normal(0.0, 0.02, size=(dim, dim))
        self._cache: dict | None = None
        self._gqkv: np.ndarray | None = None
        self._gout: np.ndarray | None = None
        self.stats = BatchStats(has_bias=False)

    def params(self):
        return {"W_qkv": self.W_qkv, "W_out": self.W_out}

    def grads(self):
        return {"W_qkv": self._gqkv, "W_out": self._gout}

    def _split_heads(self, m: np.ndarray) -> np.ndarray:
        b, n, _ = m.shape
        return m.reshape(b, n, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def _merge_heads(self, m: np.ndarray) -> np.ndarray:
        b, h, n, dk = m.shape
        return m.transpose(0, 2, 1, 3).reshape(b, n, h * dk)

    def forward(self, x, capture):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise DimensionError(f"attention expects (B, N, {self.dim}), got {x.shape}")
        d = self.dim
        z = x @ self.W_qkv
        q = self._split_heads(z[:, :, :d])
        k = self._split_heads(z[:, :, d:2 * d])
        v = self._split_heads(z[:, :, 2 * d:])
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.d_k)
        t = softmax(scores)
        heads_out = t @ v
        o = self._merge_heads(heads_out)
        y = o @ self.W_out
        self._cache = {"x": x, "q": q, "k": k, "v": v, "t": t, "o": o}
        self.stats = BatchStats(has_bias=False)
        if capture:
            self.stats.x_tokens = x
            self.stats.t_heads = t
        return y

    def backward(self, g):
        if self._cache is None:
            raise StateError("attention backward called before forward")
        c = self._cache
        x, q, k, v, t, o = c["x"], c["q"], c["k"], c["v"], c["t"], c["o"]
        batch = g.shape[0]
        d = self.dim

        self._gout = np.einsum("bnd,bne->de", o, g)
        g_o = g @ self.W_out.T
        g_heads = self._split_heads(g_o)

        g_t = g_heads @ v.transpose(0, 1, 3, 2)
        g_v = t.transpose(0, 1, 3, 2) @ g_heads
        g_scores = _softmax_rows_backward(t, g_t)
        # gradient w.r.t. the raw product Q K^T (scaling factor folded in), so
        # that dL/dW_q = X^T delta_R K holds with the actual K
        g_raw = g_scores / np.sqrt(self.d_k)
        g_q = g_raw @ k
        g_k = g_raw.transpose(0, 1, 3, 2) @ q

        g_z = np.concatenate(
            [self._merge_heads(g_q), self._merge_heads(g_k), self._merge_heads(g_v)], axis=2
        )
        self._gqkv = np.einsum("bnd,bne->de", x, g_z)

        if self.stats.x_tokens is not None:
            self.stats.delta_r = g_raw * batch
            self.stats.delta_h = g_heads * batch
            self.stats.qkv_grad_rows = g_z.reshape(-1, 3 * d) * batch
            self.stats.out_in_rows = o.reshape(-1, d)
            self.stats.out_grad_rows = g.reshape(-1, d) * batch
            self.stats.a_rows = x.reshape(-1, d)
            self.stats.p_rows = self.stats.qkv_grad_rows
        return g_z @ self.W_qkv.T

    def output_shape(self, in_shape):
        return in_shape


# ---------------------------------------------------------------------------
# attention backprop closed forms, exposed for identity tests
# ---------------------------------------------------------------------------


def attention_grad_wq(x: np.ndarray, delta_r: np.ndarray, k: np.ndarray) -> np.ndarray:
    """X^T Delta_R K, the query-projection gradient for one example/head."""
    x, delta_r, k = as_tensor(x), as_tensor(delta_r), as_tensor(k)
    n = x.shape[0]
    if delta_r.shape != (n, n) or k.shape[0] != n:
        raise DimensionError(
            f"expected X (N,d), Delta_R (N,N), K (N,d_k); got {x.shape}, {delta_r.shape}, {k.shape}"
        )
    return x.T @ delta_r @ k


def attention_grad_wk(x: np.ndarray, delta_r: np.ndarray, q: np.ndarray) -> np.ndarray:
    """X^T Delta_R^T Q, the key-projection gradient."""
    return as_tensor(x).T @ as_tensor(delta_r).T @ as_tensor(q)


def attention_grad_wv(x: np.ndarray, t: np.ndarray, delta_h: np.ndarray) -> np.ndarray:
    """X^T T^T Delta_H, the value-projection gradient."""
    return as_tensor(x).T @ as_tensor(t).T @ as_tensor(delta_h)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy; returns (loss, grad of mean loss wrt logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    b = logits.shape[0]
    probs = softmax(logits)
    picked = probs[np.arange(b), labels.astype(np.int64)]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs.copy()
    grad[np.arange(b), labels.astype(np.int64)] -= 1.0
    return loss, grad / b


def squared_loss(u: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Half mean squared error; grad of the mean loss wrt predictions."""
    u = as_tensor(u)
    y = as_tensor(y).reshape(u.shape)
    b = u.shape[0]
    diff = u - y
    return float(0.5 * np.sum(diff * diff) / b), diff / b


def loss_and_grad(logits: np.ndarray, targets: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    if kind == "cross_entropy":
        return cross_entropy_loss(logits, targets)
    if kind == "squared":
        return squared_loss(logits, targets)
    raise ConfigError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._forward_done = False

    def forward(self, x: np.ndarray, capture: bool = False) -> np.ndarray:
        x = as_tensor(x)
        if x.shape[0] == 0:
            raise DimensionError("empty batch")
        for layer in self.layers:
            x = layer.forward(x, capture)
        self._forward_done = True
        return x

    def backward(self, logits: np.ndarray, targets: np.ndarray, loss_kind: str) -> float:
        """Compute the mean loss and backpropagate through all layers."""
        if not self._forward_done:
            raise StateError("backward called without a matching forward")
        loss, g = loss_and_grad(logits, targets, loss_kind)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._forward_done = False
        return loss

    def trainable_layers(self) -> list[tuple[int, Layer]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.params()]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in self.trainable_layers():
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def set_param(self, key: str, value: np.ndarray) -> None:
        idx, name = key.split(".", 1)
        layer = self.layers[int(idx)]
        getattr(layer, name)[...] = value

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in self.trainable_layers():
            for name, g in layer.grads().items():
                out[f"{i}.{name}"] = g
        return out


_NEEDS_RNG = {"linear", "conv2d", "attention"}


def build_model(model_cfg: dict, seed: int) -> Model:
    """Instantiate a model from the declarative layer-list config."""
    if "input" not in model_cfg or "layers" not in model_cfg:
        raise ConfigError("model config requires 'input' and 'layers'")
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in model_cfg["input"])
    layers: list[Layer] = []
    for pos, spec in enumerate(model_cfg["layers"]):
        spec = dict(spec)
        ltype = spec.pop("type", None)
        if ltype == "linear":
            if len(shape) != 1:
                raise ConfigError(f"layer {pos}: linear needs flat input, have {shape}")
            layer = Linear(shape[0], int(spec.pop("out")), rng)
        elif ltype == "relu":
            layer = ReLU()
        elif ltype == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"layer {pos}: conv2d needs (C, H, W) input, have {shape}")
            layer = Conv2d(
                shape[0],
                int(spec.pop("out_channels")),
                int(spec.pop("kernel")),
                int(spec.pop("stride", 1)),
                int(spec.pop("padding", 0)),
                rng,
            )
        elif ltype == "flatten":
            layer = Flatten()
        elif ltype == "reshape":
            layer = Reshape(tuple(spec.pop("target")))
        elif ltype == "attention":
            if len(shape) != 2:
                raise ConfigError(f"layer {pos}: attention needs (N, d) input, have {shape}")
            layer = Attention(shape[1], int(spec.pop("heads", 1)), rng)
        elif ltype == "mean_pool":
            layer = MeanPoolTokens()
        else:
            raise ConfigError(f"layer {pos}: unknown layer type {ltype!r}")
        if spec:
            raise ConfigError(f"layer {pos} ({ltype}): unknown keys {sorted(spec)}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return Model(layers=layers, input_shape=tuple(int(s) for s in model_cfg["input"]),
                 config=model_cfg)


def finite_difference_grads(
    model: Model,
    x: np.ndarray,
    targets: np.ndarray,
    loss_kind: str,
    h: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference gradients of the mean loss w.r.t. every parameter."""

    def loss_value() -> float:
        logits = model.forward(x, capture=False)
        value, _ = loss_and_grad(logits, targets, loss_kind)
        model._forward_done = False
        return value

    out = {}
    for key, p in model.params().items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_value()
            flat[j] = orig - h
            down = loss_value()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        out[key] = g
    return out
