"""Dense/convolutional network core: forward, backward, loss, ADAM.

Everything runs on plain float32 numpy arrays in NCHW layout. Layers are
immutable specs; parameters live in external dicts so weight transplant and
checkpointing are straightforward dictionary operations. Convolution is
cross-correlation (no kernel flip). All ops are deterministic given their
inputs and RNG, and none mutates its input.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np


class ShapeError(ValueError):
    """Input incompatible with a layer spec; message is expected-vs-actual."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Conv2d:
    """2-D cross-correlation with bias; padding 'same' (TF-style) or 'valid'."""

    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    padding: str = "same"

    def __post_init__(self):
        if min(self.out_channels, self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ValueError(f"conv dims must be positive: {self}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def _geometry(self, h, w):
        kh_eff = (self.kernel_h - 1) * self.dilation + 1
        kw_eff = (self.kernel_w - 1) * self.dilation + 1
        if self.padding == "same":
            ho = -(-h // self.stride)
            wo = -(-w // self.stride)
            pad_h = max((ho - 1) * self.stride + kh_eff - h, 0)
            pad_w = max((wo - 1) * self.stride + kw_eff - w, 0)
        else:
            if h < kh_eff or w < kw_eff:
                raise ShapeError(
                    f"conv kernel (effective {kh_eff}x{kw_eff}) larger than input {h}x{w}"
                )
            ho = (h - kh_eff) // self.stride + 1
            wo = (w - kw_eff) // self.stride + 1
            pad_h = pad_w = 0
        return ho, wo, pad_h, pad_w

    def out_shape(self, in_shape):
        c, h, w = in_shape
        ho, wo, _, _ = self._geometry(h, w)
        return (self.out_channels, ho, wo)

    def init(self, in_shape, rng):
        c = in_shape[0]
        fan_in = c * self.kernel_h * self.kernel_w
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (self.out_channels, c, self.kernel_h, self.kernel_w))
        return {"w": w.astype(np.float32), "b": np.zeros(self.out_channels, np.float32)}

    def _im2col(self, xp, ho, wo):
        # (N, C*kh*kw, Ho*Wo) patch matrix; one strided copy per kernel tap
        n, c = xp.shape[:2]
        kh, kw, d, s = self.kernel_h, self.kernel_w, self.dilation, self.stride
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                di, dj = i * d, j * d
                cols[:, :, i, j] = xp[
                    :, :, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s
                ]
        return cols.reshape(n, c * kh * kw, ho * wo)

    def forward(self, params, x, mode="infer", rng=None):
        if x.ndim != 4:
            raise ShapeError(f"conv expects NCHW input, got shape {x.shape}")
        weight, bias = params["w"], params["b"]
        n, c, h, w = x.shape
        if weight.shape[1] != c:
            raise ShapeError(f"conv expects {weight.shape[1]} input channels, got {c}")
        ho, wo, pad_h, pad_w = self._geometry(h, w)
        pt, pl = pad_h // 2, pad_w // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pad_h - pt), (pl, pad_w - pl)))
        cols = self._im2col(xp, ho, wo)
        k = weight.shape[1] * self.kernel_h * self.kernel_w
        y = np.matmul(weight.reshape(self.out_channels, k), cols)
        y = y.reshape(n, self.out_channels, ho, wo) + bias[None, :, None, None]
        cache = (x.shape, xp.shape, (pt, pl), cols, weight)
        return y, cache

    def backward(self, cache, grad_out):
        x_shape, xp_shape, (pt, pl), cols, weight = cache
        g = np.asarray(grad_out, dtype=np.float32)
        n, o, ho, wo = g.shape
        c = x_shape[1]
        kh, kw, d, s = self.kernel_h, self.kernel_w, self.dilation, self.stride
        k = c * kh * kw
        g2 = np.ascontiguousarray(g).reshape(n, o, ho * wo)
        grad_b = g.sum(axis=(0, 2, 3))
        grad_w = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        gcols = np.matmul(weight.reshape(o, k).T, g2).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp_shape, dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                di, dj = i * d, j * d
                gxp[
                    :, :, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s
                ] += gcols[:, :, i, j]
        h, w = x_shape[2], x_shape[3]
        grad_in = np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + w])
        return grad_in, {"w": grad_w, "b": grad_b}


@dataclass(frozen=True)
class MaxPool2d:
    """Max pooling with stride equal to the window; trailing rows/cols that
    do not fill a window are dropped."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"pool window must be positive: {self}")

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.h or w < self.w:
            raise ShapeError(f"pool window {self.h}x{self.w} larger than input {h}x{w}")
        return (c, h // self.h, w // self.w)

    def init(self, in_shape, rng):
        return {}

    def _window_slice(self, x, i, j, ho, wo):
        return x[:, :, i : i + ho * self.h : self.h, j : j + wo * self.w : self.w]

    def forward(self, params, x, mode="infer", rng=None):
        if x.ndim != 4:
            raise ShapeError(f"pool expects NCHW input, got shape {x.shape}")
        n, c, h, w = x.shape
        ho, wo = h // self.h, w // self.w
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool window {self.h}x{self.w} larger than input {h}x{w}")
        y = None
        for i in range(self.h):
            for j in range(self.w):
                s = self._window_slice(x, i, j, ho, wo)
                y = s.copy() if y is None else np.maximum(y, s)
        return y, (x, y)

    def backward(self, cache, grad_out):
        # route to the argmax element; scanning window positions in row-major
        # order makes the first occurrence win ties
        x, y = cache
        ho, wo = y.shape[2], y.shape[3]
        g = np.asarray(grad_out, dtype=np.float32)
        grad_in = np.zeros(x.shape, dtype=np.float32)
        taken = np.zeros(y.shape, dtype=bool)
        for i in range(self.h):
            for j in range(self.w):
                s = self._window_slice(x, i, j, ho, wo)
                hit = (s == y) & ~taken
                self._window_slice(grad_in, i, j, ho, wo)[...] = np.where(hit, g, 0.0)
                taken |= hit
        return grad_in, {}


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x, mode="infer", rng=None):
        mask = x > 0
        return np.where(mask, x, np.float32(0.0)), mask

    def backward(self, cache, grad_out):
        return np.where(cache, grad_out, np.float32(0.0)), {}


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout: train mode scales kept units by 1/(1-rate); infer
    mode is exactly the identity."""

    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x, mode="infer", rng=None):
        if mode != "train" or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        scale = np.float32(1.0 / (1.0 - self.rate))
        mask = (rng.random(x.shape) >= self.rate).astype(np.float32) * scale
        return x * mask, mask

    def backward(self, cache, grad_out):
        if cache is None:
            return grad_out, {}
        return grad_out * cache, {}


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x, mode="infer", rng=None):
        return np.ascontiguousarray(x).reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return np.asarray(grad_out, dtype=np.float32).reshape(cache), {}


@dataclass(frozen=True)
class Dense:
    out_features: int

    def __post_init__(self):
        if self.out_features < 1:
            raise ValueError(f"out_features must be positive, got {self.out_features}")

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got shape {in_shape}")
        return (self.out_features,)

    def init(self, in_shape, rng):
        fan_in = int(in_shape[0])
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (self.out_features, fan_in))
        return {"w": w.astype(np.float32), "b": np.zeros(self.out_features, np.float32)}

    def forward(self, params, x, mode="infer", rng=None):
        weight, bias = params["w"], params["b"]
        if x.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ShapeError(
                f"dense expects input (batch, {weight.shape[1]}), got shape {x.shape}"
            )
        return x @ weight.T + bias, (x, weight)

    def backward(self, cache, grad_out):
        x, weight = cache
        g = np.asarray(grad_out, dtype=np.float32)
        return g @ weight, {"w": g.T @ x, "b": g.sum(axis=0)}


@dataclass(frozen=True)
class Softmax:
    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init(self, in_shape, rng):
        return {}

    def forward(self, params, x, mode="infer", rng=None):
        y = softmax(x)
        return y, y

    def backward(self, cache, grad_out):
        y = cache
        g = np.asarray(grad_out, dtype=np.float32)
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return y * (g - dot), {}


Layer = (Conv2d, MaxPool2d, ReLU, Dropout, Flatten, Dense, Softmax)

_LAYER_TAGS = {
    Conv2d: "conv2d",
    MaxPool2d: "maxpool2d",
    ReLU: "relu",
    Dropout: "dropout",
    Flatten: "flatten",
    Dense: "dense",
    Softmax: "softmax",
}
_TAG_LAYERS = {tag: cls for cls, tag in _LAYER_TAGS.items()}


def layer_to_dict(layer) -> dict:
    d = {"type": _LAYER_TAGS[type(layer)]}
    for f in fields(layer):
        d[f.name] = getattr(layer, f.name)
    return d


def layer_from_dict(d: dict):
    kwargs = {k: v for k, v in d.items() if k != "type"}
    try:
        cls = _TAG_LAYERS[d["type"]]
    except KeyError:
        raise ValueError(f"unknown layer type {d.get('type')!r}") from None
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# functional surface


def layer_forward(layer, params, x, mode="infer", rng=None):
    """Apply one layer; returns (output, cache) for the matching backward."""
    return layer.forward(params, x, mode=mode, rng=rng)


def layer_backward(layer, cache, grad_out):
    """Exact gradients of the forward map: (grad_input, param gradients)."""
    return layer.backward(cache, grad_out)


def init_params(layer, in_shape, rng) -> dict:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    return layer.init(in_shape, rng)


def output_shape(layer, in_shape):
    return layer.out_shape(in_shape)


def chain_shapes(layers, in_shape):
    """Per-layer input shapes through a stack; returns list of len(layers)+1."""
    shapes = [tuple(in_shape)]
    for layer in layers:
        shapes.append(output_shape(layer, shapes[-1]))
    return shapes


def forward_layers(layers, params_list, x, mode="infer", rng=None):
    caches = []
    for layer, params in zip(layers, params_list):
        x, cache = layer_forward(layer, params, x, mode=mode, rng=rng)
        caches.append(cache)
    return x, caches


def backward_layers(layers, caches, grad_out):
    grads_list = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grad_out, grads_list[i] = layer_backward(layers[i], caches[i], grad_out)
    return grad_out, grads_list


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise exp-normalize with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, one_hot: np.ndarray):
    """Mean categorical cross-entropy and the combined softmax+CE gradient.

    Returns (loss, grad_wrt_logits) with grad = (p - y) / batch; the caller
    backpropagates grad through the layer *below* the softmax.
    """
    probs = np.asarray(probs)
    one_hot = np.asarray(one_hot)
    if probs.shape != one_hot.shape:
        raise ShapeError(f"probs shape {probs.shape} != targets shape {one_hot.shape}")
    row_sums = probs.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise ValueError("probability rows must sum to 1")
    loss = float(np.mean(-np.sum(one_hot * np.log(probs + 1e-12), axis=-1)))
    grad_logits = (probs - one_hot).astype(np.float32) / np.float32(probs.shape[0])
    return loss, grad_logits


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    """Per-parameter first/second moments plus hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 0.001, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One ADAM update with bias correction, in float32, fixed name order.

    Mutates ``params`` and ``state`` in place and returns them.
    """
    state.step += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    c1 = np.float32(1.0 - state.beta1 ** state.step)
    c2 = np.float32(1.0 - state.beta2 ** state.step)
    lr, eps = np.float32(state.lr), np.float32(state.epsilon)
    one = np.float32(1.0)
    for name in sorted(grads):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        m = b1 * state.m[name] + (one - b1) * g
        v = b2 * state.v[name] + (one - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
