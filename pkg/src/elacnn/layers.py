"""Network layers and the fixed tamper-detection architecture.

Layers take batched NHWC (or N x features) arrays. Computing a batch at once
gives exactly the same numbers as running its samples one by one: every
kernel accumulates each sample independently and parameter gradients are
summed over the batch in sample order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError, StateError
from .tensor import conv_output_extent

INPUT_SHAPE = (128, 128, 3)
N_CLASSES = 2


class OuterSum:
    """Weight gradient of a dense layer kept in factored form.

    Represents ``sum_s outer(xs[s], gs[s])`` (summed in sample order). The
    optimizer consumes the factors directly so the full matrix is only built
    when someone asks for it.
    """

    def __init__(self, xs: np.ndarray, gs: np.ndarray):
        self.xs = xs
        self.gs = gs

    @property
    def shape(self):
        return (self.xs.shape[1], self.gs.shape[1])

    @property
    def dtype(self):
        return np.result_type(self.xs, self.gs)

    def materialize(self) -> np.ndarray:
        total = np.zeros(self.shape, dtype=self.dtype)
        for x, g in zip(self.xs, self.gs):
            total += np.multiply.outer(x, g)
        return total

    def __array__(self, dtype=None, copy=None):
        arr = self.materialize()
        return arr if dtype is None else arr.astype(dtype)


def _sum_rows(g: np.ndarray) -> np.ndarray:
    total = np.zeros(g.shape[1:], dtype=g.dtype)
    for row in g:
        total += row
    return total


class Layer:
    kind = "layer"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list:
        return []

    @property
    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params())

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        return tuple(input_shape)

    def describe(self) -> dict:
        return {"kind": self.kind, "shape": [], "param_count": self.param_count}

    def _require(self, cached, what="forward"):
        if cached is None:
            raise StateError(f"{self.kind}: backward called before {what}")
        return cached


class Conv2d(Layer):
    """Valid, stride-1 convolution with HWIO weights ``(kh, kw, cin, cout)``."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=5, dtype=np.float32,
                 need_input_grad=True):
        k = kernel_size
        self.weight = np.zeros((k, k, in_channels, out_channels), dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.need_input_grad = need_input_grad
        self.grad_weight = None
        self.grad_bias = None
        self._x = None

    def forward(self, x, training=False):
        kh, kw, cin, _ = self.weight.shape
        if x.ndim != 4 or x.shape[3] != cin or x.shape[1] < kh or x.shape[2] < kw:
            raise ContractError(f"conv2d expects (n, h>={kh}, w>={kw}, {cin}), got {x.shape}")
        self._x = x
        return kernels.conv2d_forward(x, self.weight, self.bias)

    def backward(self, grad):
        x = self._require(self._x)
        kh, kw = self.weight.shape[:2]
        expected = (x.shape[0], x.shape[1] - kh + 1, x.shape[2] - kw + 1, self.weight.shape[3])
        if grad.shape != expected:
            raise ContractError(f"conv2d grad shape {grad.shape} != {expected}")
        self.grad_weight, self.grad_bias = kernels.conv2d_grad_weights(x, grad, kh, kw)
        if not self.need_input_grad:
            return None
        return kernels.conv2d_grad_input(grad, self.weight)

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def output_shape(self, input_shape):
        h, w, _ = input_shape
        kh, kw, _, cout = self.weight.shape
        return (conv_output_extent(h, kh), conv_output_extent(w, kw), cout)

    def describe(self):
        return {"kind": self.kind, "shape": list(self.weight.shape),
                "param_count": self.param_count}


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        mask = self._require(self._mask)
        # derivative at exactly 0 is taken as 0
        return np.where(mask, grad, np.zeros((), dtype=grad.dtype))


class MaxPool2d(Layer):
    """2x2 window, stride 2. Gradients go to the first maximum in row-major order."""

    kind = "maxpool2d"

    def __init__(self):
        self._arg = None

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ContractError(f"maxpool needs even spatial extents, got {x.shape}")
        out, self._arg = kernels.maxpool2_forward(x)
        return out

    def backward(self, grad):
        arg = self._require(self._arg)
        if grad.shape != arg.shape:
            raise ContractError(f"maxpool grad shape {grad.shape} != {arg.shape}")
        return kernels.maxpool2_backward(grad, arg)

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if h % 2 or w % 2:
            raise ContractError(f"maxpool needs even spatial extents, got {input_shape}")
        return (h // 2, w // 2, c)

    def describe(self):
        return {"kind": self.kind, "shape": [2, 2], "param_count": 0}


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by ``1 / (1 - rate)`` in training."""

    kind = "dropout"

    def __init__(self, rate, seed=None):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = np.random.default_rng(seed)
        self._mask = None
        self._seen = False

    def forward(self, x, training=False):
        self._seen = True
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape, dtype=np.float32) < np.float32(1.0 - self.rate)
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        self._mask = keep * scale
        return x * self._mask

    def backward(self, grad):
        if not self._seen:
            raise StateError("dropout: backward called before forward")
        if self._mask is None:
            return grad
        return grad * self._mask

    def describe(self):
        return {"kind": self.kind, "shape": [], "param_count": 0, "rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._require(self._shape))

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, dtype=np.float32):
        self.weight = np.zeros((in_features, out_features), dtype=dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grad_weight = None
        self.grad_bias = None
        self._x = None

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ContractError(f"dense expects (n, {self.weight.shape[0]}), got {x.shape}")
        self._x = x
        return kernels.dense_forward(x, self.weight, self.bias)

    def backward(self, grad):
        x = self._require(self._x)
        if grad.shape != (x.shape[0], self.weight.shape[1]):
            raise ContractError(f"dense grad shape {grad.shape} does not match")
        grad = np.ascontiguousarray(grad)
        self.grad_weight = OuterSum(np.ascontiguousarray(x), grad)
        self.grad_bias = _sum_rows(grad)
        return kernels.dense_grad_input(self.weight, grad)

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def output_shape(self, input_shape):
        (n,) = input_shape
        if n != self.weight.shape[0]:
            raise ContractError(f"dense expects {self.weight.shape[0]} features, got {n}")
        return (self.weight.shape[1],)

    def describe(self):
        return {"kind": self.kind, "shape": list(self.weight.shape),
                "param_count": self.param_count}


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self):
        self._p = None

    def forward(self, x, training=False):
        self._p = softmax(x)
        return self._p

    def backward(self, grad):
        p = self._require(self._p)
        return p * (grad - (p * grad).sum(axis=-1, keepdims=True))


class Model:
    """Ordered layer stack ending in a softmax over the two classes."""

    def __init__(self, layers: list[Layer], input_shape=INPUT_SHAPE, seed=None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.training = False

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x: np.ndarray, training: bool | None = None) -> np.ndarray:
        """Class probabilities for one ``(h, w, c)`` sample or an ``(n, h, w, c)`` batch."""
        training = self.training if training is None else training
        single = x.ndim == len(self.input_shape)
        batch = x[None] if single else x
        if batch.shape[1:] != self.input_shape:
            raise ContractError(f"model expects input {self.input_shape}, got {x.shape}")
        for layer in self.layers:
            batch = layer.forward(batch, training)
        return batch[0] if single else batch

    def _backward_from(self, grad, stop):
        single = grad.ndim == 1
        g = grad[None] if single else grad
        for layer in reversed(self.layers[:stop]):
            g = layer.backward(g)
            if g is None:
                break
        return self.gradients()

    def backward(self, grad_probs: np.ndarray) -> list:
        """Back-propagate a gradient with respect to the output probabilities."""
        return self._backward_from(grad_probs, len(self.layers))

    def backward_logits(self, grad_logits: np.ndarray) -> list:
        """Back-propagate a gradient with respect to the pre-softmax logits.

        This is the path training uses, with ``p - y`` from the combined
        softmax and cross-entropy derivative.
        """
        if not isinstance(self.layers[-1], Softmax):
            raise StateError("model does not end in a softmax layer")
        return self._backward_from(grad_logits, len(self.layers) - 1)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def gradients(self) -> list:
        return [g for layer in self.layers for g in layer.grads()]

    def trainable_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.params()]

    def param_counts(self) -> list[int]:
        return [layer.param_count for layer in self.trainable_layers()]

    @property
    def total_params(self) -> int:
        return sum(self.param_counts())

    def shape_trace(self, input_shape=None) -> list[tuple[int, ...]]:
        shape = tuple(input_shape or self.input_shape)
        trace = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            trace.append(shape)
        return trace

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.random(shape, dtype=np.float32)
    return ((u * np.float32(2.0) - np.float32(1.0)) * np.float32(limit)).astype(dtype)


def build_model(seed: int = 0, input_shape=INPUT_SHAPE, filters=32, kernel_size=5,
                hidden=256, dtype=np.float32, init=True) -> Model:
    """The tamper-detection stack, optionally at a reduced input size.

    conv(filters, k) -> relu -> conv(filters, k) -> relu -> maxpool 2x2 ->
    dropout 0.25 -> flatten -> dense(hidden) -> relu -> dropout 0.5 ->
    dense(2) -> softmax. Weights are Glorot-uniform, biases zero.
    """
    h, w, cin = input_shape
    init_seq, drop1_seq, drop2_seq = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(init_seq)
    conv1 = Conv2d(cin, filters, kernel_size, dtype, need_input_grad=False)
    conv2 = Conv2d(filters, filters, kernel_size, dtype)
    pooled = (conv_output_extent(conv_output_extent(h, kernel_size), kernel_size) // 2,
              conv_output_extent(conv_output_extent(w, kernel_size), kernel_size) // 2)
    dense1 = Dense(pooled[0] * pooled[1] * filters, hidden, dtype)
    dense2 = Dense(hidden, N_CLASSES, dtype)
    layers = [conv1, ReLU(), conv2, ReLU(), MaxPool2d(), Dropout(0.25, drop1_seq),
              Flatten(), dense1, ReLU(), Dropout(0.5, drop2_seq), dense2, Softmax()]
    if not init:
        return Model(layers, input_shape=input_shape, seed=seed)
    for conv in (conv1, conv2):
        kh, kw, ci, co = conv.weight.shape
        conv.weight[...] = _glorot(rng, conv.weight.shape, kh * kw * ci, kh * kw * co, dtype)
    for dense in (dense1, dense2):
        fi, fo = dense.weight.shape
        dense.weight[...] = _glorot(rng, dense.weight.shape, fi, fo, dtype)
    return Model(layers, input_shape=input_shape, seed=seed)


def build_paper_model(seed: int = 0) -> Model:
    """Full-size network: 128x128x3 input, 29,520,034 trainable parameters."""
    return build_model(seed)
