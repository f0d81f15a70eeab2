"""Two-class cross-entropy, its softmax-combined gradient, Adam and accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError
from .layers import OuterSum

AUTHENTIC = 0
TAMPERED = 1
CLASS_NAMES = ("authentic", "tampered")
PROB_FLOOR = 1e-12


def one_hot(label: int, dtype=np.float32) -> np.ndarray:
    if label not in (AUTHENTIC, TAMPERED):
        raise ContractError(f"label must be 0 (authentic) or 1 (tampered), got {label}")
    y = np.zeros(2, dtype=dtype)
    y[label] = 1
    return y


def cross_entropy(probs, label) -> float:
    """``-sum(y * ln(max(p, 1e-12)))`` for one probability vector."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    return float(-np.sum(y * np.log(np.maximum(p, PROB_FLOOR))))


def mean_cross_entropy(probs_batch, labels_batch) -> float:
    """Batch mean, summed in sample order."""
    if len(probs_batch) == 0:
        raise ContractError("cannot average the loss of an empty batch")
    total = 0.0
    for p, y in zip(probs_batch, labels_batch):
        total += cross_entropy(p, y)
    return total / len(probs_batch)


def softmax_ce_gradient(probs, label) -> np.ndarray:
    """Gradient of cross-entropy after softmax with respect to the logits: ``p - y``."""
    probs = np.asarray(probs)
    return probs - np.asarray(label, dtype=probs.dtype)


def accuracy(probs_batch, labels_batch) -> float:
    """Fraction of rows whose argmax matches the label's; ties go to class 0."""
    probs_batch = np.asarray(probs_batch)
    labels_batch = np.asarray(labels_batch)
    if len(probs_batch) == 0:
        raise ContractError("accuracy of an empty batch is undefined")
    if len(probs_batch) != len(labels_batch):
        raise ContractError("probabilities and labels differ in length")
    hits = np.argmax(probs_batch, axis=-1) == np.argmax(labels_batch, axis=-1)
    return float(np.count_nonzero(hits)) / len(hits)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def constants(self, dtype):
        """Per-step scalars in the parameter dtype, in the order the kernels take them."""
        b1, b2 = self.beta1, self.beta2
        raw = (b1, 1.0 - b1, b2, 1.0 - b2, 1.0 - b1 ** self.t, 1.0 - b2 ** self.t,
               self.lr, self.epsilon)
        if dtype == np.float32:
            return tuple(np.float32(c) for c in raw)
        return raw


def adam_step(state: AdamState, params: list, grads: list, divisor: float = 1.0) -> AdamState:
    """One Adam update in place, using gradient ``grads[i] / divisor``.

    ``divisor`` is the batch size when ``grads`` hold batch sums. Dense-layer
    gradients may arrive as :class:`~elacnn.layers.OuterSum` factors.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError("params, grads and optimizer state differ in length")
    for p, m, g in zip(params, state.m, grads):
        if g is None or tuple(g.shape) != p.shape or m.shape != p.shape:
            raise ContractError(f"gradient shape does not match parameter {p.shape}")
    state.t += 1
    for p, m, v, g in zip(params, state.m, state.v, grads):
        consts = state.constants(p.dtype)
        div = np.float32(divisor) if p.dtype == np.float32 else float(divisor)
        if isinstance(g, OuterSum):
            kernels.adam_outer(p, m, v, g.xs.astype(p.dtype, copy=False),
                               g.gs.astype(p.dtype, copy=False), div, consts)
        else:
            kernels.adam_dense(p, m, v, np.asarray(g, dtype=p.dtype), div, consts)
    return state
