"""Training utilities: Adam, cosine learning-rate annealing, loss heads."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.value.shape, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.value.shape, dtype=np.float64) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad.astype(np.float64, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value = Tensor(p.value.data - update.astype(p.value.data.dtype))

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from base_lr at step 0 towards 0 at total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    eye = np.eye(num_classes, dtype=np.float64)
    return eye[np.asarray(labels, dtype=np.int64)]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [B,K] logits against integer labels."""
    logp = T.log_softmax(logits, axis=-1)
    hot = Tensor(one_hot(labels, logits.shape[-1]))
    return T.neg(T.reduce_mean(T.reduce_sum(T.mul(logp, hot), axis=-1)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = T.sub(pred, target)
    return T.reduce_mean(T.mul(diff, diff))


def batch_stream(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Deterministic shuffled minibatch indices, reshuffling each epoch."""
    if n <= 0:
        raise ValueError("empty dataset")
    batch = min(batch, n)
    emitted = 0
    while emitted < steps:
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            if emitted >= steps:
                return
            yield order[start : start + batch]
            emitted += 1
