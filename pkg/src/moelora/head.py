"""Trainable back end: mean pooling over time, a two-layer MLP, two logits."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, gelu, masked_mean, matmul, reshape


class Head:
    """Logits for (bonafide, spoof); the detection score is ``logit0 - logit1``."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, out_scale: float = 0.01, in_scale: float = 2.0):
        self.W1 = Tensor(rng.normal(0.0, in_scale / np.sqrt(d), size=(hidden, d)), requires_grad=True, name="head.W1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="head.b1")
        self.W2 = Tensor(rng.normal(0.0, out_scale / np.sqrt(hidden), size=(2, hidden)), requires_grad=True, name="head.W2")
        self.b2 = Tensor(np.zeros(2), requires_grad=True, name="head.b2")

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def __call__(self, frames: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if frames.ndim == 2:
            return reshape(self(reshape(frames, (1,) + frames.shape)), (2,))
        if mask is None:
            mask = np.ones(frames.shape[:2])
        pooled = masked_mean(frames, mask)
        hidden = gelu(add(matmul(pooled, self.W1.T), self.b1))
        return add(matmul(hidden, self.W2.T), self.b2)


def classify(head: Head, frames: Tensor) -> Tensor:
    """Two logits for one clip's encoded frames ``[T, d]``."""
    if frames.shape[0] < 1:
        raise ValueError("classify needs at least one frame")
    return head(frames)


def scores_from_logits(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    return logits[..., 0] - logits[..., 1]
