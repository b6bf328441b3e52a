"""Noisy softmax router and top-k expert selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, exp, matmul, mul, softmax, softplus


def select_topk(weights, k: int) -> np.ndarray:
    """Indices of the ``k`` largest weights, by descending weight then ascending index.

    Works on a vector (returns shape ``(k,)``) or row-wise on a matrix.
    """
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    n = w.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    order = np.argsort(-w, axis=-1, kind="stable")
    return order[..., :k]


@dataclass
class GateDecision:
    weights: Tensor  # (n, N) softmax outputs over all experts
    selected: np.ndarray  # (n, k) expert indices per row


class GatingRouter:
    """Gate ``softmax(W_g x + noise)`` with learnable, input-scaled Gaussian noise.

    In training mode ``noise_i = mu_i + exp(log_sigma_i) * softplus(W_noise x)_i * z_i``
    with ``z ~ N(0, 1)``; in evaluation mode the noise is exactly zero.
    """

    def __init__(self, m: int, n_experts: int, k: int, rng: np.random.Generator, site: str = ""):
        if not 1 <= k <= n_experts:
            raise ValueError(f"top-k must satisfy 1 <= k <= N={n_experts}, got {k}")
        self.site = site
        self.k = k
        self.n_experts = n_experts
        self.train_mode = False
        self.renormalize_topk = False
        self.W_g = Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), size=(n_experts, m)), requires_grad=True, name=f"{site}W_g")
        self.W_noise = Tensor(np.zeros((n_experts, m)), requires_grad=True, name=f"{site}W_noise")
        self.mu = Tensor(np.zeros(n_experts), requires_grad=True, name=f"{site}mu")
        self.log_sigma = Tensor(np.zeros(n_experts), requires_grad=True, name=f"{site}log_sigma")

    @property
    def dense(self) -> bool:
        return self.k == self.n_experts

    def parameters(self) -> dict[str, Tensor]:
        return {"W_g": self.W_g, "W_noise": self.W_noise, "mu": self.mu, "log_sigma": self.log_sigma}

    def logits(self, X: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        clean = matmul(X, self.W_g.T)
        if not self.train_mode:
            return clean
        if rng is None:
            raise ValueError(f"training-mode gate at {self.site or 'router'} needs an rng for its noise")
        z = rng.standard_normal(clean.shape)
        noise_scale = mul(softplus(matmul(X, self.W_noise.T)), exp(self.log_sigma))
        return add(add(clean, self.mu), mul(noise_scale, z))

    def __call__(self, X: Tensor, rng: np.random.Generator | None = None) -> GateDecision:
        return compute_gate(self, X, rng)


def compute_gate(g: GatingRouter, x: Tensor, rng: np.random.Generator | None = None) -> GateDecision:
    """Route a vector ``x`` (shape ``(m,)``) or each row of ``x`` (shape ``(n, m)``)."""
    rows = x if x.ndim == 2 else x.reshape(1, -1)
    logits = g.logits(rows, rng)
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError(f"non-finite gate logits at {g.site or 'router'}")
    weights = softmax(logits, axis=-1)
    selected = select_topk(weights.data, g.k)
    if x.ndim == 1:
        return GateDecision(weights.reshape(-1), selected[0])
    return GateDecision(weights, selected)
