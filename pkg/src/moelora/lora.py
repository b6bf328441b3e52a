"""Low-rank adapters: a frozen weight plus the product of two thin factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, mul, no_grad


@dataclass
class LoraExpert:
    """One ``(A, B)`` pair with ``A`` of shape ``(d, r)`` and ``B`` of shape ``(r, m)``.

    ``scale`` multiplies the low-rank update; it stays at 1.0 so that the
    update is exactly ``A @ B``.
    """

    A: Tensor
    B: Tensor
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    def apply(self, X: Tensor) -> Tensor:
        """Low-rank contribution for the rows of ``X`` (shape ``(n, m)``), right to left."""
        out = matmul(matmul(X, self.B.T), self.A.T)
        return out if self.scale == 1.0 else mul(out, self.scale)


def lora_init(d: int, m: int, r: int, rng: np.random.Generator, name: str = "") -> LoraExpert:
    """``A ~ N(0, 1/r)``, ``B = 0``: the adapter starts as an exact no-op."""
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= min(d, m)):
        raise ValueError(f"LoRA rank must satisfy 1 <= r <= min(d, m) = {min(d, m)}, got {r}")
    A = Tensor(rng.normal(0.0, np.sqrt(1.0 / r), size=(d, r)), requires_grad=True, name=f"{name}A")
    B = Tensor(np.zeros((r, m)), requires_grad=True, name=f"{name}B")
    return LoraExpert(A, B)


def _check_shapes(e: LoraExpert, W0: Tensor) -> None:
    if W0.shape != (e.d, e.m):
        raise ValueError(f"adapter of shape ({e.d}x{e.rank}, {e.rank}x{e.m}) does not fit weight {W0.shape}")


def lora_forward(e: LoraExpert, W0: Tensor, x: Tensor) -> Tensor:
    """``W0 x + A (B x)`` for a single vector or for the rows of a matrix."""
    _check_shapes(e, W0)
    if W0.requires_grad:
        raise ValueError("the backbone weight must be frozen")
    rows = x if x.ndim == 2 else x.reshape(1, -1)
    if rows.shape[1] != e.m:
        raise ValueError(f"input of width {rows.shape[1]} does not match weight {W0.shape}")
    h = matmul(rows, W0.T) + e.apply(rows)
    return h if x.ndim == 2 else h.reshape(-1)


def lora_merge(e: LoraExpert, W0: Tensor) -> Tensor:
    """The merged weight ``W0 + A B`` as a constant tensor."""
    _check_shapes(e, W0)
    return Tensor(W0.data + e.delta())


def sigma_max(e: LoraExpert, max_iter: int = 200, tol: float = 1e-12) -> float:
    """Largest singular value of ``A @ B`` without forming the ``d x m`` product.

    With ``A = Q R`` the nonzero spectrum of ``(AB)(AB)^T`` equals that of the
    ``r x r`` matrix ``C = R (B B^T) R^T``; power iteration runs on ``C``.
    """
    with no_grad():
        A, B = e.A.data, e.B.data
    if not np.any(A) or not np.any(B):
        return 0.0
    R = np.linalg.qr(A, mode="r")
    C = R @ (B @ B.T) @ R.T
    v = np.ones(C.shape[0]) / np.sqrt(C.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # starting vector orthogonal to the range; restart from a basis vector
            v = np.eye(C.shape[0])[np.argmax(np.diag(C))]
            continue
        v = w / norm
        new = float(v @ C @ v)
        if abs(new - lam) <= tol * max(new, 1e-300):
            lam = new
            break
        lam = new
    return abs(e.scale) * float(np.sqrt(max(lam, 0.0)))
