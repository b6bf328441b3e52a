"""Adapter-wrapped linear projections: frozen, single LoRA, and mixture of LoRA experts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gating import GatingRouter, compute_gate
from .lora import LoraExpert, lora_init
from .tensor import Tensor, add, div, matmul, mul, reshape, scatter_rows, take, transpose, tsum

SITES = ("Q", "K", "V", "P")


@dataclass
class RoutingContext:
    """Per-batch bookkeeping shared by every projection of a forward pass.

    ``active`` lists the rows of the flattened ``(B*T, m)`` input that are real
    frames (padding rows only see the frozen weight). ``row_group`` maps each
    active row to its clip and ``pool`` averages active rows per clip, which the
    per-utterance routing variant uses as gate input.
    """

    active: np.ndarray
    row_group: np.ndarray
    pool: np.ndarray
    n_rows: int

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> RoutingContext:
        B, T = mask.shape
        flat = mask.reshape(-1) > 0
        active = np.flatnonzero(flat)
        row_group = active // T
        pool = np.zeros((B, active.size))
        lengths = mask.sum(axis=1)
        pool[row_group, np.arange(active.size)] = 1.0 / lengths[row_group]
        return cls(active, row_group, pool, B * T)

    @classmethod
    def dense(cls, n: int) -> RoutingContext:
        return cls(np.arange(n), np.zeros(n, dtype=np.intp), np.full((1, n), 1.0 / n), n)


@dataclass
class MacCounter:
    """Multiply-accumulate tally for adapter work (experts and gate)."""

    expert: int = 0
    gate: int = 0

    @property
    def total(self) -> int:
        return self.expert + self.gate

    def reset(self) -> None:
        self.expert = 0
        self.gate = 0


def _rows(X: Tensor, ctx: RoutingContext) -> Tensor:
    return X if ctx.active.size == ctx.n_rows else take(X, ctx.active, unique=True)


def _to_full(contrib: Tensor, ctx: RoutingContext) -> Tensor:
    """Scatter a contribution over active rows into all ``n_rows`` rows."""
    return contrib if ctx.active.size == ctx.n_rows else scatter_rows(contrib, ctx.active, ctx.n_rows)


class FrozenProjection:
    """``h = W0 x`` with ``W0`` frozen."""

    def __init__(self, W0: Tensor, site: str = ""):
        if W0.requires_grad:
            raise ValueError("backbone weights must be frozen")
        self.W0 = W0
        self.site = site
        self.macs = MacCounter()

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def train(self, mode: bool = True) -> None:
        pass

    def __call__(self, X: Tensor, rng=None, ctx: RoutingContext | None = None) -> Tensor:
        if X.shape[-1] != self.W0.shape[1]:
            raise ValueError(f"{self.site}: input width {X.shape[-1]} does not match weight {self.W0.shape}")
        return matmul(X, self.W0.T)


class LoraProjection(FrozenProjection):
    """``h = W0 x + A (B x)`` with a single adapter."""

    def __init__(self, W0: Tensor, rank: int, rng: np.random.Generator, site: str = ""):
        super().__init__(W0, site)
        d, m = W0.shape
        self.expert = lora_init(d, m, rank, rng, name=f"{site}.lora.")

    @property
    def experts(self) -> list[LoraExpert]:
        return [self.expert]

    def parameters(self) -> dict[str, Tensor]:
        return {"lora.A": self.expert.A, "lora.B": self.expert.B}

    def __call__(self, X: Tensor, rng=None, ctx: RoutingContext | None = None) -> Tensor:
        base = super().__call__(X)
        ctx = ctx or RoutingContext.dense(X.shape[0])
        Xa = _rows(X, ctx)
        e = self.expert
        self.macs.expert += Xa.shape[0] * e.rank * (e.d + e.m)
        return add(base, _to_full(e.apply(Xa), ctx))


class MoeLoraProjection(FrozenProjection):
    """``h = W0 x + sum_{i in S(x)} G_i(x) A_i (B_i x)``.

    Expert factors are stored stacked, ``A`` as ``(N, d, r)`` and ``B`` as
    ``(N, r, m)``. When every row uses every expert the low-rank terms are
    evaluated as one wide product; otherwise each expert runs only on the rows
    routed to it. ``routing`` is ``"token"`` (gate every row) or ``"utterance"``
    (gate the clip-mean of the input and share the decision across the clip).
    """

    def __init__(
        self,
        W0: Tensor,
        n_experts: int,
        rank: int,
        top_k: int,
        rng: np.random.Generator,
        site: str = "",
        routing: str = "token",
    ):
        super().__init__(W0, site)
        if routing not in ("token", "utterance"):
            raise ValueError(f"routing must be 'token' or 'utterance', got {routing!r}")
        d, m = W0.shape
        self.routing = routing
        init = [lora_init(d, m, rank, rng) for _ in range(n_experts)]
        self.A = Tensor(np.stack([e.A.data for e in init]), requires_grad=True, name=f"{site}.experts.A")
        self.B = Tensor(np.stack([e.B.data for e in init]), requires_grad=True, name=f"{site}.experts.B")
        self.router = GatingRouter(m, n_experts, top_k, rng, site=f"{site}.router.")
        # k = N evaluates all experts as one wide product unless this is switched off
        self.fuse_dense = True

    @property
    def n_experts(self) -> int:
        return self.A.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[2]

    @property
    def experts(self) -> list[LoraExpert]:
        """Per-expert views sharing memory with the stacked factors (no gradient)."""
        return [LoraExpert(_view(self.A.data[i]), _view(self.B.data[i])) for i in range(self.n_experts)]

    def parameters(self) -> dict[str, Tensor]:
        params = {"experts.A": self.A, "experts.B": self.B}
        for key, t in self.router.parameters().items():
            params[f"router.{key}"] = t
        return params

    def train(self, mode: bool = True) -> None:
        self.router.train_mode = mode

    def gate(self, Xa: Tensor, rng, ctx: RoutingContext):
        """Gate weights ``(n_active, N)`` and selections ``(n_active, k)`` for the active rows ``Xa``."""
        router = self.router
        n_exp, m = router.W_g.shape
        if self.routing == "token":
            decision = compute_gate(router, Xa, rng)
            self.macs.gate += Xa.shape[0] * n_exp * m * (2 if router.train_mode else 1)
            return decision.weights, decision.selected
        pooled = matmul(Tensor(ctx.pool), Xa)
        decision = compute_gate(router, pooled, rng)
        self.macs.gate += pooled.shape[0] * n_exp * m * (2 if router.train_mode else 1)
        return take(decision.weights, ctx.row_group), decision.selected[ctx.row_group]

    def _dense_delta(self, Xa: Tensor, weights: Tensor) -> Tensor:
        N, d, r = self.A.shape
        n = Xa.shape[0]
        B_cat = reshape(self.B, (N * r, self.B.shape[2]))
        A_cat = reshape(transpose(self.A, (0, 2, 1)), (N * r, d))
        Z = reshape(matmul(Xa, transpose(B_cat)), (n, N, r))
        Z = mul(Z, reshape(weights, (n, N, 1)))
        return matmul(reshape(Z, (n, N * r)), A_cat)

    def __call__(self, X: Tensor, rng=None, ctx: RoutingContext | None = None) -> Tensor:
        base = super().__call__(X)
        ctx = ctx or RoutingContext.dense(X.shape[0])
        Xa = _rows(X, ctx)
        weights, selected = self.gate(Xa, rng, ctx)
        if self.router.renormalize_topk and not self.router.dense:
            keep = np.zeros(weights.shape)
            np.put_along_axis(keep, selected, 1.0, axis=-1)
            masked = mul(weights, keep)
            weights = div(masked, tsum(masked, axis=-1, keepdims=True))
        if self.router.dense and self.fuse_dense:
            N, d, r = self.A.shape
            self.macs.expert += N * Xa.shape[0] * r * (d + self.B.shape[2])
            delta = self._dense_delta(Xa, weights)
        else:
            delta = self._sparse_delta(Xa, weights, selected)
        return base if delta is None else add(base, _to_full(delta, ctx))

    def _sparse_delta(self, Xa: Tensor, weights: Tensor, selected: np.ndarray) -> Tensor | None:
        """Run each expert only on the rows that selected it."""
        n_active = Xa.shape[0]
        N, d, r = self.A.shape
        m = self.B.shape[2]
        delta = None
        for i in range(N):
            rows = np.flatnonzero((selected == i).any(axis=-1))
            if rows.size == 0:
                continue
            self.macs.expert += rows.size * r * (d + m)
            e = LoraExpert(take(self.A, i, unique=True), take(self.B, i, unique=True))
            if rows.size == n_active:
                gi = take(weights, (slice(None), slice(i, i + 1)))
                contrib = mul(e.apply(Xa), gi)
            else:
                gi = take(weights, (rows, np.full(rows.size, i)), unique=True).reshape(-1, 1)
                contrib = scatter_rows(mul(e.apply(take(Xa, rows, unique=True)), gi), rows, n_active)
            delta = contrib if delta is None else add(delta, contrib)
        return delta


def _view(a: np.ndarray) -> Tensor:
    t = Tensor(np.empty(0))
    t.data = a
    return t


def moelora_forward(p: MoeLoraProjection, x: Tensor, rng=None) -> Tensor:
    """Fused projection of one token vector."""
    return p(x.reshape(1, -1), rng).reshape(-1)


def per_token_routing(p: MoeLoraProjection, X: Tensor, rng=None) -> Tensor:
    """Fused projection of every row of ``X`` with an independent routing decision per row."""
    return p(X, rng)
