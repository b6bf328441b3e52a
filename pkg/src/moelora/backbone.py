"""Seeded, frozen pre-norm transformer encoder with adapters at Q/K/V/P."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .moe import SITES, FrozenProjection, LoraProjection, MoeLoraProjection, RoutingContext
from .tensor import Tensor, add, gelu, layer_norm, matmul, reshape, scale, softmax, transpose

ADAPTER_MODES = ("none", "single_lora", "moe_lora")


@dataclass
class BackboneConfig:
    layers: int = 4
    model_dim: int = 32
    heads: int = 4
    ffn_dim: int | None = None
    input_dim: int = 16
    adapter_mode: str = "moe_lora"
    lora_rank: int = 8
    num_experts: int = 3
    top_k: int = 3
    routing: str = "token"
    renormalize_topk: bool = False
    head_dim: int = 1024
    final_norm: bool = False

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim
        self.validate()

    def validate(self) -> None:
        for name in ("layers", "model_dim", "heads", "ffn_dim", "input_dim", "head_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim={self.model_dim} is not divisible by heads={self.heads}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ValueError(f"adapter_mode must be one of {ADAPTER_MODES}, got {self.adapter_mode!r}")
        if self.adapter_mode != "none" and not 1 <= self.lora_rank <= self.model_dim:
            raise ValueError(f"lora_rank must lie in [1, {self.model_dim}], got {self.lora_rank}")
        if self.adapter_mode == "moe_lora":
            if self.num_experts < 1:
                raise ValueError(f"num_experts must be positive, got {self.num_experts}")
            if not 1 <= self.top_k <= self.num_experts:
                raise ValueError(f"top_k must lie in [1, num_experts={self.num_experts}], got {self.top_k}")
        if self.routing not in ("token", "utterance"):
            raise ValueError(f"routing must be 'token' or 'utterance', got {self.routing!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BackboneConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _frozen(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))


class EncoderLayer:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, index: int):
        d, f = cfg.model_dim, cfg.ffn_dim
        self.index = index
        self.heads = cfg.heads
        self.ln1 = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        self.ln2 = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        self.attn_weights = {site: _frozen(rng, (d, d), d) for site in SITES}
        self.W_ff1 = _frozen(rng, (f, d), d)
        self.b_ff1 = Tensor(np.zeros(f))
        self.W_ff2 = _frozen(rng, (d, f), f)
        self.b_ff2 = Tensor(np.zeros(d))
        self.proj: dict[str, FrozenProjection] = {}
        self.last_attention: np.ndarray | None = None

    def attach(self, cfg: BackboneConfig, rng: np.random.Generator) -> None:
        for site in SITES:
            W0 = self.attn_weights[site]
            name = f"layer{self.index}.{site}"
            if cfg.adapter_mode == "none":
                p = FrozenProjection(W0, name)
            elif cfg.adapter_mode == "single_lora":
                p = LoraProjection(W0, cfg.lora_rank, rng, name)
            else:
                p = MoeLoraProjection(W0, cfg.num_experts, cfg.lora_rank, cfg.top_k, rng, name, cfg.routing)
                p.router.renormalize_topk = cfg.renormalize_topk
            self.proj[site] = p

    def frozen_tensors(self) -> dict[str, Tensor]:
        out = {f"attn.{s}": w for s, w in self.attn_weights.items()}
        out.update({
            "ln1.gamma": self.ln1[0], "ln1.beta": self.ln1[1],
            "ln2.gamma": self.ln2[0], "ln2.beta": self.ln2[1],
            "ff1.W": self.W_ff1, "ff1.b": self.b_ff1, "ff2.W": self.W_ff2, "ff2.b": self.b_ff2,
        })
        return out

    def __call__(self, x: Tensor, mask_bias: np.ndarray, ctx: RoutingContext, rng) -> Tensor:
        B, T, d = x.shape
        H = self.heads
        dh = d // H
        xn = reshape(layer_norm(x, *self.ln1), (B * T, d))

        def split(t: Tensor) -> Tensor:
            return transpose(reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = scale(split(self.proj["Q"](xn, rng, ctx)), 1.0 / np.sqrt(dh))
        k = split(self.proj["K"](xn, rng, ctx))
        v = split(self.proj["V"](xn, rng, ctx))
        scores = matmul(q, transpose(k, (0, 1, 3, 2)))
        att = softmax(scores, axis=-1, mask_bias=mask_bias)
        self.last_attention = att.data
        mixed = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B * T, d))
        x = add(x, reshape(self.proj["P"](mixed, rng, ctx), (B, T, d)))
        hn = layer_norm(x, *self.ln2)
        ff = matmul(gelu(add(matmul(hn, self.W_ff1.T), self.b_ff1)), self.W_ff2.T)
        return add(x, add(ff, self.b_ff2))


class FrozenEncoder:
    """Input embedding, sinusoidal positions, ``L`` pre-norm blocks and a final layer norm.

    All backbone tensors are frozen; only adapter tensors require gradients.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.W_in = _frozen(rng, (d, cfg.input_dim), cfg.input_dim)
        self.b_in = Tensor(np.zeros(d))
        self.layers = [EncoderLayer(cfg, rng, i) for i in range(cfg.layers)]
        self.ln_f = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        # adapters draw after every frozen tensor so the backbone is identical across adapter modes
        for layer in self.layers:
            layer.attach(cfg, rng)

    def projections(self):
        for layer in self.layers:
            for site in SITES:
                yield layer.index, site, layer.proj[site]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for li, site, p in self.projections():
            for key, t in p.parameters().items():
                out[f"layer{li}.{site}.{key}"] = t
        return out

    def frozen_tensors(self) -> dict[str, Tensor]:
        out = {"embed.W": self.W_in, "embed.b": self.b_in, "ln_f.gamma": self.ln_f[0], "ln_f.beta": self.ln_f[1]}
        for layer in self.layers:
            out.update({f"layer{layer.index}.{k}": t for k, t in layer.frozen_tensors().items()})
        return out

    def train(self, mode: bool = True) -> None:
        for _, _, p in self.projections():
            p.train(mode)

    def reset_macs(self) -> None:
        for _, _, p in self.projections():
            p.macs.reset()

    def adapter_macs(self) -> tuple[int, int]:
        expert = sum(p.macs.expert for _, _, p in self.projections())
        gate = sum(p.macs.gate for _, _, p in self.projections())
        return expert, gate

    def __call__(self, X: np.ndarray, mask: np.ndarray | None = None, rng=None) -> Tensor:
        return encode(self, X, mask, rng)


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> FrozenEncoder:
    cfg.validate()
    return FrozenEncoder(cfg, rng)


def encode(enc: FrozenEncoder, X, mask: np.ndarray | None = None, rng=None) -> Tensor:
    """Encode a padded batch ``X[B, T, d_in]`` (or one clip ``X[T, d_in]``).

    ``mask[B, T]`` marks real frames; padded keys get zero attention.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    B, T, d_in = X.shape
    if T < 1:
        raise ValueError("clips need at least one frame")
    if d_in != enc.cfg.input_dim:
        raise ValueError(f"input frames have {d_in} features, encoder expects {enc.cfg.input_dim}")
    if mask is None:
        mask = np.ones((B, T))
    mask = np.asarray(mask, dtype=np.float64)
    d = enc.cfg.model_dim
    h = add(matmul(Tensor(X), enc.W_in.T), enc.b_in)
    h = add(h, sinusoidal_positions(T, d))
    mask_bias = np.where(mask > 0, 0.0, -np.inf)[:, None, None, :]
    ctx = RoutingContext.from_mask(mask)
    for layer in enc.layers:
        h = layer(h, mask_bias, ctx, rng)
        if not np.all(np.isfinite(h.data)):
            raise FloatingPointError(f"non-finite activations after encoder layer {layer.index}")
    if enc.cfg.final_norm:
        h = layer_norm(h, *enc.ln_f)
    return reshape(h, (T, d)) if single else h
