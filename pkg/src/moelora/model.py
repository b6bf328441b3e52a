"""The full detector: frozen encoder with adapters, followed by the trainable head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, FrozenEncoder, build_backbone
from .head import Head, scores_from_logits
from .tensor import Tensor, make_rng, no_grad

BACKBONE_STREAM = 0
HEAD_STREAM = 1


def pad_batch(clips: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length clips ``[T_i, d_in]`` into ``X[B, T_max, d_in]`` and a frame mask."""
    if len(clips) == 0:
        raise ValueError("empty batch")
    T = max(c.shape[0] for c in clips)
    d = clips[0].shape[1]
    X = np.zeros((len(clips), T, d))
    mask = np.zeros((len(clips), T))
    for i, c in enumerate(clips):
        X[i, : c.shape[0]] = c
        mask[i, : c.shape[0]] = 1.0
    return X, mask


class Detector:
    """Encoder plus head built deterministically from ``(cfg, seed)``.

    The frozen backbone and the adapters come from one sub-stream of ``seed``
    (frozen weights first), the head from another, so models that differ only
    in ``adapter_mode`` share identical backbone and head initialisations.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0, head_scale: float = 0.01):
        self.cfg = cfg
        self.seed = int(seed)
        self.encoder: FrozenEncoder = build_backbone(cfg, make_rng(seed, BACKBONE_STREAM))
        self.head = Head(cfg.model_dim, cfg.head_dim, make_rng(seed, HEAD_STREAM), out_scale=head_scale)
        self.training = False
        # trainable tensors start on the float32 grid so an untrained checkpoint reloads exactly
        for t in self.parameters().values():
            t.data[...] = t.data.astype(np.float32)

    def parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": t for k, t in self.encoder.parameters().items()}
        params.update({f"head.{k}": t for k, t in self.head.parameters().items()})
        return params

    def frozen_tensors(self) -> dict[str, Tensor]:
        return {f"encoder.{k}": t for k, t in self.encoder.frozen_tensors().items()}

    def n_trainable(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def train(self, mode: bool = True) -> Detector:
        self.training = mode
        self.encoder.train(mode)
        return self

    def eval(self) -> Detector:
        return self.train(False)

    def forward(self, X: np.ndarray, mask: np.ndarray | None = None, rng=None) -> Tensor:
        """Logits ``[B, 2]`` for a padded batch."""
        frames = self.encoder(X, mask, rng)
        return self.head(frames, mask)

    __call__ = forward

    def logits(self, clips: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
        """Evaluation-mode logits for a list of clips, without recording a graph."""
        was_training = self.training
        self.eval()
        # batching by length keeps padding small; results are returned in input order
        order = np.argsort([c.shape[0] for c in clips], kind="stable")
        out = np.empty((len(clips), 2))
        try:
            with no_grad():
                for start in range(0, len(clips), batch_size):
                    idx = order[start : start + batch_size]
                    X, mask = pad_batch([clips[i] for i in idx])
                    out[idx] = self.forward(X, mask).data
        finally:
            self.train(was_training)
        return out

    def scores(self, clips: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
        """Detection scores (higher means more bonafide)."""
        return scores_from_logits(self.logits(clips, batch_size))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data[...] = arr
