"""scikit-learn style wrapper around the detector and its training loop."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig
from .model import Detector, pad_batch
from .tensor import masked_mean, no_grad
from .trainer import TrainConfig, fit


def check_clips(X, input_dim: int | None = None) -> list[np.ndarray]:
    """Validate a batch of clips and return it as a list of ``(T, d)`` float64 arrays.

    ``X`` is either a 3-d array ``(n_clips, T, d)`` or a sequence of 2-d arrays
    with a common feature width. Every clip needs at least one frame and
    finite values.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        clips = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 2 and X.dtype != object:
        raise ValueError("expected a sequence of (T, d) clips or an (n, T, d) array, got a single 2-d array")
    else:
        clips = list(X)
    if not clips:
        raise ValueError("at least one clip is required")
    out = [check_array(c, dtype=np.float64, ensure_min_samples=1) for c in clips]
    widths = {c.shape[1] for c in out}
    if len(widths) != 1:
        raise ValueError(f"clips have different feature widths: {sorted(widths)}")
    if input_dim is not None and widths != {input_dim}:
        raise ValueError(f"clips have {widths.pop()} features, model expects {input_dim}")
    return out


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels in a 1-d array, got shape {y.shape}")
    return y


class MoeLoraClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Bonafide/spoof classifier: frozen encoder with adapters plus an MLP head.

    ``fit`` takes clips and binary labels. The first entry of ``classes_``
    (sorted order, so 0 for 0/1 labels) plays the bonafide role. Early
    stopping uses ``eval_set`` when given, otherwise a stratified hold-out of
    ``validation_fraction`` of the training clips.
    ``transform`` returns the mean-pooled encoder output of each clip.
    """

    def __init__(
        self,
        adapter_mode: str = "moe_lora",
        num_experts: int = 3,
        lora_rank: int = 8,
        top_k: int = 3,
        routing: str = "token",
        layers: int = 4,
        model_dim: int = 32,
        heads: int = 4,
        head_dim: int = 1024,
        lr_min: float = 1e-7,
        lr_max: float = 1e-5,
        cycle_epochs: int = 2,
        weight_decay: float = 1e-4,
        batch_size: int = 16,
        max_epochs: int = 100,
        patience: int = 10,
        validation_fraction: float = 0.2,
        random_state: int = 0,
    ):
        self.adapter_mode = adapter_mode
        self.num_experts = num_experts
        self.lora_rank = lora_rank
        self.top_k = top_k
        self.routing = routing
        self.layers = layers
        self.model_dim = model_dim
        self.heads = heads
        self.head_dim = head_dim
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.cycle_epochs = cycle_epochs
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _configs(self, input_dim: int) -> tuple[BackboneConfig, TrainConfig]:
        backbone = BackboneConfig(
            layers=self.layers,
            model_dim=self.model_dim,
            heads=self.heads,
            input_dim=input_dim,
            adapter_mode=self.adapter_mode,
            lora_rank=self.lora_rank,
            num_experts=self.num_experts,
            top_k=self.top_k,
            routing=self.routing,
            head_dim=self.head_dim,
        )
        train = TrainConfig(
            lr_min=self.lr_min,
            lr_max=self.lr_max,
            cycle_epochs=self.cycle_epochs,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
        )
        return backbone, train

    def fit(self, X, y, eval_set: tuple | None = None) -> MoeLoraClassifier:
        clips = check_clips(X)
        y = check_labels(y, len(clips))
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError(f"binary labels required, got classes {self.classes_.tolist()}")
        codes = np.searchsorted(self.classes_, y)
        if eval_set is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1) when no eval_set is given")
            idx_tr, idx_dev = train_test_split(
                np.arange(len(clips)), test_size=self.validation_fraction,
                stratify=codes, random_state=self.random_state,
            )
            train = ([clips[i] for i in idx_tr], codes[idx_tr])
            dev = ([clips[i] for i in idx_dev], codes[idx_dev])
        else:
            X_dev, y_dev = eval_set
            dev_clips = check_clips(X_dev, clips[0].shape[1])
            y_dev = check_labels(y_dev, len(dev_clips))
            if not np.isin(y_dev, self.classes_).all():
                raise ValueError("eval_set contains labels not seen in y")
            train = (clips, codes)
            dev = (dev_clips, np.searchsorted(self.classes_, y_dev))
        backbone, train_cfg = self._configs(clips[0].shape[1])
        self.n_features_in_ = clips[0].shape[1]
        self.model_ = Detector(backbone, seed=self.random_state)
        self.checkpoint_, self.history_ = fit(self.model_, train, dev, train_cfg)
        self.best_epoch_ = self.checkpoint_.metadata["epoch"]
        return self

    def _clips(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return check_clips(X, self.n_features_in_)

    def score_samples(self, X) -> np.ndarray:
        """Detection scores ``logit0 - logit1``; higher means more like ``classes_[0]``."""
        return self.model_.scores(self._clips(X))

    def decision_function(self, X) -> np.ndarray:
        """Positive values favour ``classes_[1]``."""
        return -self.score_samples(X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.model_.logits(self._clips(X))
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    def transform(self, X) -> np.ndarray:
        clips = self._clips(X)
        out = np.empty((len(clips), self.model_.cfg.model_dim))
        self.model_.eval()
        with no_grad():
            for start in range(0, len(clips), 64):
                batch = clips[start : start + 64]
                frames, mask = pad_batch(batch)
                out[start : start + len(batch)] = masked_mean(self.model_.encoder(frames, mask), mask).data
        return out

    def get_feature_names_out(self, input_features: Sequence[str] | None = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.array([f"pooled{i}" for i in range(self.model_.cfg.model_dim)], dtype=object)
