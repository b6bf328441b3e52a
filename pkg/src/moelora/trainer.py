"""Training: AdamW, triangular cyclic learning rate, NLL loss, EER-based early stopping."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import BackboneConfig
from .metrics import compute_eer
from .model import Detector, pad_batch
from .tensor import log_softmax_nll, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
NOISE_STREAM = 7
SHUFFLE_STREAM = 8


@dataclass
class TrainConfig:
    lr_min: float = 1e-7
    lr_max: float = 1e-5
    cycle_epochs: int = 2
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.cycle_epochs < 1:
            raise ValueError("batch_size, max_epochs and cycle_epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- optimiser -------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam moments with bias correction, then decoupled decay ``p -= lr * wd * p``."""

    def __init__(self, params: dict, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        optimizer_step(self.params, self.state, lr, self.weight_decay, self.beta1, self.beta2, self.eps)


def optimizer_step(params: dict, state: AdamWState, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data -= lr * weight_decay * p.data


def cyclic_lr(step: int, steps_per_cycle: int, lr_min: float = 1e-7, lr_max: float = 1e-5) -> float:
    """Triangular wave: ``lr_min`` at the cycle start, ``lr_max`` at half cycle."""
    if steps_per_cycle < 2:
        raise ValueError("steps_per_cycle must be at least 2")
    phase = (step % steps_per_cycle) / steps_per_cycle
    frac = 2 * phase if phase <= 0.5 else 2 * (1 - phase)
    return lr_min + (lr_max - lr_min) * frac


class EarlyStopping:
    """Track the best (lowest) metric; stop once it has not improved for more than ``patience`` epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True when it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs > self.patience


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    backbone: BackboneConfig
    seed: int
    tensors: dict  # name -> float32 array
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: Detector, metadata: dict | None = None) -> Checkpoint:
        tensors = {k: v.astype(np.float32) for k, v in model.state_dict().items()}
        return cls(model.cfg, model.seed, tensors, dict(metadata or {}))

    def build_model(self) -> Detector:
        model = Detector(BackboneConfig.from_dict(self.backbone.to_dict()), self.seed)
        model.load_state_dict({k: v.astype(np.float64) for k, v in self.tensors.items()})
        return model

    def to_bytes(self) -> bytes:
        directory, offset, payload = [], 0, []
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
            payload.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "version": self.version,
            "config": self.backbone.to_dict(),
            "backbone_seed": self.seed,
            "metadata": self.metadata,
            "tensors": directory,
        }
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + b"".join(payload)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        cut = raw.index(b"\n")
        header = json.loads(raw[:cut].decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        body = raw[cut + 1 :]
        tensors = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(np.float32)
        return cls(BackboneConfig.from_dict(header["config"]), header["backbone_seed"], tensors, header["metadata"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(raw)


def save_checkpoint(model: Detector, path: str | Path, metadata: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_model(model, metadata)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path: str | Path) -> Detector:
    return Checkpoint.load(path).build_model()


# -- training loop ---------------------------------------------------------------------

LOG_COLUMNS = ["epoch", "train_loss", "dev_eer", "lr"]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_eer: float
    lr: float


def write_log(rows: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.dev_eer), repr(r.lr)])


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle into batches of similar-length clips.

    Clips are ordered by length with random tie-breaking, cut into consecutive
    batches, and the batch order is shuffled.
    """
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(lengths.size), lengths))
    batches = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def dev_eer(model: Detector, clips, labels) -> float:
    return compute_eer(scores=model.scores(clips), labels=labels)[0]


def fit(
    model: Detector,
    train: tuple[Sequence[np.ndarray], np.ndarray],
    dev: tuple[Sequence[np.ndarray], np.ndarray],
    cfg: TrainConfig,
    evaluate: Callable[[Detector, int], float] | None = None,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Train adapters and head; return the best-dev-EER checkpoint and the per-epoch log.

    ``evaluate(model, epoch)`` overrides the dev metric (lower is better).
    The model is left holding the best checkpoint's weights.
    """
    X_train, y_train = train
    X_dev, y_dev = dev
    if len(X_train) == 0 or len(X_dev) == 0:
        raise ValueError("train and dev splits must be non-empty")
    y_train = np.asarray(y_train)
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    shuffle_rng = make_rng(cfg.seed, SHUFFLE_STREAM)
    noise_rng = make_rng(cfg.seed, NOISE_STREAM)
    n_batches = -(-len(X_train) // cfg.batch_size)
    lengths = [x.shape[0] for x in X_train]
    steps_per_cycle = max(2, cfg.cycle_epochs * n_batches)
    stopper = EarlyStopping(cfg.patience)
    best = Checkpoint.from_model(model, {"epoch": 0})
    history: list[EpochLog] = []
    step = 0
    lr = cfg.lr_min
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        losses = []
        for idx in length_batches(lengths, cfg.batch_size, shuffle_rng):
            X, mask = pad_batch([X_train[i] for i in idx])
            lr = cyclic_lr(step, steps_per_cycle, cfg.lr_min, cfg.lr_max)
            opt.zero_grad()
            loss = log_softmax_nll(model.forward(X, mask, noise_rng), y_train[idx])
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
            step += 1
        model.eval()
        metric = evaluate(model, epoch) if evaluate else dev_eer(model, X_dev, y_dev)
        history.append(EpochLog(epoch, float(np.mean(losses)), float(metric), lr))
        log.info("epoch %d loss %.5f dev_eer %.4f lr %.3g", epoch, history[-1].train_loss, metric, lr)
        if stopper.update(epoch, metric):
            best = Checkpoint.from_model(model, {
                "epoch": epoch,
                "dev_eer": float(metric),
                "optimizer_step": opt.state.step,
                "train_config": cfg.to_dict(),
            })
        if stopper.should_stop:
            break
    best.metadata["epochs_run"] = len(history)
    model.load_state_dict({k: v.astype(np.float64) for k, v in best.tensors.items()})
    return best, history
