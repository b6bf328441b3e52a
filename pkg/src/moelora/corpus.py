"""Synthetic bonafide/spoof frame-sequence corpus with held-out attack families.

Bonafide clips are a smooth AR(1) process plus two sinusoids per
feature. Each spoof family starts from the same kind of signal and applies
one deterministic corruption:

========  ==============================================================
A01       additive ripple alternating sign every frame (amplitude 0.3)
A02       amplitude quantisation to 8 levels
A03       moving-average temporal smear (window 5)
A04       a fixed band of 4 features set to zero
A05       constant offset of +0.5 on every feature
========  ==============================================================

A01-A03 appear in train/dev/eval_id; A04-A05 only in eval_ood.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng

FAMILIES = ("bona", "A01", "A02", "A03", "A04", "A05")
FAMILY_CODE = {f: i for i, f in enumerate(FAMILIES)}
SPLITS = ("train", "dev", "eval_id", "eval_ood")
SPLIT_CODE = {s: i for i, s in enumerate(SPLITS)}
LABELS = ("bonafide", "spoof")

BAND = slice(4, 8)
QUANT_LEVELS = 8


@dataclass
class Clip:
    id: str
    frames: np.ndarray  # (T, d_in), float32-representable values
    label: int  # 0 bonafide, 1 spoof
    family: str
    split: str = ""

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class CorpusManifest:
    seed: int = 0
    input_dim: int = 16
    min_frames: int = 40
    max_frames: int = 120
    ar_coef: float = 0.9
    ar_noise: float = 0.055
    sine_amplitude: float = 0.55
    sine_freq: tuple = (0.18, 0.25)
    quant_range: float = 7.3
    counts: dict = field(default_factory=lambda: {
        "train": {"bona": 1000, "spoof": 1000},
        "dev": {"bona": 200, "spoof": 200},
        "eval_id": {"bona": 200, "spoof": 200},
        "eval_ood": {"bona": 200, "spoof": 200},
    })
    families: dict = field(default_factory=lambda: {
        "train": ["A01", "A02", "A03"],
        "dev": ["A01", "A02", "A03"],
        "eval_id": ["A01", "A02", "A03"],
        "eval_ood": ["A04", "A05"],
    })

    def validate(self) -> None:
        if self.input_dim < BAND.stop:
            raise ValueError(f"input_dim must be at least {BAND.stop}")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        for split in self.counts:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            for fam in self.families.get(split, []):
                if fam not in FAMILIES[1:]:
                    raise ValueError(f"unknown spoof family {fam!r} in split {split}")
            if self.counts[split].get("spoof", 0) and not self.families.get(split):
                raise ValueError(f"split {split} has spoof clips but no families")
        seen = set(self.families.get("train", [])) | set(self.families.get("dev", []))
        if seen & set(self.families.get("eval_ood", [])):
            raise ValueError("eval_ood families must be absent from train and dev")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusManifest:
        return cls(**d)

    @classmethod
    def small(cls, seed: int = 0, n: int = 40) -> CorpusManifest:
        """A reduced manifest with ``n`` clips per class and split (tests and quick runs)."""
        m = cls(seed=seed)
        m.counts = {s: {"bona": n, "spoof": n} for s in SPLITS}
        return m


def _bonafide_signal(T: int, d: int, rng: np.random.Generator, m: CorpusManifest) -> np.ndarray:
    x = np.empty((T, d))
    stationary = m.ar_noise / np.sqrt(1.0 - m.ar_coef**2)
    x[0] = rng.normal(0.0, stationary, size=d)
    eps = rng.normal(0.0, m.ar_noise, size=(T, d))
    for t in range(1, T):
        x[t] = m.ar_coef * x[t - 1] + eps[t]
    t = np.arange(T)[:, None]
    for _ in range(2):
        freq = rng.uniform(m.sine_freq[0], m.sine_freq[1], size=d)
        phase = rng.uniform(0.0, 2 * np.pi, size=d)
        x += m.sine_amplitude * np.sin(2 * np.pi * freq * t + phase)
    return x


def _corrupt(x: np.ndarray, family: str, quant_range: float = 7.3) -> np.ndarray:
    if family == "A01":
        return x + 0.3 * np.where(np.arange(x.shape[0]) % 2 == 0, 1.0, -1.0)[:, None]
    if family == "A02":
        step = 2 * quant_range / QUANT_LEVELS
        idx = np.clip(np.floor((x + quant_range) / step), 0, QUANT_LEVELS - 1)
        return -quant_range + (idx + 0.5) * step
    if family == "A03":
        kernel = np.ones(5) / 5
        padded = np.pad(x, ((2, 2), (0, 0)), mode="edge")
        return np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(x.shape[1])], axis=1)
    if family == "A04":
        out = x.copy()
        out[:, BAND] = 0.0
        return out
    if family == "A05":
        return x + 0.5
    raise ValueError(f"unknown family {family!r}")


def gen_clip(family: str, T: int, rng: np.random.Generator, manifest: CorpusManifest | None = None,
             clip_id: str = "", split: str = "") -> Clip:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    m = manifest or CorpusManifest()
    x = _bonafide_signal(T, m.input_dim, rng, m)
    if family != "bona":
        x = _corrupt(x, family, m.quant_range)
    frames = x.astype(np.float32).astype(np.float64)
    return Clip(clip_id, frames, int(family != "bona"), family, split)


class Dataset:
    def __init__(self, manifest: CorpusManifest, clips: list[Clip]):
        self.manifest = manifest
        self.clips = clips

    def split(self, name: str) -> list[Clip]:
        return [c for c in self.clips if c.split == name]

    def arrays(self, name: str) -> tuple[list[np.ndarray], np.ndarray, list[str]]:
        clips = self.split(name)
        if not clips:
            raise ValueError(f"split {name!r} is empty")
        return [c.frames for c in clips], np.array([c.label for c in clips]), [c.family for c in clips]

    def __len__(self) -> int:
        return len(self.clips)


def gen_dataset(manifest: CorpusManifest | None = None) -> Dataset:
    m = manifest or CorpusManifest()
    m.validate()
    clips = []
    for split in SPLITS:
        counts = m.counts.get(split, {})
        fams = ["bona"] * counts.get("bona", 0)
        spoof_fams = m.families.get(split, [])
        fams += [spoof_fams[i % len(spoof_fams)] for i in range(counts.get("spoof", 0))]
        for i, fam in enumerate(fams):
            rng = make_rng(m.seed, SPLIT_CODE[split], i)
            T = int(rng.integers(m.min_frames, m.max_frames + 1))
            clips.append(gen_clip(fam, T, rng, m, clip_id=f"{split}-{i:05d}", split=split))
    return Dataset(m, clips)


# -- on-disk format -----------------------------------------------------------

def write_dataset(ds: Dataset, out: str | Path) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(ds.manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(out / "clips.bin", "wb") as fh:
            for c in ds.clips:
                ident = c.id.encode("utf-8")
                T, d = c.frames.shape
                fh.write(struct.pack("<I", len(ident)) + ident)
                fh.write(struct.pack("<IIBB", T, d, c.label, FAMILY_CODE[c.family]))
                fh.write(c.frames.astype("<f4").tobytes())
        with open(out / "splits.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "split", "family", "label"])
            for c in ds.clips:
                w.writerow([c.id, c.split, c.family, LABELS[c.label]])
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        manifest = CorpusManifest.from_dict(json.loads((path / "manifest.json").read_text(encoding="utf-8")))
        with open(path / "splits.csv", newline="", encoding="utf-8") as fh:
            split_of = {row["id"]: row["split"] for row in csv.DictReader(fh)}
        raw = (path / "clips.bin").read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset at {path}: {exc}") from exc
    clips = []
    pos = 0
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        ident = raw[pos : pos + n].decode("utf-8")
        pos += n
        T, d, label, fam = struct.unpack_from("<IIBB", raw, pos)
        pos += 10
        frames = np.frombuffer(raw, dtype="<f4", count=T * d, offset=pos).reshape(T, d).astype(np.float64)
        pos += 4 * T * d
        clips.append(Clip(ident, frames, label, FAMILIES[fam], split_of.get(ident, "")))
    return Dataset(manifest, clips)


def logistic_probe(ds: Dataset) -> dict[str, float]:
    """Accuracy of a logistic regression on mean-pooled raw frames, fit on ``train``.

    A sanity oracle for the corpus: in-domain families should be linearly
    detectable from pooled frames while held-out families should not.
    """
    from sklearn.linear_model import LogisticRegression

    def pooled(split):
        frames, labels, _ = ds.arrays(split)
        return np.stack([f.mean(axis=0) for f in frames]), labels

    Xtr, ytr = pooled("train")
    clf = LogisticRegression(max_iter=2000).fit(Xtr, ytr)
    out = {"train": float(clf.score(Xtr, ytr))}
    for split in ("eval_id", "eval_ood"):
        if ds.split(split):
            X, y = pooled(split)
            out[split] = float(clf.score(X, y))
    return out
