"""Equal error rate, DET points, trainable-parameter accounting, expert spectra and seed aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backbone import BackboneConfig
from .lora import LoraExpert, sigma_max
from .moe import SITES

# Trainable parameter count of the graph-attention back end kept as a constant
HEAD_CONSTANT = 447_000
PAPER_DIM = 1024
PAPER_LAYERS = 24


@dataclass
class EvalRecord:
    id: str
    score: float
    label: int  # 0 bonafide, 1 spoof
    family: str = ""
    split: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite score for clip {self.id!r}")


def _split_scores(records) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records])
    return _split_arrays(scores, labels)


def _split_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    bona, spoof = scores[labels == 0], scores[labels == 1]
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("EER needs at least one bonafide and one spoof score")
    return bona, spoof


def _operating_points(bona: np.ndarray, spoof: np.ndarray):
    """Thresholds at every distinct score plus +inf, with FRR and FAR at each.

    FRR(t) = share of bonafide scores < t; FAR(t) = share of spoof scores >= t.
    """
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    frr = np.searchsorted(np.sort(bona), thresholds, side="left") / bona.size
    far = 1.0 - np.searchsorted(np.sort(spoof), thresholds, side="left") / spoof.size
    return thresholds, far, frr


def det_points(records=None, *, scores=None, labels=None) -> list[tuple[float, float]]:
    """(FAR, FRR) pairs for increasing thresholds; FAR falls while FRR rises."""
    bona, spoof = _split_scores(records) if records is not None else _split_arrays(scores, labels)
    _, far, frr = _operating_points(bona, spoof)
    return list(zip(far.tolist(), frr.tolist()))


def compute_eer(records=None, *, scores=None, labels=None) -> tuple[float, float]:
    """Equal error rate and the threshold where FRR and FAR cross.

    Accepts a list of :class:`EvalRecord` or parallel ``scores``/``labels``
    arrays (label 0 is bonafide). The crossing is linearly interpolated
    between the two adjacent operating points where ``FRR - FAR`` changes sign.
    """
    bona, spoof = _split_scores(records) if records is not None else _split_arrays(scores, labels)
    thresholds, far, frr = _operating_points(bona, spoof)
    diff = frr - far
    j = int(np.argmax(diff >= 0))  # diff ends at +1 (threshold +inf), so a crossing exists
    if diff[j] == 0 or j == 0:
        return float(frr[j]), float(thresholds[j])
    d0, d1 = diff[j - 1], diff[j]
    w = d0 / (d0 - d1)
    eer = frr[j - 1] + w * (frr[j] - frr[j - 1])
    hi = thresholds[j] if np.isfinite(thresholds[j]) else thresholds[j - 1]
    return float(eer), float(thresholds[j - 1] + w * (hi - thresholds[j - 1]))


def eer_by_family(records: Sequence[EvalRecord]) -> dict[str, float]:
    """EER of each spoof family against all bonafide records of the same list."""
    bona = [r for r in records if r.label == 0]
    out = {}
    for fam in sorted({r.family for r in records if r.label == 1}):
        out[fam] = compute_eer(bona + [r for r in records if r.label == 1 and r.family == fam])[0]
    return out


# -- scores file ---------------------------------------------------------------

SCORE_COLUMNS = ["id", "score", "label", "family", "split"]
_LABEL_NAMES = ("bonafide", "spoof")


def write_scores(records: Iterable[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in records:
            w.writerow([r.id, repr(float(r.score)), _LABEL_NAMES[r.label], r.family, r.split])


def read_scores(path: str | Path) -> list[EvalRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(SCORE_COLUMNS)}")
        return [
            EvalRecord(row["id"], float(row["score"]), _LABEL_NAMES.index(row["label"]), row["family"], row["split"])
            for row in reader
        ]


# -- parameter accounting --------------------------------------------------------

@dataclass
class ParamCountReport:
    mode: str
    adapter_mode: str
    num_experts: int
    lora_rank: int
    layers: int
    model_dim: int
    experts: int
    routers: int
    head: int
    total: int = field(init=False)

    def __post_init__(self):
        self.total = self.experts + self.routers + self.head

    @property
    def rounded(self) -> str:
        return format_count(self.total)

    def lines(self) -> list[str]:
        return [
            f"mode          {self.mode}",
            f"adapter_mode  {self.adapter_mode}",
            f"experts       {self.num_experts}",
            f"rank          {self.lora_rank}",
            f"layers        {self.layers}",
            f"model_dim     {self.model_dim}",
            f"expert params {self.experts}",
            f"router params {self.routers}",
            f"head params   {self.head}",
            f"total         {self.total}",
            f"rounded       {self.rounded}",
        ]


def format_count(n: int) -> str:
    """``1233432 -> '1.23M'``, ``447000 -> '447K'``."""
    if n >= 1_000_000:
        return f"{n / 1e6:.2f}M"
    if n >= 1_000:
        return f"{round(n / 1e3)}K"
    return str(n)


def count_params(cfg: BackboneConfig, count_mode: str = "paper", head_params: int | None = None) -> ParamCountReport:
    """Trainable parameters of the adapted model.

    ``paper`` mode uses a 24-layer, 1024-wide encoder with the 447K back-end
    constant. ``toy`` mode uses the config's own dimensions and, for the head,
    ``head_params`` (defaults to the two-layer MLP's size).
    Per Q/K/V/P site and layer: each expert holds ``2 r d`` values, and each
    gate holds two ``N x d`` matrices plus a mean and a log-scale per expert.
    """
    if count_mode not in ("paper", "toy"):
        raise ValueError(f"count_mode must be 'paper' or 'toy', got {count_mode!r}")
    if count_mode == "paper":
        d, L, head = PAPER_DIM, PAPER_LAYERS, HEAD_CONSTANT
    else:
        d, L = cfg.model_dim, cfg.layers
        head = head_params if head_params is not None else cfg.head_dim * (d + 1) + 2 * (cfg.head_dim + 1)
    sites = len(SITES) * L
    r = cfg.lora_rank
    if cfg.adapter_mode == "none":
        n, experts, routers = 0, 0, 0
    elif cfg.adapter_mode == "single_lora":
        n, experts, routers = 1, 2 * r * d * sites, 0
    else:
        n = cfg.num_experts
        experts = n * 2 * r * d * sites
        routers = (2 * n * d + 2 * n) * sites
    return ParamCountReport(count_mode, cfg.adapter_mode, n, r if n else 0, L, d, experts, routers, head)


# -- expert spectra ----------------------------------------------------------------

SVD_COLUMNS = ["site", "layer", "expert", "sigma_max"]


def expert_svd_map(experts: Mapping[tuple[str, int], Sequence[LoraExpert]]) -> list[tuple[str, int, int, float]]:
    """Largest singular value of every expert, keyed by (site, layer)."""
    rows = []
    for (site, layer), group in sorted(experts.items(), key=lambda kv: (SITES.index(kv[0][0]), kv[0][1])):
        for i, e in enumerate(group):
            rows.append((site, layer, i, sigma_max(e)))
    return rows


def write_svd_map(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SVD_COLUMNS)
        for site, layer, expert, s in rows:
            w.writerow([site, layer, expert, repr(float(s))])


# -- seed study ---------------------------------------------------------------------

SEED_COLUMNS = ["split", "n_seeds", "mean_eer", "std_eer"]


def seed_aggregate(run_tables: Sequence[Mapping[str, float]]) -> list[tuple[str, int, float, float]]:
    """Per eval set, sample mean and sample standard deviation (n-1) across seeds."""
    if len(run_tables) < 2:
        raise ValueError(f"seed aggregation needs at least 2 runs, got {len(run_tables)}")
    names = list(run_tables[0])
    for t in run_tables[1:]:
        if set(t) != set(names):
            raise ValueError(f"eval sets differ between runs: {sorted(names)} vs {sorted(t)}")
    rows = []
    for name in names:
        vals = np.array([t[name] for t in run_tables], dtype=np.float64)
        rows.append((name, len(vals), float(vals.mean()), float(vals.std(ddof=1))))
    return rows


def format_seed_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEED_COLUMNS)
    for name, n, mean, std in rows:
        w.writerow([name, n, repr(mean), repr(std)])
    return buf.getvalue()
