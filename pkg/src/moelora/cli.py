"""Command-line entry point: data generation, training, evaluation and analysis runs.

Config files are flat ``key = value`` lines with ``#`` comments. Keys are the
fields of :class:`BackboneConfig` and :class:`TrainConfig`, ``corpus.<field>``
for the corpus manifest (``corpus.<split>_bona`` / ``corpus.<split>_spoof`` for
clip counts), plus ``data`` and ``out``. ``--set key=value`` overrides the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .corpus import SPLITS, CorpusManifest, Dataset, gen_dataset, read_dataset, write_dataset
from .metrics import (
    PAPER_DIM,
    PAPER_LAYERS,
    EvalRecord,
    compute_eer,
    count_params,
    eer_by_family,
    expert_svd_map,
    format_seed_table,
    seed_aggregate,
    write_scores,
    write_svd_map,
)
from .model import Detector, pad_batch
from .moe import SITES, MoeLoraProjection
from .tensor import grad_check, log_softmax_nll, make_rng
from .trainer import Checkpoint, TrainConfig, fit, write_log

log = logging.getLogger("moelora")

EVAL_SPLITS = ("eval_id", "eval_ood")
CONFIG_ECHO = "config_echo.txt"


class UsageError(Exception):
    """Bad command-line usage (exit code 2)."""


# -- run configuration ---------------------------------------------------------

def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return [_parse_value(part.strip()) for part in text.split(",")]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return str(value).lower()
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusManifest = field(default_factory=CorpusManifest)
    data: str | None = None
    out: str | None = None

    @classmethod
    def from_items(cls, items: dict) -> RunConfig:
        backbone_keys = {f.name for f in fields(BackboneConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        corpus_scalars = {f.name for f in fields(CorpusManifest)} - {"counts", "families"}
        b, t, c = {}, {}, {}
        counts = CorpusManifest().counts
        run = cls()
        for key, value in items.items():
            if key in backbone_keys:
                b[key] = value
            elif key in train_keys:
                t[key] = value
            elif key in ("data", "out"):
                setattr(run, key, None if value is None else str(value))
            elif key.startswith("corpus."):
                name = key[len("corpus."):]
                split, _, cls_name = name.rpartition("_")
                if name in corpus_scalars:
                    c[name] = tuple(value) if isinstance(value, list) else value
                elif split in SPLITS and cls_name in ("bona", "spoof"):
                    counts[split][cls_name] = int(value)
                else:
                    raise ValueError(f"unknown corpus key {key!r}")
            else:
                raise ValueError(f"unknown config key {key!r}")
        run.backbone = BackboneConfig(**b)
        run.train = TrainConfig(**t)
        run.corpus = CorpusManifest(counts=counts, **c)
        run.corpus.validate()
        return run

    def items(self) -> dict:
        out = {}
        out.update(self.backbone.to_dict())
        out.update(self.train.to_dict())
        for key, value in self.corpus.to_dict().items():
            if key == "counts":
                for split, n in value.items():
                    out[f"corpus.{split}_bona"] = n.get("bona", 0)
                    out[f"corpus.{split}_spoof"] = n.get("spoof", 0)
            elif key != "families":
                out[f"corpus.{key}"] = value
        out["data"] = self.data
        out["out"] = self.out
        return out

    def echo(self) -> str:
        lines = ["# resolved run configuration; pass back with --config to reproduce"]
        lines += [f"{k} = {_format_value(v)}" for k, v in sorted(self.items().items())]
        return "\n".join(lines) + "\n"


def load_run_config(path: str | None, overrides: list[str] | None) -> RunConfig:
    items = read_config(path) if path else {}
    for entry in overrides or []:
        if "=" not in entry:
            raise UsageError(f"--set expects key=value, got {entry!r}")
        key, value = entry.split("=", 1)
        items[key.strip()] = _parse_value(value.strip())
    return RunConfig.from_items(items)


def _threads() -> int:
    raw = os.environ.get("MOELORA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MOELORA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"MOELORA_THREADS must be a positive integer, got {raw!r}")
    return n


# -- shared steps --------------------------------------------------------------------

def _dataset(run: RunConfig) -> Dataset:
    if run.data:
        return read_dataset(run.data)
    return gen_dataset(run.corpus)


def evaluate_split(model: Detector, ds: Dataset, split: str) -> list[EvalRecord]:
    clips = ds.split(split)
    if not clips:
        raise ValueError(f"split {split!r} is empty in this dataset")
    scores = model.scores([c.frames for c in clips])
    return [EvalRecord(c.id, float(s), c.label, c.family, c.split) for c, s in zip(clips, scores)]


def eer_report(records: list[EvalRecord]) -> list[str]:
    lines = []
    for split in sorted({r.split for r in records}, key=SPLITS.index):
        part = [r for r in records if r.split == split]
        lines.append(f"{split}\tEER {compute_eer(part)[0]:.4f}")
        for fam, eer in eer_by_family(part).items():
            lines.append(f"{split}\t{fam}\tEER {eer:.4f}")
    return lines


def train_run(run: RunConfig, ds: Dataset, out: Path) -> tuple[Detector, dict[str, float]]:
    """Fit one model and write the run directory; return the model and its eval-split EERs."""
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(run.echo(), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(ds.manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    model = Detector(run.backbone, seed=run.train.seed)
    X_tr, y_tr, _ = ds.arrays("train")
    X_dev, y_dev, _ = ds.arrays("dev")
    ckpt, history = fit(model, (X_tr, y_tr), (X_dev, y_dev), run.train)
    ckpt.save(out / "checkpoint.bin")
    write_log(history, out / "train_log.csv")
    records, eers = [], {}
    for split in EVAL_SPLITS:
        if ds.split(split):
            part = evaluate_split(model, ds, split)
            eers[split] = compute_eer(part)[0]
            records += part
    write_scores(records, out / "scores.csv")
    (out / "report.txt").write_text("\n".join(eer_report(records)) + "\n", encoding="utf-8")
    return model, eers


def _seed_job(args: tuple[dict, int, str | None]) -> dict[str, float]:
    items, seed, out = args
    run = RunConfig.from_items(items)
    run.train.seed = seed
    ds = _dataset(run)
    target = Path(out) if out else None
    if target is None:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            return train_run(run, ds, Path(tmp))[1]
    return train_run(run, ds, target)[1]


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = load_run_config(args.config, args.set)
    if args.seed is not None:
        run.corpus.seed = args.seed
    ds = gen_dataset(run.corpus)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    if args.data:
        run.data = args.data
    if args.out:
        run.out = args.out
    if not run.out:
        raise UsageError("train needs --out (or 'out' in the config)")
    ds = _dataset(run)
    _, eers = train_run(run, ds, Path(run.out))
    print("\n".join((Path(run.out) / "report.txt").read_text(encoding="utf-8").splitlines()))
    return 0


def cmd_eval(args) -> int:
    model = Checkpoint.load(args.ckpt).build_model()
    ds = read_dataset(args.data)
    splits = [s for s in SPLITS if ds.split(s)] if args.split == "all" else args.split.split(",")
    for s in splits:
        if s not in SPLITS:
            raise ValueError(f"unknown split {s!r}; expected one of {SPLITS} or 'all'")
    records = []
    for s in splits:
        records += evaluate_split(model, ds, s)
    try:
        write_scores(records, args.scores)
    except OSError as exc:
        raise OSError(f"cannot write scores to {args.scores}: {exc.strerror}") from exc
    print("\n".join(eer_report(records)))
    return 0


def expert_table(model: Detector) -> list[tuple[str, int, int, float]]:
    groups = {}
    for layer, site, proj in model.encoder.projections():
        if isinstance(proj, MoeLoraProjection):
            groups[(site, layer)] = proj.experts
        elif hasattr(proj, "experts"):
            groups[(site, layer)] = proj.experts
    if not groups:
        raise ValueError("checkpoint has no adapters to analyse")
    return expert_svd_map(groups)


def cmd_analyze_experts(args) -> int:
    model = Checkpoint.load(args.ckpt).build_model()
    rows = expert_table(model)
    try:
        write_svd_map(rows, args.out)
    except OSError as exc:
        raise OSError(f"cannot write {args.out}: {exc.strerror}") from exc
    print(f"wrote sigma_max for {len(rows)} experts to {args.out}")
    return 0


def cmd_seed_study(args) -> int:
    run = load_run_config(args.config, args.set)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    if len(seeds) < 2 or len(set(seeds)) != len(seeds):
        raise UsageError("--seeds needs at least two distinct seeds")
    out = Path(args.out)
    run_root = out.with_suffix("") if args.keep_runs else None
    items = run.items()
    jobs = [(items, s, str(run_root / f"seed{s}") if run_root else None) for s in seeds]
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            tables = list(pool.map(_seed_job, jobs))
    else:
        tables = [_seed_job(j) for j in jobs]
    for s, t in zip(seeds, tables):
        log.info("seed %d: %s", s, t)
    text = format_seed_table(seed_aggregate(tables))
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {out}: {exc.strerror}") from exc
    print(text, end="")
    return 0


def cmd_count_params(args) -> int:
    base = load_run_config(args.config, None).backbone if args.config else BackboneConfig()
    dims = {"model_dim": PAPER_DIM, "layers": PAPER_LAYERS, "heads": base.heads, "ffn_dim": None} if args.mode == "paper" else {}
    cfg = BackboneConfig.from_dict({
        **base.to_dict(),
        **dims,
        "adapter_mode": args.adapter,
        "num_experts": args.experts,
        "top_k": args.experts,
        "lora_rank": args.rank,
    })
    print("\n".join(count_params(cfg, args.mode).lines()))
    return 0


def grad_check_model(run: RunConfig, n_clips: int = 2, frames: int = 4, eps: float = 1e-6) -> float:
    """Max relative gradient error of the NLL through encoder, adapters and head.

    Adapter ``B`` factors and noise weights are randomised first so every path
    (experts, gate, noise) carries a nonzero gradient; the gate noise is
    redrawn from a fixed seed on each evaluation.
    """
    model = Detector(run.backbone, seed=run.train.seed)
    rng = make_rng(run.train.seed, 99)
    for name, t in model.parameters().items():
        if name.endswith(("B", "W_noise", "mu", "log_sigma")):
            t.data[...] = rng.normal(0.0, 0.3, size=t.shape)
    lengths = [frames - i % 2 for i in range(n_clips)]
    X, mask = pad_batch([rng.normal(0.0, 1.0, size=(T, run.backbone.input_dim)) for T in lengths])
    labels = np.arange(n_clips) % 2
    model.train()
    seed = run.train.seed

    def loss():
        return log_softmax_nll(model.forward(X, mask, make_rng(seed, 98)), labels)

    return grad_check(loss, model.parameters().values(), eps=eps)


def cmd_grad_check(args) -> int:
    run = load_run_config(args.config, args.set)
    err = grad_check_model(run, n_clips=args.clips, frames=args.frames)
    print(f"max relative error {err:.3e}")
    return 0


# -- parser ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moelora", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    with_config(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="fit one model and write a run directory")
    sp.add_argument("--data", help="dataset directory (default: generate from the config)")
    sp.add_argument("--out")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a split with a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="all", help="split name, comma list, or 'all'")
    sp.add_argument("--scores", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-experts", help="largest singular value of every expert update")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze_experts)

    sp = sub.add_parser("seed-study", help="fit once per seed and aggregate eval EERs")
    sp.add_argument("--seeds", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-runs", action="store_true", help="keep per-seed run directories next to --out")
    with_config(sp, required=True)
    sp.set_defaults(func=cmd_seed_study)

    sp = sub.add_parser("count-params", help="trainable parameter accounting")
    sp.add_argument("--experts", type=int, required=True)
    sp.add_argument("--rank", type=int, required=True)
    sp.add_argument("--mode", choices=("paper", "toy"), default="paper")
    sp.add_argument("--adapter", choices=("none", "single_lora", "moe_lora"), default="moe_lora")
    sp.add_argument("--config", help="config file supplying toy dimensions")
    sp.set_defaults(func=cmd_count_params)

    sp = sub.add_parser("grad-check", help="analytic vs numeric gradients of the full model")
    sp.add_argument("--clips", type=int, default=2)
    sp.add_argument("--frames", type=int, default=4)
    with_config(sp, required=True)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"moelora: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"moelora: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
