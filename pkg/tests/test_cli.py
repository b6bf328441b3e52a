import csv
import subprocess
import sys

import numpy as np
import pytest

from moelora.backbone import BackboneConfig
from moelora.cli import RunConfig, _format_value, _parse_value, load_run_config, main, read_config
from moelora.model import Detector
from moelora.trainer import Checkpoint

TINY = """\
# tiny run for tests
layers = 1
model_dim = 8
heads = 2
head_dim = 6
lora_rank = 2
num_experts = 2
top_k = 2
max_epochs = 2
lr_min = 1e-4
lr_max = 1e-3
corpus.seed = 4
corpus.max_frames = 44
"""
COUNTS = "".join(f"corpus.{s}_{c} = 6\n" for s in ("train", "dev", "eval_id", "eval_ood") for c in ("bona", "spoof"))


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY + COUNTS, encoding="utf-8")
    return p


def test_value_parsing_round_trip():
    for text, value in (("true", True), ("None", None), ("3", 3), ("1e-05", 1e-5), ("0.08,0.15", [0.08, 0.15]), ("abc", "abc")):
        assert _parse_value(text) == value
    for value in (True, None, 3, 1e-7, "x", (0.1, 0.2)):
        parsed = _parse_value(_format_value(value))
        assert parsed == (list(value) if isinstance(value, tuple) else value)


def test_read_config_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("layers = 2\nnot a pair\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bad.cfg:2"):
        read_config(p)
    with pytest.raises(ValueError, match="unknown config key"):
        RunConfig.from_items({"layer": 2})
    with pytest.raises(ValueError):
        RunConfig.from_items({"corpus.train_cats": 2})


def test_echo_reproduces_config(cfg_file, tmp_path):
    run = load_run_config(str(cfg_file), ["lora_rank=1"])
    assert run.backbone.lora_rank == 1 and run.corpus.counts["dev"]["spoof"] == 6
    echo = tmp_path / "echo.cfg"
    echo.write_text(run.echo(), encoding="utf-8")
    again = load_run_config(str(echo), None)
    assert again.items() == run.items()


def test_count_params_command(capsys):
    assert main(["count-params", "--experts", "3", "--rank", "8", "--mode", "paper"]) == 0
    out = capsys.readouterr().out
    assert "rounded       5.76M" in out and "head params   447000" in out
    assert main(["count-params", "--experts", "1", "--rank", "4", "--adapter", "single_lora"]) == 0
    assert "1.23M" in capsys.readouterr().out
    assert main(["count-params", "--experts", "3", "--rank", "8", "--mode", "toy"]) == 0
    assert "mode          toy" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["count-params", "--experts", "3", "--rank", "8", "--bogus"])
    assert exc.value.code == 2
    assert main(["eval", "--ckpt", str(tmp_path / "none.bin"), "--data", str(tmp_path), "--scores", "x.csv"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("moelora: error:") and "none.bin" in err[-1]
    assert main(["seed-study", "--config", str(tmp_path / "missing.cfg"), "--seeds", "1,2", "--out", "x"]) == 1


def test_seed_list_usage_error(cfg_file):
    assert main(["seed-study", "--config", str(cfg_file), "--seeds", "1", "--out", "x.csv"]) == 2
    assert main(["seed-study", "--config", str(cfg_file), "--seeds", "1,a", "--out", "x.csv"]) == 2


def test_threads_env_validation(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("MOELORA_THREADS", "0")
    assert main(["seed-study", "--config", str(cfg_file), "--seeds", "1,2", "--out", str(tmp_path / "s.csv")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "moelora.cli", "count-params", "--experts", "7", "--rank", "8"],
                         capture_output=True, text=True, check=True)
    assert "12.83M" in res.stdout


def test_gen_train_eval_analyze(cfg_file, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--seed", "4", "--config", str(cfg_file)]) == 0
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--config", str(cfg_file), "--out", str(run)]) == 0
    for name in ("config_echo.txt", "manifest.json", "checkpoint.bin", "train_log.csv", "scores.csv", "report.txt"):
        assert (run / name).exists(), name
    report = (run / "report.txt").read_text()
    assert "eval_ood\tA04\tEER" in report and "eval_ood\tA05\tEER" in report
    ckpt_bytes = (run / "checkpoint.bin").read_bytes()
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run / "checkpoint.bin"), "--data", str(data), "--split", "eval_id",
                 "--scores", str(tmp_path / "s.csv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("eval_id\tEER") and "eval_id\tA01\tEER" in out
    assert (run / "checkpoint.bin").read_bytes() == ckpt_bytes
    assert {p.name: p.read_bytes() for p in data.iterdir()} == before
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12 and {r["split"] for r in rows} == {"eval_id"}
    assert main(["analyze-experts", "--ckpt", str(run / "checkpoint.bin"), "--out", str(tmp_path / "svd.csv")]) == 0
    table = (tmp_path / "svd.csv").read_text().splitlines()
    assert table[0] == "site,layer,expert,sigma_max" and len(table) == 1 + 4 * 1 * 2
    # reproduce the run from its echo
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(run / "config_echo.txt"), "--data", str(data), "--out", str(rerun)]) == 0
    assert (rerun / "checkpoint.bin").read_bytes() == ckpt_bytes
    assert (rerun / "scores.csv").read_bytes() == (run / "scores.csv").read_bytes()


def test_eval_transparency_untrained_vs_adapter_free(cfg_file, tmp_path):
    data = tmp_path / "data"
    main(["gen-data", "--out", str(data), "--config", str(cfg_file)])
    base = dict(layers=1, model_dim=8, heads=2, head_dim=6, lora_rank=2, num_experts=2, top_k=2)
    for mode in ("moe_lora", "none"):
        Checkpoint.from_model(Detector(BackboneConfig(adapter_mode=mode, **base), seed=3)).save(tmp_path / f"{mode}.bin")
        assert main(["eval", "--ckpt", str(tmp_path / f"{mode}.bin"), "--data", str(data),
                     "--scores", str(tmp_path / f"{mode}.csv")]) == 0
    assert (tmp_path / "moe_lora.csv").read_bytes() == (tmp_path / "none.csv").read_bytes()


def test_seed_study_three_seeds(cfg_file, tmp_path, capsys):
    out = tmp_path / "study.csv"
    assert main(["seed-study", "--config", str(cfg_file), "--seeds", "1,2,3", "--out", str(out), "--keep-runs"]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["split"] for r in rows] == ["eval_id", "eval_ood"]
    assert all(r["n_seeds"] == "3" and float(r["std_eer"]) >= 0 and np.isfinite(float(r["mean_eer"])) for r in rows)
    assert (tmp_path / "study" / "seed2" / "checkpoint.bin").exists()


def test_grad_check_command(cfg_file, capsys):
    assert main(["grad-check", "--config", str(cfg_file)]) == 0
    err = float(capsys.readouterr().out.split()[-1])
    assert err <= 1e-4
