import json

import numpy as np
import pytest

from moelora.corpus import (
    BAND,
    FAMILIES,
    CorpusManifest,
    gen_clip,
    gen_dataset,
    logistic_probe,
    read_dataset,
    write_dataset,
)
from moelora.tensor import make_rng


@pytest.fixture(scope="module")
def default_dataset():
    return gen_dataset(CorpusManifest())


def test_gen_clip_deterministic():
    a = gen_clip("bona", 50, make_rng(1, 2))
    b = gen_clip("bona", 50, make_rng(1, 2))
    assert np.array_equal(a.frames, b.frames) and a.label == 0 and a.frames.shape == (50, 16)


def test_quantised_family_has_at_most_8_levels():
    x = gen_clip("A02", 120, make_rng(3)).frames
    assert all(np.unique(x[:, j]).size <= 8 for j in range(x.shape[1]))


def test_band_zeroed():
    x = gen_clip("A04", 60, make_rng(4)).frames
    assert not x[:, BAND].any() and x[:, :4].any()


def test_offset_and_ripple_definitions():
    for fam, expected in (("A05", lambda x: x + 0.5), ("A01", lambda x: x + 0.3 * (-1.0) ** np.arange(len(x))[:, None])):
        bona = gen_clip("bona", 45, make_rng(5)).frames
        spoof = gen_clip(fam, 45, make_rng(5)).frames
        assert np.allclose(spoof, expected(bona), atol=1e-6)


def test_smear_is_window5_moving_average():
    bona = gen_clip("bona", 45, make_rng(6)).frames
    smear = gen_clip("A03", 45, make_rng(6)).frames
    assert np.allclose(smear[10], bona[8:13].mean(axis=0), atol=1e-6)


def test_unknown_family():
    with pytest.raises(ValueError):
        gen_clip("A09", 40, make_rng(0))


def test_default_dataset_counts_and_family_rules(default_dataset):
    ds = default_dataset
    assert len(ds) == 3200
    sizes = {s: len(ds.split(s)) for s in ("train", "dev", "eval_id", "eval_ood")}
    assert sizes == {"train": 2000, "dev": 400, "eval_id": 400, "eval_ood": 400}
    for s in ("train", "dev", "eval_id"):
        clips = ds.split(s)
        assert sum(c.label == 0 for c in clips) == len(clips) // 2
        assert {c.family for c in clips if c.label} == {"A01", "A02", "A03"}
    ood = {c.family for c in ds.split("eval_ood") if c.label}
    assert ood == {"A04", "A05"}
    assert all((c.family == "bona") == (c.label == 0) for c in ds.clips)
    assert all(40 <= c.T <= 120 for c in ds.clips)


def test_manifest_validation():
    m = CorpusManifest()
    m.families = dict(m.families, eval_ood=["A01", "A04"])
    with pytest.raises(ValueError):
        m.validate()


def test_round_trip_and_byte_identical_regeneration(tmp_path):
    m = CorpusManifest.small(seed=9, n=5)
    first = write_dataset(gen_dataset(m), tmp_path / "a")
    back = read_dataset(first)
    regen = write_dataset(gen_dataset(CorpusManifest.from_dict(json.loads((first / "manifest.json").read_text()))), tmp_path / "b")
    for name in ("manifest.json", "clips.bin", "splits.csv"):
        assert (first / name).read_bytes() == (regen / name).read_bytes()
    orig = gen_dataset(m)
    assert [c.id for c in back.clips] == [c.id for c in orig.clips]
    assert all(np.array_equal(a.frames, b.frames) and a.split == b.split and a.family == b.family
               for a, b in zip(back.clips, orig.clips))
    header = (tmp_path / "a" / "splits.csv").read_text().splitlines()[0]
    assert header == "id,split,family,label"


def test_read_missing_dataset(tmp_path):
    with pytest.raises(OSError, match=str(tmp_path)):
        read_dataset(tmp_path / "nope")


def test_families_listed():
    assert FAMILIES == ("bona", "A01", "A02", "A03", "A04", "A05")


def test_logistic_probe_invariant(default_dataset):
    """Linear probe on mean-pooled raw frames: >90% in-domain, <75% on held-out families."""
    acc = logistic_probe(default_dataset)
    assert acc["eval_id"] > 0.90, acc
    assert acc["eval_ood"] < 0.75, acc
