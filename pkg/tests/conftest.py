import numpy as np
import pytest

from moelora.backbone import BackboneConfig
from moelora.corpus import CorpusManifest, gen_dataset


def tiny_config(**kw) -> BackboneConfig:
    base = dict(layers=2, model_dim=8, heads=2, input_dim=4, lora_rank=2, num_experts=3, top_k=3, head_dim=6)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def small_dataset():
    m = CorpusManifest.small(seed=3, n=12)
    m.min_frames, m.max_frames = 40, 48
    return gen_dataset(m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
