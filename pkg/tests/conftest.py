import numpy as np
import pytest
import torch

from avff.config import preset
from avff.data.manifest import load_manifest
from avff.data.synthetic import generate_synthetic_corpus

torch.set_num_threads(1)


def micro_config(**overrides):
    """d_e = 8, two tokens per slice in each modality, four slices."""
    base = dict(num_slices=4, visual_size=4, visual_patch=(2, 4, 4), audio_patch=(8, 16),
                encoder_dim=8, decoder_dim=8, num_heads=2, encoder_layers=1, decoder_layers=1,
                critic_hidden=4, head_hidden=8, batch_size=4)
    return preset("tiny", **{**base, **overrides})


@pytest.fixture
def tiny():
    return preset("tiny")


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """24 real sources and 6 clips per fake category, tiny geometry."""
    out = tmp_path_factory.mktemp("corpus")
    generate_synthetic_corpus(24, 6, preset("tiny"), np.random.default_rng(123), out)
    return load_manifest(out / "manifest.tsv")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one criterion line and asserts it."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
