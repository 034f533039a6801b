from __future__ import annotations

import numpy as np
import pytest

from chromapred.dataset import BlockSample, CorpusConfig, extract_corpus
from chromapred.model import Widths, boundary_length


def random_block(rng: np.random.Generator, n: int, bitdepth: int = 8, p_missing: float = 0.0) -> BlockSample:
    peak = (1 << bitdepth) - 1
    b = boundary_length(n)
    avail = rng.random(b) >= p_missing
    s0 = rng.integers(0, peak + 1, (3, b)).astype(np.uint16)
    s0[:, ~avail] = 1 << (bitdepth - 1)
    return BlockSample(
        n=n,
        x0=rng.integers(0, peak + 1, (n, n)).astype(np.uint16),
        s0=s0,
        available=avail,
        z=rng.integers(0, peak + 1, (2, n, n)).astype(np.uint16),
        bitdepth=bitdepth,
        origin=(int(rng.integers(0, 1000)), int(rng.integers(0, 1000))),
    )


TINY = Widths(boundary=4, luma=8, attention=4, head=4, bottleneck=3)


@pytest.fixture(scope="session")
def sample_corpus(tmp_path_factory):
    pytest.importorskip("skimage")
    from chromapred.samples import write_sample_corpus

    directory = tmp_path_factory.mktemp("corpus")
    write_sample_corpus(directory, 20)
    return directory


@pytest.fixture(scope="session")
def corpus_blocks(sample_corpus):
    """Desk-scale training set: 32 blocks per size from each of the 20 images."""
    return extract_corpus(CorpusConfig(str(sample_corpus), per_image=32, seed=1))


@pytest.fixture(scope="session")
def trained_scheme1(corpus_blocks):
    """Scheme 1 trained for 30 epochs on the sample corpus (shared by slow checks)."""
    from chromapred.model import SchemeId
    from chromapred.training import TrainConfig, train_multimodel

    cfg = TrainConfig(learning_rate=1e-3, epochs=30, seed=0)
    return train_multimodel(corpus_blocks, cfg, SchemeId.from_variant("1", "train"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
