import numpy as np
import pytest
import torch

from daffnet import ops, synthdata


@pytest.fixture
def f64():
    with ops.precision(torch.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four labelled 32-cubed pairs, the last one held out."""
    root = tmp_path_factory.mktemp("corpus")
    synthdata.write_corpus(root, pairs=4, dims=(32, 32, 32), seed=7, held_out=1)
    return root


@pytest.fixture(scope="session")
def unlabelled_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus_nolabels")
    synthdata.write_corpus(root, pairs=3, dims=(32, 32, 32), seed=8, held_out=1, labels=False)
    return root


SMALL_ARCH = dict(
    encoder_channels=(4, 4, 4, 4, 4),
    seg_channels=(4, 4, 4, 4, 4),
    fusion_channels=(4, 4, 4, 4, 4),
)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """``record(number, passed, detail)`` prints and keeps one summary line per criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
