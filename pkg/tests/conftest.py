"""Shared fixtures: everything is sized so the whole suite runs on one CPU."""

import numpy as np
import pytest

from deskdiff.denoiser import ModelDims
from deskdiff.experts import init_bank
from deskdiff.schedule import build_linear
from deskdiff.synthdata import build_vocab, generate_dataset


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def tiny_dims(vocab):
    # 8x8 images, 4 patch tokens, narrow model: big enough to exercise every
    # code path, small enough for finite differences over all parameters.
    return ModelDims(height=8, width=8, channels=3, patch=4, d=8, d_y=6,
                     depth=1, text_depth=1, vocab_size=len(vocab),
                     max_text_len=64)


@pytest.fixture(scope="session")
def sched10():
    return build_linear(10, 1e-3, 0.2)


@pytest.fixture(scope="session")
def tiny_bank(tiny_dims):
    return init_bank(tiny_dims, 2, 10, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(vocab):
    samples, ds_vocab = generate_dataset(8, seed=11, size=8)
    assert ds_vocab.tokens == vocab.tokens
    return samples


def nudge(flat, seed=0, scale=1e-2):
    """Shift every parameter off its init so no gradient path is dead.

    The output head starts at zero, which blocks upstream flow; gradient
    checks on the full model first move all leaves a little.
    """
    rng = np.random.default_rng(seed)
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in flat.items()}


# One line per end-to-end gate, echoed after the run so the battery reads
# as a checklist even with output capture on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance gates")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
