import numpy as np
import pytest
import torch

from famsec.data import SyntheticSpec, synthetic_imageset
from famsec.lora import FamConfig
from famsec.vit import TOY_SPEC, EncoderPair, build_encoder


@pytest.fixture
def toy_encoder():
    return build_encoder(TOY_SPEC, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def images(rng):
    return rng.random((8, 32, 32, 3)).astype(np.float32)


@pytest.fixture
def toy_pair():
    from famsec.lora import inject

    pair = EncoderPair.from_encoder(build_encoder(TOY_SPEC, seed=0))
    inject(pair.extractor, FamConfig(adapted_block_count=2), seed=0)
    return pair


@pytest.fixture(scope="session")
def small_synth():
    """40+40 training and 40+40 test images of family A, in memory."""
    train = synthetic_imageset([SyntheticSpec("A", "train", 40)])
    test = synthetic_imageset([SyntheticSpec("A", "test", 40)])
    return train, test


@pytest.fixture(autouse=True)
def _restore_torch_rng():
    state = torch.random.get_rng_state()
    yield
    torch.random.set_rng_state(state)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(results):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
