import numpy as np
import pytest

from dotuda.data import SyntheticSpec, generate_pair
from dotuda.model import DotVitConfig
from dotuda.trainer import TrainConfig

TINY_SPEC = SyntheticSpec(num_classes=3, samples_per_class=8, image_size=8, seed=3)
TINY_MODEL = DotVitConfig(image_size=8, patch_size=4, embed_dim=8, head_dim=4, num_heads=2, depth=1, num_classes=3)


def tiny_train_config(**kw) -> TrainConfig:
    base = dict(stage1_epochs=2, stage2_epochs=4, batch_size=8, refine_start=1, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_pair():
    return generate_pair(TINY_SPEC)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, text = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}")
