import sys

import pytest

from compdef.combiner import HeadConfig
from compdef.data import SyntheticSpec
from compdef.finetune import FinetuneConfig
from compdef.models import TrainConfig
from compdef.pipeline import CompositionalConfig


@pytest.fixture(scope="session")
def tiny_train_config():
    """Seconds-scale training settings for plumbing tests."""
    return TrainConfig(
        filters=8, kernel=5, pool=4,
        compositional=CompositionalConfig(K=8, M=1, em_iters=3, object_samples=2000, background_samples=500),
        head=HeadConfig(epochs=60),
        finetune=FinetuneConfig(lr=0.2, epochs=2, init="random", init_scale=0.01),
    )


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_classes=3, size=32, n_per_class=14, seed=3, test_fraction=0.5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
