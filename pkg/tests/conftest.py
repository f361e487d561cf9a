import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from nnpassport.data import synthetic_dataset
from nnpassport.models import build_model
from nnpassport.passports import gen_feature_map_passport
from nnpassport.training import TrainConfig, train

# filled by the acceptance suite, printed after the run
ACCEPTANCE_LINES: list[str] = []

SMALL = dict(image_size=8, num_classes=4, widths=(8, 8))


@pytest.fixture(scope="session")
def small_task():
    return synthetic_dataset(num_classes=4, samples_per_class=60, image_size=8, seed=3)


@pytest.fixture(scope="session")
def small_reference(small_task):
    ref = build_model(kind=None, **SMALL)
    result = train(ref, small_task, TrainConfig(epochs=10, batch_size=16, seed=11))
    return ref, result


@pytest.fixture(scope="session")
def small_protected(small_task, small_reference):
    """V3 model with a random-image passport drawn from three training images."""
    ref, _ = small_reference
    model = build_model(kind="V3", **SMALL)
    passport = gen_feature_map_passport(ref, small_task.train_x[:3], "random", 5, "V3", image_ids=[0, 1, 2])
    model.bind(passport)
    result = train(model, small_task, TrainConfig(epochs=10, batch_size=16, seed=12))
    return model, result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
