import numpy as np
import pytest

from adaptive_distill.boxes import make_anchors
from adaptive_distill.model import DenseModel
from adaptive_distill.scenes import GeneratorConfig, generate_dataset

SMALL = GeneratorConfig(height=6, width=6, num_features=4, num_classes=2, amplitude=3.0,
                        min_size=1.0, max_size=3.0, mean_objects=1.5)
SMALL_SCALES = (1.5, 3.0)


@pytest.fixture(scope="session")
def small_world():
    """A 6x6 grid, 4 features, 2 classes: cheap enough for exact checks."""
    return SMALL


@pytest.fixture(scope="session")
def small_anchors():
    return make_anchors(SMALL.height, SMALL.width, SMALL_SCALES)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_dataset(SMALL, 24, 5)


def random_model(window=3, seed=0, scale=0.3):
    m = DenseModel(SMALL.num_classes, SMALL.num_features, len(SMALL_SCALES), window)
    m.params[:] = np.random.default_rng(seed).normal(0, scale, m.num_params)
    return m


# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
