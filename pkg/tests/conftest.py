import hypothesis
import numpy as np
import pytest

from facedyn.synth import face_model, texture_image

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.load_profile("default")

ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.fixture(scope="session")
def face():
    return face_model(seed=0)


@pytest.fixture(scope="session")
def small_face():
    return face_model(seed=3, grid=(12, 12))


@pytest.fixture(scope="session")
def texture():
    return texture_image(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(f"criterion {key}: {ACCEPTANCE_RESULTS[key]}")
