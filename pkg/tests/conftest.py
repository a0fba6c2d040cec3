import os

import numpy as np
import pytest
from hypothesis import settings

from forgelab.diffusion import make_schedule

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(1000, 100, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register "n: PASS/FAIL detail" lines here
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
