import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from falldef import dgru  # noqa: E402
from falldef.dataset import NormStats  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_model(seed, hidden_dims=(4,), window_size=5, scale=1.0, norm=None):
    m = dgru.init_model(seed, 3, hidden_dims, window_size=window_size, norm=norm)
    rng = np.random.default_rng(seed + 1000)
    for _, arr in m.named_parameters():
        arr[...] = rng.normal(0.0, 0.5 * scale, size=arr.shape)
    return m


@pytest.fixture
def small_model():
    norm = NormStats(np.array([0.1, -0.9, 0.05]), np.array([0.3, 0.4, 0.5]), True)
    return random_model(3, hidden_dims=(6, 5), window_size=7, norm=norm)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _criteria[marker.args[0]] = (status, marker.args[1], details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, details = _criteria[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{details}]" if details else ""))
