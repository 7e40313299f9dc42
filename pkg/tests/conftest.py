import numpy as np
import pytest

from frbattery.cell import default_params
from frbattery.market import SynthProfile, synth_generator


@pytest.fixture(scope="session")
def params():
    return default_params()


@pytest.fixture(scope="session")
def fast_params():
    return default_params().with_aging(10)


@pytest.fixture(scope="session")
def synth8():
    """Eight synthetic weeks at full 2 s resolution."""
    return synth_generator(SynthProfile(n_weeks=8), 123)


@pytest.fixture(scope="session")
def small_synth():
    """Short coarse dataset for quick market and I/O tests."""
    return synth_generator(SynthProfile(n_weeks=9, S=60), 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` get one PASS/FAIL line in the
# terminal summary; ``record_property("detail", ...)`` adds the measured values.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n, title = m.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call":
        _CRITERIA[n] = (title, rep.passed, detail)
    elif rep.failed:
        _CRITERIA[n] = (title, False, detail or f"{rep.when} error")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
