from collections import Counter

import numpy as np
import pytest

from msetrep.datagen import SyntheticUniverseSpec, gen_universe
from msetrep.multiset import Multiset


def counter_of(m: Multiset) -> Counter:
    """Independent oracle: integer multisets as ``collections.Counter``."""
    return Counter({x: int(v) for x, v in m.items()})


def multiset_of(c: Counter) -> Multiset:
    return Multiset({x: v for x, v in c.items() if v > 0})


def random_int_multiset(rng: np.random.Generator, universe: int = 8, max_mult: int = 5) -> Multiset:
    return Multiset({x: int(rng.integers(0, max_mult + 1)) for x in range(1, universe + 1)})


@pytest.fixture(scope="session")
def small_pools():
    return gen_universe(SyntheticUniverseSpec(k=3, d=4, n_train=300, n_eval=120, seed=11))


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture
def verdict(request):
    """Record ``(passed, detail)`` for the test's acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args

    def record(passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed:
        number, title = marker.args
        if number not in _ACCEPTANCE or _ACCEPTANCE[number][1]:
            _ACCEPTANCE[number] = (title, False, f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
