import random

import pytest

from drmmesh.pairing import TransparentGroup, make_group


@pytest.fixture(scope="session")
def small_group():
    return TransparentGroup(101)


@pytest.fixture(scope="session")
def transparent():
    return make_group("transparent")


@pytest.fixture(scope="session")
def production():
    return make_group("production")


@pytest.fixture(scope="session", params=["transparent", "production"])
def group(request):
    return make_group(request.param)


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
