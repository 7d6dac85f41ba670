import numpy as np
import pytest
from hypothesis import settings

from ttias.forward import build_system
from ttias.geometry import quarter_annulus

# fixed seeds: property tests are reproducible run to run
settings.register_profile("ttias", derandomize=True, deadline=None, max_examples=40)
settings.load_profile("ttias")


@pytest.fixture(scope="session")
def small_system():
    """Quarter annulus, 8x8 interior dofs, N_t = 4."""
    sys, disc = build_system(quarter_annulus(), 10, degree=2, N_t=4)
    return sys


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_AC_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_AC_KEY] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """Record ``(criterion, passed, detail)``; printed in the terminal summary."""
    results = request.config.stash[_AC_KEY]

    def record(name: str, passed: bool, detail: str) -> None:
        results[name] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_AC_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results, key=lambda s: int(s[2:])):
        ok, detail = results[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
