import functools
import os

import pytest

from ulamcert.map_model import registry_get
from ulamcert.ulam import Mesh, assemble

# Operators above a few thousand cells are worth keeping between test runs.
CACHE_DIR = os.environ.get("ULAMCERT_TEST_CACHE", os.path.join(os.path.dirname(__file__), ".cache"))


@functools.lru_cache(maxsize=None)
def get_map(name, alpha=None, b0=None):
    return registry_get(name, alpha, b0)


@functools.lru_cache(maxsize=8)
def get_operator(name, exponent):
    return assemble(get_map(name), Mesh.from_exponent(exponent))


@pytest.fixture(scope="session")
def lanford():
    return get_map("lanford")


@pytest.fixture(scope="session")
def doubling():
    return get_map("doubling")


@pytest.fixture(scope="session")
def cache_dir():
    os.makedirs(CACHE_DIR, exist_ok=True)
    return CACHE_DIR


@functools.lru_cache(maxsize=None)
def get_contraction(name, exponent, target=1 / 64):
    """Contraction data depend on the operator only, not on the Lasota-Yorke constants."""
    from ulamcert.decay import certify_contraction

    if exponent >= 13:
        from ulamcert.ulam import cached_assemble

        os.makedirs(CACHE_DIR, exist_ok=True)
        P = cached_assemble(get_map(name), Mesh.from_exponent(exponent), CACHE_DIR)
    else:
        P = get_operator(name, exponent)
    return certify_contraction(P, target)


# Acceptance tests register one verdict line per criterion; they are echoed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
