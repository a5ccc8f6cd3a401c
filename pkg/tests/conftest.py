import numpy as np
import pytest
from hypothesis import settings

from flatvaradhan.distributions import Mixture, Uniform, VonMises, truncated_von_mises

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def vm02():
    return VonMises((0.0,), (2.0,))


@pytest.fixture
def mixture():
    return Mixture((0.6, 0.4), (VonMises((0.0,), (3.0,)), VonMises((2.5,), (1.0,))))


@pytest.fixture(scope="session")
def shipped_densities():
    """Every density family the package ships, on the circle."""
    return {
        "uniform": Uniform(1),
        "von_mises": VonMises((0.0,), (2.0,)),
        "von_mises_shifted": VonMises((1.0,), (4.0,)),
        "mixture": Mixture((0.6, 0.4), (VonMises((0.0,), (3.0,)), VonMises((2.5,), (1.0,)))),
        "truncated": truncated_von_mises(0.0, 2.0, center=np.pi, radius=0.5),
    }


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record (and print) one pass/fail line for an acceptance criterion."""

    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
