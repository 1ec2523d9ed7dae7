import numpy as np
import pytest

from ccmkit import DualMetric, GridSpec, Multiplier, PolyMatrix, parse_poly
from ccmkit.systems import andrieu_metric, andrieu_system, planar_example


@pytest.fixture
def planar():
    return planar_example()


@pytest.fixture
def planar_certificate():
    """``W = I`` and ``rho = 1 + 2 x2^2`` for the planar system at rate 0.1."""
    return PolyMatrix.identity(2, 2), Multiplier(parse_poly("1 + 2*x2^2", 2)), 0.1


@pytest.fixture(scope="session")
def andrieu():
    return andrieu_system()


@pytest.fixture(scope="session")
def andrieu_cert():
    W, rho = andrieu_metric()
    return DualMetric.certify(W, GridSpec.box(12.0, 3, 15)), rho


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Print one ``[criterion k] PASS|FAIL ...`` line and keep it for the summary."""

    def emit(k: int, ok: bool, detail: str) -> None:
        line = f"[criterion {k}] {'PASS' if ok else 'FAIL'} {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
