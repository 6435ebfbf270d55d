import numpy as np
import pytest

from pwaclf import geometry, model


@pytest.fixture(scope="session")
def desk():
    return geometry.ring_template("desk")


@pytest.fixture(scope="session")
def simplex():
    return geometry.ring_template("simplex")


@pytest.fixture(scope="session")
def vdp():
    return model.vdp_preset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_artifact(desk, vdp):
    """Two-stage Van der Pol synthesis on the desk template (about 20 s)."""
    from pwaclf.synthesis import two_stage_solve

    return two_stage_solve(desk, vdp)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_record():
    """Recorder for one PASS/FAIL line per acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
