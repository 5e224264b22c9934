import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dfnfem.mesh import build_macro_mesh  # noqa: E402
from dfnfem.params import BENCHMARK_CC_THICKNESS, benchmark_parameters  # noqa: E402
from dfnfem.solver import CellModel, NewtonOptions  # noqa: E402

THICKNESS = {"anode": 100e-6, "separator": 25e-6, "cathode": 100e-6}


def mesh_1d(na=4, ns=2, nc=4):
    return build_macro_mesh(1, THICKNESS, {"anode": na, "separator": ns, "cathode": nc})


def mesh_2d(counts=(4, 2, 4), ny=2, height=1e-4):
    return build_macro_mesh(2, THICKNESS, dict(zip(("anode", "separator", "cathode"), counts)), (height,), (ny,))


def mesh_3d(counts=(2, 2, 1, 2, 2), nxy=(2, 2), size=(1e-3, 1e-3)):
    th = dict(THICKNESS, anode_cc=BENCHMARK_CC_THICKNESS, cathode_cc=BENCHMARK_CC_THICKNESS)
    names = ("anode_cc", "anode", "separator", "cathode", "cathode_cc")
    return build_macro_mesh(3, th, dict(zip(names, counts)), size, nxy)


@pytest.fixture(scope="session")
def params():
    return benchmark_parameters()


@pytest.fixture(scope="session")
def small_model():
    return CellModel(mesh_1d(), n_micro=5, options=NewtonOptions(tol=1e-12))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(number, ok, detail, label=None):
        line = f"criterion {number:>2}: {label or ('PASS' if ok else 'FAIL')}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
