import time

import pytest

from latticeaccel.control import OptimizerConfig
from latticeaccel.dynamics import SequenceTiming
from latticeaccel.lattice import LatticeConfig
from latticeaccel import pipelines

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def lattice():
    return LatticeConfig()


@pytest.fixture(scope="session")
def designed(lattice):
    """Optimized, oriented interferometer shared by the slow tests."""
    t0 = time.perf_counter()
    interf, bs, mirror = pipelines.design_components(
        lattice, SequenceTiming(),
        OptimizerConfig(step_rule="lbfgs", fidelity_goal=0.999),
        OptimizerConfig(step_rule="lbfgs", fidelity_goal=0.995))
    return {"interf": interf, "bs": bs, "mirror": mirror,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def waveform_files(designed, tmp_path_factory):
    from latticeaccel.dynamics import write_waveform
    d = tmp_path_factory.mktemp("waveforms")
    bs, mirror = designed["interf"].components_x
    write_waveform(d / "bs.wf", bs)
    write_waveform(d / "mirror.wf", mirror)
    return d / "bs.wf", d / "mirror.wf"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
