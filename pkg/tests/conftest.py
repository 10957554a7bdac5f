import numpy as np
import pytest

from cadrecon.ppf import train
from cadrecon.synth import blob_mesh


@pytest.fixture(scope="session")
def blob():
    """Asymmetric bumpy test object with a 0.3 diameter."""
    return blob_mesh(0.3, seed=1)


@pytest.fixture(scope="session")
def codebook(blob):
    return train(blob, tau=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Records ``{criterion: (passed, detail)}`` for the end-of-run summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
