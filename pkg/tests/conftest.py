import time

import numpy as np
import pytest

from heartmorph.phantom import PhantomSpec, generate_cohort
from heartmorph.study import Cohort

_ACCEPTANCE = {}


class AcceptanceLog:
    def record(self, number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cohort200():
    """The default 200-subject, 64^3 phantom held in memory."""
    t0 = time.perf_counter()
    cohort = Cohort.from_spec(PhantomSpec())
    cohort.build_seconds = time.perf_counter() - t0
    return cohort


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """A 30-subject phantom on disk for CLI and I/O tests."""
    out = tmp_path_factory.mktemp("phantom30")
    return generate_cohort(PhantomSpec(n_subjects=30), out)
