import sys

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from dmm import tensor as T
from dmm.harness import HarnessConfig, run_overfit


@pytest.fixture(autouse=True)
def _float64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The 8-pair, 500-step seed-0 overfit run, shared by every test that needs a trained model."""
    out = tmp_path_factory.mktemp("overfit")
    cfg = HarnessConfig(out=str(out), seed=0)
    with threadpool_limits(limits=1):
        return run_overfit(cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, text = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")
