import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    from loraudio import autodiff as ad

    with ad.precision("f64"):
        yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None:
        return
    ran = {int(r.nodeid.split("criterion_")[1].split("_")[0]) for k in ("passed", "failed", "error") for r in terminalreporter.stats.get(k, []) if "criterion_" in r.nodeid}
    if not ran:
        return
    terminalreporter.section("acceptance")
    for n in sorted(ran):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n}: FAIL  did not complete (see traceback above)"))
