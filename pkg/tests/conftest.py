import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dgmlp.gatenet import Arch, GateSpec, init_params

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SMALL = Arch(8, 6, 3, 0)


def small_params(kind, seed=0, gate_bias=0.0, arch=SMALL):
    if kind in ("moe_top1", "moe_soft"):
        arch = Arch(arch.n_in, arch.d_hidden, arch.n_classes, 3)
    return init_params(kind, arch, seed=seed, gate_bias=gate_bias)


def small_spec(kind, **kw):
    kw.setdefault("expert_count", 3)
    return GateSpec.default(kind, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed at the end of the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {name.split('_')[2]}: {verdict}  {name}  {detail}".rstrip())
