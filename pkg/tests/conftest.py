import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL/SKIP line per acceptance criterion."""
    rows = []
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            rows.append((name, {"passed": "PASS", "failed": "FAIL"}.get(outcome, "SKIP"), detail))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(rows):
            terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())
