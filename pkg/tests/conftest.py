import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from latent_transformer.autodiff.tensor import current_graph

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_graph():
    current_graph().clear()
    yield
    current_graph().clear()


# ------------------------------------------------------------------ acceptance summary

_ACCEPTANCE: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "ran": False, "detail": []})
    if report.when == "call" or report.failed or report.skipped:
        entry["ran"] = True
        if report.failed or report.skipped:
            entry["passed"] = False
    if report.when == "call":
        entry["detail"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = ("PASS" if e["passed"] else "FAIL") if e["ran"] else "NOT RUN"
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"[{status}] {number}. {e['title']}" + (f" ({detail})" if detail else ""))
