from pathlib import Path

import pytest

import proto_mp

TOY_DIR = Path(proto_mp.__file__).parent / "fixtures" / "toy"
REPO = Path(__file__).resolve().parents[1]


@pytest.fixture
def toy_dir():
    return TOY_DIR


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    n, title = getattr(report, "criterion", (None, None))
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA[n] = (outcome, title)
    elif report.failed:
        _CRITERIA[n] = ("FAIL", title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {title}")
