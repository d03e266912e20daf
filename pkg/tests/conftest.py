import warnings

import numpy as np
import pytest

from falkdet.synthetic import SyntheticConfig, generate_synthetic

_criteria: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = getattr(report, "criterion", None)
    if number is not None:
        _criteria.setdefault(number, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = int(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcomes = _criteria[number]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status} ({len(outcomes)} test(s))")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(num_classes=3, dim=16, images=6, imbalance=20)


@pytest.fixture(scope="session")
def small_train(small_config):
    return generate_synthetic(small_config, seed=3, split="train")


@pytest.fixture(scope="session")
def small_test(small_config):
    return generate_synthetic(small_config, seed=3, split="test")


@pytest.fixture(autouse=True)
def _quiet_convergence():
    from falkdet.errors import ConvergenceWarning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        yield
