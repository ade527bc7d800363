import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from rgbt_sod.data import index_dataset  # noqa: E402
from rgbt_sod.model import ModelConfig  # noqa: E402
from rgbt_sod.synthetic import make_dataset  # noqa: E402

_acceptance = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): exit criterion from the build contract")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance.append((marker[0], outcome, marker[1]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep._acceptance = m.args


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for cid, outcome, title in sorted(_acceptance, key=lambda r: int(r[0][2:])):
        terminalreporter.write_line(f"{cid:<5} {outcome:<4}  {title}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(width_divisor=8, input_size=64)


@pytest.fixture
def fixture_root(tmp_path):
    return make_dataset(tmp_path / "ds", n=4, height=80, width=96, seed=0)


@pytest.fixture
def fixture_records(fixture_root):
    return index_dataset(fixture_root)
