import sys

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    # never touch the user's real config file
    path = tmp_path / "engine.conf"
    monkeypatch.setenv("STATENGINE_CONFIG", str(path))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance verdicts at the end of the run
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance"):
            lines.extend(getattr(mod, "RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
