import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one acceptance criterion verdict; the summary prints every line."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


TINY_CONFIG = """\
base_channels = 4
enc_depths = 1, 1, 1
bottleneck_depth = 1
dec_depths = 1, 1, 1
d_state = 2
groups = 2
reduction = 2
image_size = 16
n_train = 4
n_eval = 2
iterations = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a config small enough for a training run in about a second."""
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path
