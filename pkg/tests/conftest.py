from __future__ import annotations

import numpy as np
import pytest

from cscl.autodiff import ParamStore, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def store():
    return ParamStore(np.float64)


def param(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
