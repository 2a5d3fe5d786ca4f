from __future__ import annotations

import numpy as np
import pytest

from rexnet.mf import MfModel


def random_model(rng: np.random.Generator, n_users: int, n_items: int, k: int,
                 touched: float = 1.0) -> MfModel:
    return MfModel(
        rng.normal(size=(n_users, k)), rng.normal(size=(n_items, k)),
        rng.normal(size=n_users), rng.normal(size=n_items),
        rng.random(n_users) < touched, rng.random(n_items) < touched)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance gate reporting ---------------------------------------------------

_GATE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def gate():
    """``gate(criterion, ok, detail)`` records one check and echoes it."""
    def record(criterion: int, ok: bool, detail: str) -> bool:
        _GATE.setdefault(criterion, []).append((bool(ok), detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance gate")
    for criterion in sorted(_GATE):
        checks = _GATE[criterion]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {criterion:>2}: {verdict}  " + "; ".join(d for _, d in checks))
