import time

import numpy as np
import pytest
import torch

from lingspot.vocab import build_vocabulary

torch.set_num_threads(1)

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class CriterionRecord:
    """Context manager that logs one PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title} [{self.elapsed:.1f}s]"
        if self.detail:
            line += f"  {self.detail}"
        if exc_type is not None and exc_type is not AssertionError:
            line += f"  ({exc_type.__name__}: {exc})"
        _CRITERIA[self.number] = line
        return False


@pytest.fixture
def criterion():
    return CriterionRecord


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(_CRITERIA.get(n, f"criterion {n:>2} NOT RUN"))
