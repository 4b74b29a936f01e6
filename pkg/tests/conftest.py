import pathlib
import sys
import time

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

_VERDICTS: list[str] = []


class Verdict:
    """Records one acceptance line; the assertion is made by the caller."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.start = time.perf_counter()

    def __call__(self, passed: bool, detail: str = "") -> bool:
        elapsed = time.perf_counter() - self.start
        line = (f"criterion {self.number} [{'PASS' if passed else 'FAIL'}] {self.title}"
                f" ({elapsed:.1f}s) {detail}")
        print(line)
        _VERDICTS.append(line)
        return passed

    def skip(self, reason: str):
        line = f"criterion {self.number} [SKIP] {self.title}: {reason}"
        print(line)
        _VERDICTS.append(line)
        pytest.skip(reason)


@pytest.fixture
def verdict():
    return Verdict


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
