import pytest

from shardocc.history import History
from shardocc.registry import Registry


class FakeClock:
    def __init__(self, now=0):
        self.now = now

    def __call__(self):
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def registry(clock):
    return Registry(history=History(), clock=clock)


# criterion number -> list of (ok, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    ACCEPTANCE.setdefault(number, {"title": title, "parts": []})["parts"].append((ok, detail))


def acceptance_lines():
    lines = []
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        ok = all(p[0] for p in entry["parts"])
        detail = "; ".join(p[1] for p in entry["parts"])
        lines.append(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {entry['title']}: {detail}")
    return lines


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
