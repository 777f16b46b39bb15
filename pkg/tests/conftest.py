import pytest

_LINES: list[str] = []


class Criterion:
    def __init__(self, name: str):
        self.name = name
        self.line = None

    def report(self, ok: bool, detail: str = "") -> bool:
        self.line = f"{'PASS' if ok else 'FAIL'}  {self.name}" + (f"  ({detail})" if detail else "")
        print(self.line)
        return ok


@pytest.fixture
def criterion(request):
    """Records one pass/fail line per acceptance criterion for the terminal summary."""
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(marker.args[0] if marker else request.node.name)
    yield c
    _LINES.append(c.line or f"FAIL  {c.name}  (error before a verdict)")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
