import pytest

_LINES: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.ok = None
        self.details: list[str] = []

    def check(self, ok: bool, detail: str) -> bool:
        self.details.append(("ok " if ok else "FAILED ") + detail)
        self.ok = bool(ok) if self.ok is None else (self.ok and bool(ok))
        return bool(ok)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"criterion {self.number:2d} {status}  {self.title}: " + "; ".join(self.details)


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion; the test passes its number and title via the marker."""
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    if c.ok is None:
        c.ok = False
        c.details.append("did not complete")
    _LINES[c.number] = c.line()
    print("\n" + c.line())


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
