import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


class _Criterion:
    """Records one pass/fail line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []
        _RESULTS[number] = ("FAIL", f"{title}: did not finish")

    def note(self, text: str) -> None:
        self.details.append(text)

    def check(self, ok: bool, text: str) -> None:
        self.details.append(("ok " if ok else "FAILED ") + text)
        assert ok, text

    def done(self) -> None:
        _RESULTS[self.number] = ("PASS", f"{self.title}: " + "; ".join(self.details))


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, text = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {text}")
