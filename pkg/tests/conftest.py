"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)
        print(f"  [{self.number}] {text}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = "; ".join(self.notes[-3:])
        if not ok:
            detail = f"{exc_type.__name__}: {exc}"[:300]
        _RESULTS[self.number] = (ok, f"{self.title} -- {detail}")
        print(f"ACCEPTANCE {self.number}: {'PASS' if ok else 'FAIL'} {self.title}")
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, text = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")
