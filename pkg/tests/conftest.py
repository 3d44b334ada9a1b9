import pytest

_ACCEPTANCE: list[tuple[str, str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(id, title, passed, detail)."""
    def record(cid: str, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((cid, title, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: (int(r[0].rstrip("abcdef")), r[0])):
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {cid:<4} {mark}  {title}" + (f"  [{detail}]" if detail else ""))
