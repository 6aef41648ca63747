import re

import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class _Recorder:
    def __init__(self, number: int):
        self.number = number
        self.done = False

    def __call__(self, checks: dict[str, bool], detail: str = "") -> bool:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        text = detail + (f" | failed: {', '.join(failed)}" if failed else "")
        ACCEPTANCE[self.number] = (ok, text)
        self.done = True
        print(f"criterion {self.number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
        return ok


@pytest.fixture
def criterion(request):
    """Record the outcome of the acceptance criterion named in the test."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))
    rec = _Recorder(number)
    yield rec
    if not rec.done:
        ACCEPTANCE[number] = (False, "raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {text}")
