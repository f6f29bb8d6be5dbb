import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Collects ``(description, ok)`` checks and emits one PASS/FAIL line."""

    class _Criterion:
        def __init__(self):
            self.checks = []
            self.title = ""

        def check(self, desc, ok):
            self.checks.append((desc, bool(ok)))

        def finish(self, title):
            bad = [d for d, ok in self.checks if not ok]
            status = "PASS" if not bad else "FAIL"
            detail = "; ".join(d for d, _ in self.checks) if not bad else "failed: " + "; ".join(bad)
            line = f"{status}  {title}  [{detail}]"
            ACCEPTANCE_LINES.append(line)
            print(line)
            assert not bad, line

    return _Criterion()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
