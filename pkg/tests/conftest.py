import pytest

_acceptance = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with acceptance("4 overfit smoke") as note: ...; note("nll=0.01")``.
    """
    lines = request.config.stash.setdefault(_acceptance, [])

    class _Criterion:
        def __init__(self, title):
            self.title, self.details = title, []

        def __call__(self, detail):
            self.details.append(str(detail))

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            line = f"criterion {self.title}: {status}" + (f" ({'; '.join(self.details)})" if self.details else "")
            lines.append(line)
            print(line)
            return False

    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
