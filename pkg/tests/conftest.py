import pytest

verdicts_key = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[verdicts_key] = {}


@pytest.fixture
def verdict(request):
    """Record an acceptance verdict; printed as one line per criterion at the end."""
    table = request.config.stash[verdicts_key]

    def record(k: int, name: str, ok: bool, detail: str = "") -> bool:
        table[k] = (name, bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash[verdicts_key]
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(table):
        name, ok, detail = table[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d} {name}: {detail}")
