import pytest

ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture
def acceptance():
    return report


def pytest_terminal_summary(terminalreporter):
    skipped = []
    for rep in terminalreporter.stats.get("skipped", []):
        name = rep.nodeid.split("::")[-1]
        if "test_acceptance" in rep.nodeid and name.startswith("test_"):
            reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
            skipped.append(f"ACCEPTANCE {name.split('_')[1]}: SKIP | {reason.removeprefix('Skipped: ')}")
    lines = sorted(ACCEPTANCE_LINES + skipped, key=lambda s: int(s.split()[1].rstrip(":")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
