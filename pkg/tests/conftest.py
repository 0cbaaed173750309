import pytest

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[criterion] = f"{criterion}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    print(ACCEPTANCE[criterion])
    return ok


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
