import pytest

_results: dict[str, tuple[bool, str]] = {}


class Criteria:
    """Collects one verdict per acceptance criterion for the summary block."""

    def check(self, name: str, passed: bool, detail: str = "") -> None:
        _results[name] = (bool(passed), detail)
        print(f"{name} {'PASS' if passed else 'FAIL'} {detail}")
        assert passed, f"{name} failed: {detail}"


@pytest.fixture(scope="session")
def criteria():
    return Criteria()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results, key=lambda n: int(n.split("-")[1])):
        passed, detail = _results[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'} {detail}")
