import re
from datetime import date

import pytest

from catchfm.ehr import MedicalCode, PatientRecord, Visit


def code(token: str) -> MedicalCode:
    return MedicalCode.parse(token)


def visit(day: str, *tokens: str, kind: str = "outpatient") -> Visit:
    return Visit(date.fromisoformat(day), kind, tuple(code(t) for t in tokens))


def patient(pid: str, *visits: Visit, birth_year: int = 1960, gender: str = "female") -> PatientRecord:
    return PatientRecord(pid, birth_year, gender, tuple(visits))


@pytest.fixture
def tiny_records():
    return [
        patient("A", visit("2010-01-05", "ICD9-Diag:401.9", "DrugCode:RX1"), visit("2010-01-15", "ICD9-Diag:250.00")),
        patient("B", visit("2011-03-01", "ICD9-Diag:401.9"), gender="male", birth_year=1950),
    ]


# One PASS/FAIL line per acceptance criterion, gathered from test outcomes so that a
# crash still reports its criterion.
_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[int(m.group(1))] = (status, m.group(2), dict(report.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n:2d} {name.replace('_', ' ')}: {detail}")
