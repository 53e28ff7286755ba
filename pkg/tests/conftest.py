import json
from pathlib import Path

ACCEPTANCE: list[dict] = []
REPORT = Path(__file__).resolve().parents[1] / "artifacts" / "acceptance.json"


def record(criterion: str, passed: bool, detail: str) -> None:
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE.append({"criterion": criterion, "passed": bool(passed), "detail": detail})
    print(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for row in sorted(ACCEPTANCE, key=lambda r: r["criterion"]):
        terminalreporter.write_line(f"{'PASS' if row['passed'] else 'FAIL'} criterion {row['criterion']}: "
                                    f"{row['detail']}")
    REPORT.parent.mkdir(exist_ok=True)
    REPORT.write_text(json.dumps(sorted(ACCEPTANCE, key=lambda r: r["criterion"]), indent=1) + "\n")
