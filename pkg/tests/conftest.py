"""Shared pytest wiring: a per-criterion verdict block after the run."""

ACCEPTANCE_RESULTS = []


def record_criterion(number, title, passed, detail):
    """Log one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"[{verdict}] criterion {number:2d} {title}: {detail}"
        )
