def pytest_terminal_summary(terminalreporter):
    from test_acceptance import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
