def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance verdict lines where capture can't hide them
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
