from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d} {status}  {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
