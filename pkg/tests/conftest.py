"""Suite-wide plumbing: the acceptance summary block at the end of a run."""

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in _acceptance_lines:
        terminalreporter.write_line(line)
