"""Shared pytest hooks: acceptance verdicts are echoed in the terminal summary."""


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "xfailed", "xpassed"):
        for report in terminalreporter.stats.get(key, []):
            if getattr(report, "when", "call") != "call" and key == "passed":
                continue
            for name, value in getattr(report, "user_properties", []):
                if name == "acceptance":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_criterion_order):
            terminalreporter.write_line(line)


def _criterion_order(line):
    # lines look like "PASS [07b] ..." so the bracketed label orders them
    return line.split("[", 1)[1].split("]", 1)[0]
