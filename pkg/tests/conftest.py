"""Shared pytest wiring: echo the acceptance verdict lines into the terminal
summary so they survive output capture in plain ``pytest -v`` runs."""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
