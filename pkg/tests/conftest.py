import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
