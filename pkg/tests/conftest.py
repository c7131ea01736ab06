import sys


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        parts = acceptance.RESULTS[n]
        ok = all(passed for _, passed, _, _ in parts)
        secs = sum(t for _, _, t, _ in parts)
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {acceptance.TITLES[n]}  ({secs:.1f}s)"
        for name, passed, _, detail in parts:
            if not passed:
                line += f"\n    {name}: {detail}"
        terminalreporter.write_line(line)
