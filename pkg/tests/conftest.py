import sys


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.NAMES):
        if k in results:
            ok, detail = results[k]
            terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {mod.NAMES[k]}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:2d} FAIL  {mod.NAMES[k]}: did not run to completion")
