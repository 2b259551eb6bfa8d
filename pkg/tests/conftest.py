import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
os.environ.setdefault("TAVCE_THREADS", "1")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"acceptance {n}: {'PASS' if ok else 'FAIL'} {detail}")
