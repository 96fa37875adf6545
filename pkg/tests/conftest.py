import re

ACCEPTANCE = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+?)(\[.*\])?$")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = _NAME.search(report.nodeid.split("::")[-1])
    if not m:
        return
    if report.when == "call" or report.failed or report.skipped:
        num, title = int(m.group(1)), m.group(2).replace("_", " ")
        entry = ACCEPTANCE.setdefault(num, {"title": title, "ok": True, "failed": []})
        if report.failed or report.skipped:
            entry["ok"] = False
            entry["failed"].append((m.group(3) or "").strip("[]") or report.when)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[num]
        status = "PASS" if entry["ok"] else "FAIL"
        extra = "" if entry["ok"] else f"  ({', '.join(entry['failed'])})"
        terminalreporter.write_line(f"criterion {num:2d} {status}: {entry['title']}{extra}")
