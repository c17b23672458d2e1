import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)")
_lines: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _CRITERION.match(item.name)
    if m is None:
        return
    n = int(m.group(1))
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        if rep.failed and rep.longrepr is not None:
            msg = getattr(rep.longrepr, "reprcrash", None)
            detail = (detail + "; " if detail else "") + (msg.message.splitlines()[0] if msg else "error")
        _lines[n] = f"criterion {n:2d}: {status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_lines):
        terminalreporter.write_line(_lines[n])
