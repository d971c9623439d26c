CRITERIA = {
    1: "gravity recovery (1e-6, < 1 s)",
    2: "hybrid recovery (1e-9)",
    3: "cross-validation exactness (r2 = 1 within 1e-9)",
    4: "stacking dominance on training folds",
    5: "flow builders match brute-force oracles",
    6: "metric identities (1e-12)",
    7: "threshold calibration picks 500 km",
    8: "basin geometry",
    9: "evaluate is byte-deterministic",
    10: "micro-world pipeline matches golden (< 5 s)",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number the test checks")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.failed:
        ok = _outcomes.get(crit, True) and not report.failed
        _outcomes[crit] = ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line("criterion %2d  %-7s %s" % (n, status, CRITERIA[n]))
