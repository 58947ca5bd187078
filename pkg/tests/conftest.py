"""Shared pytest configuration.

Tests tagged ``@pytest.mark.criterion(k)`` make up the acceptance suite;
after the run, one PASS/FAIL line per criterion is printed in the
terminal summary (a criterion passes only if every test tagged with it
passed).
"""
import pytest

CRITERIA = {
    1: "additive attention matches brute-force oracle",
    2: "finite-difference gradient verification",
    3: "complexity separation of exact vs linear attention",
    4: "overfit sanity on 16 synthetic pairs",
    5: "ablation-mode matrix (4 BEV x 3 text modes)",
    6: "metric oracle, F1/IoU identity, sharded merge",
    7: "temporal swap symmetry without BEV",
    8: "learning-rate schedule conformance",
    9: "determinism and checkpoint resume",
    10: "data and config round-trips, loader rejections",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): test belongs to acceptance criterion k")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    k = marker.args[0]
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    _outcomes.setdefault(k, []).append(not failed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k, text in CRITERIA.items():
        if k not in _outcomes:
            status = "NOT RUN"
        else:
            status = "PASS" if all(_outcomes[k]) else "FAIL"
        terminalreporter.write_line(f"criterion {k:>2}: {status:<7} {text}")
