"""Shared pytest wiring: one summary line per acceptance criterion.

The terminal summary prints a PASS/FAIL verdict for each acceptance
test regardless of capture settings, so the verdicts survive into
piped logs.
"""

from __future__ import annotations

# Maps the test-name prefix to the printed label.  Prefixes end with an
# underscore so test_a1_* never swallows test_a10_*.
_LABELS = {
    "test_a1_": "A1 integrator accuracy",
    "test_a2_": "A2 trajectory sensitivities vs finite differences",
    "test_a3_": "A3 equilibrium sensitivity closed form",
    "test_a4_": "A4 boundary-hit sensitivities across a power sweep",
    "test_a5_": "A5 post-fault graze sensitivities",
    "test_a6_": "A6 mode switch detected across an inertia sweep",
    "test_a7_": "A7 bisection agrees with a dense scan",
    "test_a8_": "A8 boundary classification vs displacement integration",
    "test_a9_": "A9 stability grid self-consistency and inertia trend",
    "test_a10_": "A10 deterministic sweep output",
}

_RESULTS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    for prefix, label in _LABELS.items():
        if name.startswith(prefix):
            _RESULTS[label] = report.outcome
            break


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for label in _LABELS.values():
        outcome = _RESULTS.get(label)
        if outcome is None:
            continue
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{label}: {verdict}")
