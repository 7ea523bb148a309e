"""Shared pytest wiring: prints the acceptance-gate scoreboard after a run
that included tests/test_acceptance.py."""

# test name -> scoreboard label, in reporting order
ACCEPTANCE_ROWS = [
    ("test_integrator_fixed_point", "integrator fixed point"),
    ("test_dissipation_and_energy_conservation", "dissipation / energy"),
    ("test_hand_checked_scalar_step", "hand-checked scalar step"),
    ("test_gradient_exactness", "gradient exactness"),
    ("test_scheduler_tables", "scheduler tables"),
    ("test_identification_oracle", "identification oracle"),
    ("test_inverse_recovery", "inverse recovery"),
    ("test_end_to_end_tracking", "end-to-end tracking"),
    ("test_stress_probes", "stress probes"),
    ("test_ablation_protocol", "ablation protocol"),
    ("test_format_round_trips", "format round-trips"),
]


def _base_name(report) -> str:
    name = report.location[2]
    return name.split("[")[0].split(".")[-1]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    stats = terminalreporter.stats
    outcome = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in stats.get(status, []):
            if "test_acceptance" not in str(getattr(rep, "fspath", "")):
                continue
            name = _base_name(rep)
            # a parametrized criterion fails as a whole if any case fails
            if status == "passed" and outcome.get(name) in ("FAIL", "SKIP"):
                continue
            outcome[name] = {"passed": "PASS", "failed": "FAIL",
                             "error": "FAIL", "skipped": "SKIP"}[status]
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in ACCEPTANCE_ROWS:
        if name in outcome:
            terminalreporter.write_line(f"{outcome[name]:4s}  {label}")
    for name in sorted(set(outcome) - {n for n, _ in ACCEPTANCE_ROWS}):
        terminalreporter.write_line(f"{outcome[name]:4s}  {name}")
