import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if rep.when != "call" or "test_acceptance" not in rep.nodeid or not name.startswith("test_c"):
                continue
            detail = dict(rep.user_properties).get("verdict", "")
            lines.append((int(name[6:8]), f"criterion {int(name[6:8]):2d} {'PASS' if rep.passed else 'FAIL'}: "
                                          f"{name[9:]} | {detail}"))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
