from __future__ import annotations

import pytest

from phrusage.model import Context, Environment, RoleKind, Subject

# filled by test_acceptance; printed once at the end of the run
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])


def make_ctx(subject_id="s", role=RoleKind.PATIENT, date=0, location="hospital",
             device="certified", params=None, roles=None) -> Context:
    role = RoleKind(role)
    verified = frozenset(roles) if roles is not None else frozenset({role})
    subject = Subject(subject_id, "", dict(params or {}), verified)
    return Context(subject, role, Environment.of(date, location, device))


@pytest.fixture
def ctx_factory():
    return make_ctx
