import numpy as np
import pytest

from ehrsepsis.cohort import HOUR, Admission
from ehrsepsis.events import Event, EventSequence, build_vocabulary


def ev(t, cat, *vals):
    """Event shorthand: numeric when given numbers, a code when given one string."""
    if len(vals) == 1 and isinstance(vals[0], str):
        return Event(int(t), cat, vals[0])
    return Event(int(t), cat, tuple(float(v) for v in vals))


def admission(events, duration_h=48, aid="a0", department="ED", contact_type="inpatient", context=None):
    return Admission(aid, department, 0, int(duration_h * HOUR), EventSequence(events),
                     context or {"age": 60, "sex": "female"}, contact_type)


@pytest.fixture(scope="session")
def small_vocab():
    """Vocabulary over a hand-built corpus touching every category kind."""
    rng = np.random.default_rng(7)
    seqs = []
    for _ in range(12):
        seqs.append(EventSequence([
            ev(0, "hr", rng.normal(80, 10)),
            ev(5, "bp", rng.normal(120, 10), rng.normal(70, 8)),
            ev(10, "temp", rng.normal(37, 0.4)),
            ev(20, "rr", rng.normal(16, 2)),
            ev(25, "spo2", rng.normal(96, 1)),
            ev(30, "proc", "BGDA0"),
            ev(40, "micro", "blood_culture"),
            ev(50, "diag", "A41.9"),
            ev(60, "med_iv", "J01CR05"),
        ]))
    return build_vocabulary(seqs, min_support=1)


# one PASS/FAIL line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
