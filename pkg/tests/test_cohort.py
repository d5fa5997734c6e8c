import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrsepsis.cohort import (DAY, HOUR, DatasetSplit, FlowReport, InsufficientNegatives, LabelRecord, SchemaError,
                              apply_inclusion, choose_label_time, clip_window, label_admission, make_splits,
                              read_jsonl, sirs_flags, vital_sign_subset, write_jsonl)
from ehrsepsis.events import EventSequence

from conftest import admission, ev


def _vitals_at(t):
    return [ev(t, "bp", 120, 70), ev(t, "hr", 80), ev(t, "rr", 15), ev(t, "spo2", 97), ev(t, "temp", 37)]


def _septic(aid="p", department="ED", onset_h=10):
    t = onset_h * HOUR
    return admission([ev(t, "hr", 95), ev(t, "rr", 22), ev(t + HOUR, "micro", "blood_culture")],
                     aid=aid, department=department)


# -- SIRS flags ------------------------------------------------------------------

def test_hr_above_90_sets_flag():
    assert "HR" in sirs_flags(EventSequence([ev(60, "hr", 91)]), 120)


def test_hr_of_90_does_not_set_flag():
    assert "HR" not in sirs_flags(EventSequence([ev(60, "hr", 90)]), 120)


def test_low_temperature_sets_flag():
    assert "TEMP" in sirs_flags(EventSequence([ev(60, "temp", 35.9)]), 120)


def test_paco2_and_wbc_criteria():
    seq = EventSequence([ev(0, "lab_paco2", 31), ev(0, "lab_wbc", 3.5)])
    assert sirs_flags(seq, 0) == {"RR_or_PaCO2", "WBC"}


def test_flag_window_is_half_open():
    seq = EventSequence([ev(0, "hr", 120)])
    assert "HR" in sirs_flags(seq, 6 * HOUR - 1)
    assert "HR" not in sirs_flags(seq, 6 * HOUR)


def test_window_must_be_positive():
    with pytest.raises(ValueError):
        sirs_flags(EventSequence([]), 0, window_h=0)


# -- labeling --------------------------------------------------------------------

def test_two_criteria_with_blood_culture_is_positive():
    rec = label_admission(_septic(onset_h=10))
    assert rec.label and rec.label_time == 10 * HOUR
    assert rec.onset_criteria == {"HR", "RR_or_PaCO2"}


def test_single_criterion_is_negative():
    adm = admission([ev(h * HOUR, "hr", 95) for h in range(20)] + [ev(5 * HOUR, "micro", "blood_culture")])
    assert not label_admission(adm).label


def test_two_criteria_without_marker_is_negative():
    adm = admission([ev(10 * HOUR, "hr", 95), ev(10 * HOUR, "rr", 22)])
    assert not label_admission(adm).label


def test_iv_antibiotic_counts_as_marker_but_oral_does_not():
    base = [ev(10 * HOUR, "hr", 95), ev(10 * HOUR, "rr", 22)]
    assert label_admission(admission(base + [ev(30 * HOUR, "med_iv", "J01CR05")])).label
    assert not label_admission(admission(base + [ev(30 * HOUR, "med_oral", "J01CR05")])).label
    assert not label_admission(admission(base + [ev(11 * HOUR, "med_iv", "B05BB01")])).label


def test_marker_outside_lookaround_is_ignored():
    base = [ev(10 * HOUR, "hr", 95), ev(10 * HOUR, "rr", 22)]
    # the flags hold on [10 h, 16 h); a marker pairs with them up to 24 h after the last of those minutes
    assert label_admission(admission(base + [ev(40 * HOUR - 1, "micro", "blood_culture")])).label
    assert not label_admission(admission(base + [ev(40 * HOUR, "micro", "blood_culture")])).label


def test_label_time_is_earliest_qualifying_time():
    # criteria at hour 2 and hour 14, culture only within reach of the later episode
    events = [ev(2 * HOUR, "hr", 95), ev(2 * HOUR, "rr", 22), ev(14 * HOUR, "hr", 99), ev(14 * HOUR, "temp", 39),
              ev(40 * HOUR, "micro", "blood_culture")]
    rec = label_admission(admission(events, duration_h=60))
    assert rec.label_time == 16 * HOUR  # window opens 24 h before the culture, hr@2h long expired
    assert len(sirs_flags(EventSequence(events), rec.label_time)) >= 2


def test_empty_sequence_is_negative():
    assert label_admission(admission([])) == LabelRecord(False)


# -- label time --------------------------------------------------------------------

def test_positive_label_time_is_onset():
    adm = _septic(onset_h=30)
    assert choose_label_time(adm, label_admission(adm), np.random.default_rng(0)) == 30 * HOUR


def test_negative_label_time_range_and_determinism():
    adm = admission([], duration_h=10)
    neg = LabelRecord(False)
    draws = [choose_label_time(adm, neg, np.random.default_rng(s)) for s in range(200)]
    assert min(draws) >= 3 * HOUR and max(draws) <= 7 * HOUR
    assert choose_label_time(adm, neg, np.random.default_rng(5)) == choose_label_time(adm, neg, np.random.default_rng(5))


def test_negative_stay_too_short_is_an_error():
    with pytest.raises(ValueError):
        choose_label_time(admission([], duration_h=6), LabelRecord(False), np.random.default_rng(0))


# -- clipping --------------------------------------------------------------------

def test_clip_window():
    lt = 7 * DAY
    seq = EventSequence([ev(lt - 6 * DAY, "hr", 80), ev(lt - 5 * DAY, "hr", 81), ev(lt, "hr", 82),
                         ev(lt + 1, "hr", 83)])
    kept = [e.value[0] for e in clip_window(seq, lt)]
    assert kept == [81, 82]


def test_clip_window_noop_for_short_stays():
    seq = EventSequence([ev(0, "hr", 80), ev(HOUR, "hr", 81)])
    assert clip_window(seq, 2 * HOUR) == seq


# -- inclusion ---------------------------------------------------------------------

def test_inclusion_steps():
    adms = [admission([], aid="out", contact_type="outpatient"),
            admission([], aid="short", duration_h=179 / 60),
            admission([], aid="exact", duration_h=3, department="HI")]
    # 1 positive in 60 admissions for the LOW department
    adms += [_septic(aid="low0", department="LOW")]
    adms += [admission([], aid=f"low{i}", department="LOW") for i in range(1, 60)]
    adms += [_septic(aid="hi0", department="HI")] + [admission([], aid=f"hi{i}", department="HI") for i in range(1, 10)]
    kept, flow = apply_inclusion(adms)
    ids = {a.id for a in kept}
    assert "out" not in ids and "short" not in ids
    assert not any(i.startswith("low") for i in ids)
    assert {f"hi{i}" for i in range(10)} | {"exact"} <= ids
    assert [s[0] for s in flow.steps] == ["outpatient", "min_duration", "dept_prevalence"]
    assert [s[1] for s in flow.steps] == [1, 1, 60]
    assert sum(s[1] for s in flow.steps) == len(adms) - len(kept)


def test_flow_report_csv(tmp_path):
    fr = FlowReport(10)
    fr.add("outpatient", 3, 7)
    fr.write_csv(tmp_path / "flow.csv")
    lines = (tmp_path / "flow.csv").read_text().splitlines()
    assert lines[0] == "step,removed,remaining"
    assert fr.final == 7


def test_vital_subset():
    lt = 10 * HOUR
    full = admission(_vitals_at(lt - HOUR), aid="full")
    five = admission([e for e in _vitals_at(lt - HOUR) if e.category != "spo2"], aid="five")
    early = admission(_vitals_at(lt - 4 * HOUR), aid="early")
    out = vital_sign_subset([full, five, early], {"full": lt, "five": lt, "early": lt})
    assert [a.id for a in out] == ["full"]


# -- splits ------------------------------------------------------------------------

def test_split_sizes():
    s = make_splits([f"p{i}" for i in range(100)], [f"n{i}" for i in range(1000)], seed=0, neg_ratio=None)
    pos = lambda ids: sum(i.startswith("p") for i in ids)  # noqa: E731
    assert (pos(s.train), pos(s.validation), pos(s.test)) == (80, 10, 10)


def test_oversampling_and_ratio():
    s = make_splits([f"p{i}" for i in range(100)], [f"n{i}" for i in range(6000)], seed=0)
    inst_pos = sum(i.startswith("p") for i in s.train_instances)
    inst_neg = sum(i.startswith("n") for i in s.train_instances)
    assert (inst_pos, inst_neg) == (800, 4000)


def test_insufficient_negatives_reports_required_count():
    with pytest.raises(InsufficientNegatives) as ei:
        make_splits([f"p{i}" for i in range(100)], [f"n{i}" for i in range(100)], seed=0)
    assert ei.value.required == 4000


def test_splits_are_deterministic_and_serializable():
    a = make_splits([f"p{i}" for i in range(50)], [f"n{i}" for i in range(3000)], seed=3)
    b = make_splits([f"p{i}" for i in range(50)], [f"n{i}" for i in range(3000)], seed=3)
    assert a.to_json() == b.to_json()
    back = DatasetSplit.from_json(json.loads(json.dumps(a.to_json())))
    assert back.to_json() == a.to_json()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 300), st.integers(0, 2 ** 31))
def test_splits_disjoint_and_exhaustive(n_pos, n_neg, seed):
    pos = [f"p{i}" for i in range(n_pos)]
    neg = [f"n{i}" for i in range(n_neg)]
    s = make_splits(pos, neg, seed, neg_ratio=None)
    parts = [set(s.train), set(s.validation), set(s.test)]
    assert sum(map(len, parts)) == n_pos + n_neg
    assert set().union(*parts) == set(pos + neg)


# -- persistence -----------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    adms = [_septic(aid="x"), admission(_vitals_at(100), aid="y")]
    write_jsonl(tmp_path / "c.jsonl", adms)
    back = read_jsonl(tmp_path / "c.jsonl")
    assert [a.to_json() for a in back] == [a.to_json() for a in adms]


@pytest.mark.parametrize("content", ["", "not json\n", '{"admission_id": "a"}\n',
                                     '{"format": "ehrsepsis-admissions", "schema_version": 2}\n'])
def test_jsonl_schema_errors(tmp_path, content):
    (tmp_path / "c.jsonl").write_text(content)
    with pytest.raises(SchemaError):
        read_jsonl(tmp_path / "c.jsonl")


# -- labeling properties -----------------------------------------------------------

_lab_events = st.one_of(
    st.builds(lambda t, v: ev(t, "hr", v), st.integers(0, 48 * HOUR), st.floats(60, 130)),
    st.builds(lambda t, v: ev(t, "rr", v), st.integers(0, 48 * HOUR), st.floats(10, 30)),
    st.builds(lambda t, v: ev(t, "temp", v), st.integers(0, 48 * HOUR), st.floats(35, 40)),
    st.builds(lambda t, v: ev(t, "lab_wbc", v), st.integers(0, 48 * HOUR), st.floats(2, 20)),
    st.builds(lambda t: ev(t, "micro", "blood_culture"), st.integers(0, 48 * HOUR)),
    st.builds(lambda t: ev(t, "med_iv", "J01CR05"), st.integers(0, 48 * HOUR)),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(_lab_events, max_size=12), _lab_events)
def test_adding_an_event_never_unlabels(events, extra):
    before = label_admission(admission(events, duration_h=49))
    after = label_admission(admission(events + [extra], duration_h=49))
    if before.label:
        assert after.label
        assert after.label_time <= before.label_time
    if after.label:
        assert len(sirs_flags(EventSequence(events + [extra]), after.label_time)) >= 2


@settings(max_examples=100, deadline=None)
@given(st.integers(7 * 60, 20 * DAY), st.integers(0, 2 ** 31))
def test_negative_label_time_avoids_stay_edges(stay, seed):
    adm = admission([], duration_h=stay / HOUR)
    t = choose_label_time(adm, LabelRecord(False), np.random.default_rng(seed))
    assert 3 * HOUR <= t <= adm.duration - 3 * HOUR
