import numpy as np
import pytest

from ehrsepsis.cohort import HOUR, Admission, label_admission, write_jsonl
from ehrsepsis.events import EventSequence
from ehrsepsis.synth import (PROFILES, CohortConfig, ConfigError, band_completeness, generate_cohort,
                             validate_cohort, with_profile)


@pytest.fixture(scope="module")
def big():
    cfg = CohortConfig(n_admissions=10_000, prevalence=0.05, seed=11)
    return cfg, generate_cohort(cfg)


@pytest.fixture(scope="module")
def small():
    cfg = CohortConfig(n_admissions=300, seed=3)
    return cfg, generate_cohort(cfg)


def test_same_seed_gives_identical_bytes(tmp_path, small):
    cfg, adms = small
    write_jsonl(tmp_path / "a.jsonl", adms)
    write_jsonl(tmp_path / "b.jsonl", generate_cohort(cfg))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_parallel_matches_sequential(small):
    cfg, adms = small
    par = generate_cohort(cfg, workers=2)
    assert [a.to_json() for a in par] == [a.to_json() for a in adms]


def test_labeler_agrees_with_generator(small):
    _, adms = small
    for a in adms:
        if a.contact_type != "inpatient" or a.duration < 3 * HOUR:
            continue
        lab = label_admission(a)
        assert lab.label == bool(a.truth["label"])
        if lab.label:
            assert lab.label_time == a.truth["onset"]
            assert lab.label_time >= 3 * HOUR


def test_events_inside_the_stay(small):
    _, adms = small
    for a in adms:
        t = a.sequence.times
        assert len(t) == 0 or (t[0] >= 0 and t[-1] <= a.duration)


def test_prevalence_at_ten_thousand(big):
    cfg, adms = big
    rep = validate_cohort(adms, cfg)
    assert abs(rep.prevalence - 0.05) <= 0.01
    assert rep.ok, rep.violations


def test_completeness_bands_at_ten_thousand(big):
    _, adms = big
    onsets = {a.id: label_admission(a).label_time for a in adms
              if a.contact_type == "inpatient" and a.truth["label"]}
    pos = [a for a in adms if a.id in onsets]
    frac, n = band_completeness(pos, onsets, (30, 24))
    assert n > 200
    assert abs(frac - 0.32) <= 0.05
    assert band_completeness(pos, onsets, (6, 0))[0] == 1.0


def test_interventions_populated(big):
    _, adms = big
    pos = [a for a in adms if a.truth["label"]]
    with_int = sum("pre_onset_intervention" in a.truth for a in pos)
    assert 0 < with_int < len(pos)


def test_profiles_are_paired(small):
    cfg, adms = small
    sparse = generate_cohort(with_profile(cfg, "sparse60"))
    assert [a.truth["label"] for a in sparse] == [a.truth["label"] for a in adms]
    full = generate_cohort(with_profile(cfg, "full"))
    n_vitals = lambda xs: sum(e.category in ("hr", "bp") for a in xs for e in a.sequence)  # noqa: E731
    assert n_vitals(full) > n_vitals(sparse)


def test_profile_keep_probabilities():
    p = PROFILES["fig4"]
    assert p.keep_prob(0) == 1.0 and p.keep_prob(1) == 0.5
    assert p.keep_prob(30) == p.baseline and p.keep_prob(None) == p.baseline
    assert PROFILES["sparse60"].keep_prob(5) == pytest.approx(0.4)


def test_validation_flags_missing_markers(small):
    cfg, adms = small
    stripped = []
    for a in adms:
        seq = EventSequence(e for e in a.sequence if e.category not in ("micro", "med_iv"))
        stripped.append(Admission(a.id, a.department, a.admit, a.discharge, seq, a.context, a.contact_type,
                                  a.patient_id, a.truth))
    rep = validate_cohort(stripped, cfg)
    assert not rep.ok
    assert "labeler_agreement" in rep.names() and "prevalence" in rep.names()


def test_validation_of_good_and_empty_cohorts(small):
    cfg, adms = small
    assert validate_cohort(adms, cfg).ok
    rep = validate_cohort([], cfg)
    assert rep.n_admissions == 0 and rep.names() == ["empty_cohort"]


def test_config_round_trip_and_errors():
    cfg = CohortConfig(n_admissions=123, seed=4, prevalence=0.08, profile="sparse60")
    assert CohortConfig.from_ini(cfg.to_ini()) == cfg
    with pytest.raises(ConfigError):
        CohortConfig.from_ini("[cohort]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        CohortConfig(prevalence=1.0, outpatient_fraction=0.5, short_stay_fraction=0.5).validate()
    with pytest.raises(ConfigError):
        CohortConfig(profile="nope").validate()
    with pytest.raises(ConfigError):
        CohortConfig(max_stay_h=8, min_stay_h=7, median_stay_h=7.5).validate()


def test_contexts_are_vectorizable(small):
    from ehrsepsis.events import vectorize_context
    _, adms = small
    ctx = np.array([vectorize_context(a.context) for a in adms])
    assert ctx.shape == (len(adms), 26) and np.isfinite(ctx).all()
