from datetime import date

import pytest

from catchfm.cohort import (
    SPLITS, CohortError, CohortExample, CohortSpec, add_months, assemble, build_cohort, candidate_pool,
    has_neoplasm, leakage_violations, match_controls, read_cohort, select_cases, write_cohort,
)
from catchfm.synth import generate, planted_config

from conftest import patient, visit


@pytest.fixture(scope="module")
def corpus():
    return [r for r, _ in generate(planted_config(6000, seed=13))]


def _case(pid="C", gender="female", birth_year=1960):
    return patient(pid,
                   visit("2006-01-10", "ICD9-Diag:401.9"),
                   visit("2008-06-01", "ICD9-Diag:577.1"),
                   visit("2009-11-01", "ICD9-Diag:401.9"),
                   visit("2010-05-01", "ICD9-Diag:157.0"),
                   visit("2011-01-01", "ICD9-Diag:401.9"),
                   gender=gender, birth_year=birth_year)


def _twin(pid="T"):
    return patient(pid,
                   visit("2006-01-12", "ICD9-Diag:401.9"),
                   visit("2008-03-01", "ICD9-Diag:250.00"),
                   visit("2010-05-01", "ICD9-Diag:460"),
                   visit("2010-12-28", "ICD9-Diag:401.9"),
                   birth_year=1960)


def test_spec_validation():
    with pytest.raises(CohortError):
        CohortSpec(exclusion_months=9)
    with pytest.raises(CohortError):
        CohortSpec(control_ratio=0)
    with pytest.raises(CohortError):
        CohortSpec(target="15")


def test_add_months_clamps_day():
    assert add_months(date(2010, 3, 31), -1) == date(2010, 2, 28)
    assert add_months(date(2010, 5, 1), -12) == date(2009, 5, 1)


def test_lone_target_code_is_a_first_case():
    (case,) = select_cases([_case()], CohortSpec())
    assert case.index_date == date(2010, 5, 1) and case.label == 1
    assert all(v.date <= date(2009, 5, 1) for v in case.history)


def test_prior_cancer_moves_case_to_subsequent():
    rec = patient("S", visit("2005-01-01", "ICD9-Diag:401.9"), visit("2008-02-01", "ICD9-Diag:162.9"),
                  visit("2010-05-01", "ICD9-Diag:157.0"))
    assert select_cases([rec], CohortSpec(kind="first")) == []
    (case,) = select_cases([rec], CohortSpec(kind="subsequent"))
    assert case.index_date == date(2010, 5, 1)


def test_later_other_cancer_does_not_count_as_prior():
    rec = patient("S", visit("2007-01-01", "ICD9-Diag:401.9"), visit("2010-05-01", "ICD9-Diag:157.0"),
                  visit("2011-02-01", "ICD9-Diag:162.9"))
    assert len(select_cases([rec], CohortSpec(kind="first"))) == 1


def test_short_history_is_dropped():
    rec = patient("N", visit("2009-09-01", "ICD9-Diag:401.9"), visit("2010-05-01", "ICD9-Diag:157.0"))
    assert select_cases([rec], CohortSpec()) == []


@pytest.mark.parametrize("months,included", [(12, False), (6, True)])
def test_exclusion_window(months, included):
    rec = patient("W", visit("2007-01-01", "ICD9-Diag:401.9"), visit("2009-11-01", "ICD9-Diag:250.00"),
                  visit("2010-05-01", "ICD9-Diag:157.0"))
    (case,) = select_cases([rec], CohortSpec(exclusion_months=months))
    assert (date(2009, 11, 1) in [v.date for v in case.history]) is included


def test_twin_is_selected():
    case_rec, twin = _case(), _twin()
    cases = select_cases([case_rec], CohortSpec())
    controls, report = match_controls(cases, [twin], {"C": case_rec}, CohortSpec(), seed=0)
    assert [c.patient_id for c in controls] == ["T"]
    assert controls[0].index_date == date(2010, 5, 1) and controls[0].label == 0
    assert report.matched == 1 and report.short == {"C": 1}


def test_neoplasm_candidate_is_never_selected():
    tainted = patient("X", visit("2006-01-12", "ICD9-Diag:200.1"), visit("2010-05-01", "ICD9-Diag:460"),
                      visit("2010-12-28", "ICD9-Diag:401.9"), birth_year=1961)
    assert has_neoplasm(tainted)
    assert candidate_pool([tainted, _twin()]) == [_twin()]
    case_rec = _case()
    with pytest.raises(CohortError):
        match_controls(select_cases([case_rec], CohortSpec()), [tainted], {"C": case_rec}, CohortSpec())


def test_controlled_matching_rules(corpus):
    spec = CohortSpec()
    records = {r.patient_id: r for r in corpus}
    ds = build_cohort(corpus, spec, seed=1)
    cases = {e.patient_id: e for e in ds.examples if e.label == 1}
    assert ds.report.matched > len(cases)
    for e in ds.examples:
        if e.label:
            continue
        rec = records[e.patient_id]
        assert not has_neoplasm(rec)
        assert e.index_date in {v.date for v in rec.visits}
        assert e.history


def test_random_matching_hits_the_ratio_prevalence(corpus):
    ds = build_cohort(corpus, CohortSpec(matching="random", control_ratio=62), seed=1)
    assert not ds.report.short
    assert ds.positive_rate() == pytest.approx(1 / 63)
    assert round(100 * ds.positive_rate(), 2) == 1.59


def test_random_control_dates_lie_near_the_case(corpus):
    spec = CohortSpec(matching="random", control_ratio=5)
    records = {r.patient_id: r for r in corpus}
    cases = select_cases(corpus, spec)
    pool = [r for r in candidate_pool(corpus) if r.patient_id not in {c.patient_id for c in cases}]
    controls, _ = match_controls(cases, pool, records, spec, seed=3)
    case_dates = sorted(c.index_date for c in cases)
    for c in controls:
        assert min(abs((c.index_date - d).days) for d in case_dates) <= 30


def test_controlled_and_random_share_positives(corpus):
    a = build_cohort(corpus, CohortSpec(matching="controlled"), seed=2)
    b = build_cohort(corpus, CohortSpec(matching="random"), seed=2)
    pos = lambda ds: sorted((e.patient_id, e.index_date) for e in ds.examples if e.label)
    assert pos(a) == pos(b)


def test_build_is_deterministic(corpus):
    spec = CohortSpec(matching="random", control_ratio=10)
    assert build_cohort(corpus, spec, seed=4).examples == build_cohort(corpus, spec, seed=4).examples


def test_no_leakage_and_disjoint_splits(corpus):
    ds = build_cohort(corpus, CohortSpec(matching="random", control_ratio=20), seed=5)
    assert leakage_violations(ds) == []
    ids = [e.patient_id for e in ds.examples]
    assert len(ids) == len(set(ids))


def _examples(n_pos, n_neg):
    d = date(2010, 1, 1)
    return ([CohortExample(f"P{i:05d}", d, 1) for i in range(n_pos)],
            [CohortExample(f"N{i:05d}", d, 0) for i in range(n_neg)])


def test_stratified_split_arithmetic():
    cases, controls = _examples(100, 6000)
    ds = assemble(cases, controls, CohortSpec(), seed=0)
    test = ds.split("test")
    assert abs(sum(e.label for e in test) - 10) <= 1
    total = ds.positive_rate()
    for name in SPLITS:
        assert abs(ds.positive_rate(name) - total) <= 0.003
    sizes = [len(ds.split(s)) / len(ds.examples) for s in SPLITS]
    assert sizes == pytest.approx([0.8, 0.1, 0.1], abs=0.01)


def test_too_few_positives_is_an_error():
    cases, controls = _examples(9, 500)
    with pytest.raises(CohortError):
        assemble(cases, controls, CohortSpec())


def test_cohort_file_round_trip(tmp_path, corpus):
    spec = CohortSpec(matching="random", control_ratio=5)
    ds = build_cohort(corpus, spec, seed=6)
    write_cohort(ds, tmp_path / "c.jsonl")
    back = read_cohort(tmp_path / "c.jsonl", {r.patient_id: r for r in corpus}, spec)
    assert back == ds.examples
