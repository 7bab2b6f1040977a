import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from catchfm.ehr import dumps_record, is_cancer_code
from catchfm.synth import (
    OTHER_CANCERS, TARGET, ConfigError, GeneratorConfig, RiskRule, bayes_oracle, cancer_probability,
    default_code_pool, generate, load_truth, planted_config, summarize, write_truth,
)

from conftest import patient, visit


def _simple(n, seed=0, **kw):
    base = dict(seed=seed, n_patients=n, code_pool=default_code_pool(), base_rates={TARGET: 0.016},
                risk_rules=[RiskRule("ICD9-Diag:577.1", TARGET, 8.0, 12, 0.10)])
    base.update(kw)
    return GeneratorConfig(**base)


def test_same_seed_is_byte_identical():
    cfg = planted_config(200, seed=5)
    a = [(dumps_record(r), t.to_dict()) for r, t in generate(cfg)]
    b = [(dumps_record(r), t.to_dict()) for r, t in generate(cfg)]
    assert a == b
    other = [dumps_record(r) for r, _ in generate(planted_config(200, seed=6))]
    assert other != [x for x, _ in a]


def test_multiplier_of_one_is_rejected():
    with pytest.raises(ConfigError):
        _simple(10, risk_rules=[RiskRule("ICD9-Diag:577.1", TARGET, 1.0)])


def test_short_lead_is_rejected():
    with pytest.raises(ConfigError):
        _simple(10, risk_rules=[RiskRule("ICD9-Diag:577.1", TARGET, 2.0, min_lead_months=6)])


def test_invalid_year_span_is_rejected():
    with pytest.raises(ConfigError):
        _simple(10, years_span=(2014, 2005))


def test_neoplasm_in_background_pool_is_rejected():
    with pytest.raises(ConfigError):
        _simple(10, code_pool={"ICD9-Diag:150.1": 1.0})


def test_zero_patients_gives_empty_streams():
    assert list(generate(_simple(0))) == []


def test_config_round_trips_through_dict():
    cfg = planted_config(50, seed=3)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


def test_hazard_formula():
    cfg = _simple(1)
    assert cancer_probability(cfg, TARGET, []) == pytest.approx(0.016)
    assert cancer_probability(cfg, TARGET, ["ICD9-Diag:577.1"]) == pytest.approx(1 - 0.984**8)


def test_empirical_rate_matches_expectation():
    # oracle from the config before generation: 0.9 * 1.6% + 0.1 * (1 - 0.984^8) = 2.65%
    cfg = _simple(10_000, seed=11)
    expected = 0.9 * 0.016 + 0.1 * (1 - 0.984**8)
    assert expected == pytest.approx(0.0265, abs=5e-4)
    rate = np.mean([t.has_cancer(TARGET) for _, t in generate(cfg)])
    assert abs(rate - 0.027) <= 0.005


def test_cancer_code_appears_once_at_diagnosis_and_never_before():
    for rec, truth in generate(planted_config(3000, seed=2)):
        for token, when in truth.diagnoses.items():
            hits = [v for v in rec.visits if any(c.token == token for c in v.codes)]
            assert len(hits) == 1 and hits[0].date == when
        for v in rec.visits:
            for c in v.codes:
                if is_cancer_code(c):
                    assert c.token in truth.diagnoses


def test_risk_codes_precede_diagnosis_by_the_lead():
    cfg = planted_config(3000, seed=4)
    leads = []
    for rec, truth in generate(cfg):
        if truth.has_cancer(TARGET) and truth.planted_risk_codes:
            first = min(v.date for v in rec.visits if any(c.token in truth.planted_risk_codes for c in v.codes))
            leads.append((truth.diagnoses[TARGET] - first).days)
    assert leads and min(leads) >= 365


def test_summarize_counts():
    s = summarize([patient("A", visit("2010-01-01", "ICD9-Diag:401.9"), visit("2010-02-01", "ICD9-Diag:401.9"),
                           visit("2010-03-01", "ICD9-Diag:401.9", "DrugCode:X"))])
    assert (s.n_patients, s.n_visits, s.n_codes, s.avg_visits_per_patient) == (1, 3, 4, 3.0)
    empty = summarize([])
    assert (empty.n_patients, empty.n_visits, empty.avg_visits_per_patient) == (0, 0, 0.0)


def test_average_visits_follow_the_visit_rate():
    cfg = _simple(300, visit_rate=18.0, years_span=(2000, 2014))
    s = summarize(r for r, _ in generate(cfg))
    assert 243 <= s.avg_visits_per_patient <= 297


def test_truth_round_trip(tmp_path):
    truths = [t for _, t in generate(planted_config(100, seed=1))]
    write_truth(truths, tmp_path / "t.jsonl")
    assert load_truth(tmp_path / "t.jsonl") == truths


def test_oracle_for_the_desk_config():
    report = bayes_oracle(planted_config(10), TARGET)
    assert report.auroc >= 0.92
    assert report.sensitivity > 0.4
    # prevalence by enumeration of the five independent carrier codes
    p = 0.0
    for mask in range(32):
        carried = [c for i, c in enumerate(planted_config(1).carrier_codes()) if mask >> i & 1]
        weight = np.prod([0.004 if mask >> i & 1 else 0.996 for i in range(5)])
        p += weight * cancer_probability(planted_config(1), TARGET, carried)
    assert report.prevalence == pytest.approx(p, rel=1e-12)


def test_oracle_is_one_half_without_rules():
    cfg = _simple(1, risk_rules=[])
    assert bayes_oracle(cfg, TARGET).auroc == pytest.approx(0.5)


def test_planted_signal_is_learnable_from_bag_of_codes():
    cfg = planted_config(8000, seed=21)
    codes, labels = [], []
    for rec, truth in generate(cfg):
        codes.append({c.token for v in rec.visits for c in v.codes if not is_cancer_code(c)})
        labels.append(int(truth.has_cancer(TARGET)))
    vocab = sorted(set().union(*codes))
    col = {t: i for i, t in enumerate(vocab)}
    X = np.zeros((len(codes), len(vocab)))
    for i, cs in enumerate(codes):
        X[i, [col[c] for c in cs]] = 1
    y = np.array(labels)
    half = len(y) // 2
    clf = LogisticRegression(max_iter=2000, C=0.5).fit(X[:half], y[:half])
    assert roc_auc_score(y[half:], clf.predict_proba(X[half:])[:, 1]) > 0.7


def test_other_cancers_populate_the_subsequent_population():
    truths = [t for _, t in generate(planted_config(3000, seed=8))]
    assert sum(t.has_cancer(OTHER_CANCERS[0]) or t.has_cancer(OTHER_CANCERS[1]) for t in truths) > 50
