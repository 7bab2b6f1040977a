"""Deterministic synthetic EHR generator with planted cancer risk factors.

Each patient is simulated month by month: visit arrivals are Poisson, visit codes
are drawn from a weighted code pool, and each configured cancer has a monthly onset
probability whose cumulative hazard is multiplied by the patient's risk factors.

The per-month probability is chosen so that, over a patient's onset window,

    P(cancer | risk set S) = 1 - (1 - base_rate) ** prod(multipliers in S)

which is about ``multiplier * base_rate`` for small rates and never exceeds one.
That closed form is what :func:`bayes_oracle` uses to bound achievable accuracy.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from calendar import monthrange
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from catchfm.ehr import MedicalCode, PatientRecord, Visit, is_cancer_code

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RiskRule:
    """``risk_code`` multiplies the onset hazard of ``target`` once it has been present
    for ``min_lead_months``.

    Non-cancer risk codes are carried by a ``prevalence`` fraction of patients, who
    get the code at their first visit and then at later visits with the config's
    recurrence probability. A cancer risk code instead acts from its own diagnosis.
    """

    risk_code: str
    target: str
    hazard_multiplier: float
    min_lead_months: int = 12
    prevalence: float = 0.05


@dataclass(frozen=True)
class Demographics:
    min_age: int = 20  # age at the start of the simulated span
    max_age: int = 80
    female_fraction: float = 0.5


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_patients: int = 1000
    years_span: tuple[int, int] = (2005, 2014)  # inclusive calendar years
    code_pool: dict[str, float] = field(default_factory=dict)  # token -> weight
    base_rates: dict[str, float] = field(default_factory=dict)  # cancer token -> lifetime probability
    risk_rules: list[RiskRule] = field(default_factory=list)
    visit_rate: float = 12.0  # mean visits per patient per year
    codes_per_visit: float = 2.0  # mean codes per visit (at least one)
    risk_recurrence: float = 0.3  # chance a carrier's risk code shows up at a later visit
    late_enrollment: float = 0.0  # fraction of patients whose records start after the span start
    onset_delay_months: int = 24  # earliest onset, counted from a patient's first month
    demographics: Demographics = field(default_factory=Demographics)

    def __post_init__(self):
        self.years_span = tuple(self.years_span)
        self.risk_rules = [r if isinstance(r, RiskRule) else RiskRule(**r) for r in self.risk_rules]
        if isinstance(self.demographics, dict):
            self.demographics = Demographics(**self.demographics)
        self.validate()

    @property
    def n_months(self) -> int:
        return 12 * (self.years_span[1] - self.years_span[0] + 1)

    def validate(self) -> None:
        start, end = self.years_span
        if end < start:
            raise ConfigError(f"invalid year span {self.years_span}")
        if self.n_patients < 0:
            raise ConfigError("n_patients must be non-negative")
        for tok, w in self.code_pool.items():
            if not (math.isfinite(w) and w > 0):
                raise ConfigError(f"code pool weight for {tok} must be positive and finite")
            if is_cancer_code(MedicalCode.parse(tok)):
                raise ConfigError(f"background code {tok} lies in the neoplasm range")
        for tok, rate in self.base_rates.items():
            if not is_cancer_code(MedicalCode.parse(tok)):
                raise ConfigError(f"{tok} is not a neoplasm code")
            if not 0 < rate < 1:
                raise ConfigError(f"base rate for {tok} must be in (0, 1)")
        for rule in self.risk_rules:
            if not rule.hazard_multiplier > 1:
                raise ConfigError(f"hazard_multiplier must exceed 1 (rule {rule.risk_code} -> {rule.target})")
            if rule.min_lead_months < 12:
                raise ConfigError("min_lead_months must be at least 12")
            if rule.target not in self.base_rates:
                raise ConfigError(f"rule target {rule.target} has no base rate")
            if rule.risk_code in self.code_pool:
                raise ConfigError(f"risk code {rule.risk_code} must not also be a background code")
            if rule.risk_code not in self.base_rates and not 0 < rule.prevalence < 1:
                raise ConfigError("risk code prevalence must be in (0, 1)")
            if rule.min_lead_months > self.onset_delay_months:
                raise ConfigError("onset_delay_months must cover every rule's min_lead_months")
        if self.visit_rate <= 0 or self.codes_per_visit < 1:
            raise ConfigError("visit_rate must be positive and codes_per_visit at least 1")
        if not 0 <= self.late_enrollment <= 1 or not 0 <= self.risk_recurrence <= 1:
            raise ConfigError("late_enrollment and risk_recurrence are probabilities")
        if self.n_months < self.onset_delay_months + 12:
            raise ConfigError("year span too short for the onset delay plus a year of onset window")
        _cancer_order(self)

    def carrier_codes(self) -> list[str]:
        """Non-cancer risk codes in first-appearance order."""
        seen: dict[str, float] = {}
        for rule in self.risk_rules:
            if rule.risk_code not in self.base_rates:
                seen.setdefault(rule.risk_code, rule.prevalence)
        return list(seen)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["years_span"] = list(self.years_span)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _cancer_order(cfg: GeneratorConfig) -> list[str]:
    """Cancers ordered so that any cancer used as a risk code is simulated first."""
    deps = {c: set() for c in cfg.base_rates}
    for rule in cfg.risk_rules:
        if rule.risk_code in cfg.base_rates:
            deps[rule.target].add(rule.risk_code)
    order: list[str] = []
    while deps:
        ready = sorted(c for c, d in deps.items() if not d - set(order))
        if not ready:
            raise ConfigError("cancer risk rules form a cycle")
        order.extend(ready)
        for c in ready:
            del deps[c]
    return order


@dataclass(frozen=True)
class GroundTruth:
    patient_id: str
    diagnoses: dict[str, date]  # cancer token -> first diagnosis date
    planted_risk_codes: tuple[str, ...]

    def has_cancer(self, token: str) -> bool:
        return token in self.diagnoses

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "diagnoses": {k: v.isoformat() for k, v in sorted(self.diagnoses.items())},
            "planted_risk_codes": list(self.planted_risk_codes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            d["patient_id"],
            {k: date.fromisoformat(v) for k, v in d["diagnoses"].items()},
            tuple(d["planted_risk_codes"]),
        )


# ---------------------------------------------------------------------------
# Generation

_KINDS = ("outpatient", "pharmacy", "inpatient")
_KIND_P = np.array([0.7, 0.2, 0.1])


class _Plan:
    """Per-config lookups shared by every patient."""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        tokens = sorted(cfg.code_pool)
        self.pool = [MedicalCode.parse(t) for t in tokens]
        w = np.array([cfg.code_pool[t] for t in tokens], dtype=np.float64)
        self.pool_cdf = np.cumsum(w / w.sum()) if len(w) else np.zeros(0)
        self.carriers = cfg.carrier_codes()
        self.carrier_codes = {t: MedicalCode.parse(t) for t in self.carriers}
        prevalence = {r.risk_code: r.prevalence for r in cfg.risk_rules}
        self.carrier_prev = np.array([prevalence[t] for t in self.carriers])
        self.cancers = _cancer_order(cfg)
        self.cancer_codes = {t: MedicalCode.parse(t) for t in cfg.base_rates}
        self.rules_for = {c: [r for r in cfg.risk_rules if r.target == c] for c in cfg.base_rates}


def _month_date(cfg: GeneratorConfig, month: int, day_fraction: float) -> date:
    year = cfg.years_span[0] + month // 12
    mon = month % 12 + 1
    ndays = monthrange(year, mon)[1]
    return date(year, mon, 1 + min(int(day_fraction * ndays), ndays - 1))


def _simulate(plan: _Plan, index: int) -> tuple[PatientRecord, GroundTruth]:
    cfg = plan.cfg
    rng = np.random.default_rng([cfg.seed, index])
    M = cfg.n_months
    demo = cfg.demographics
    pid = f"P{index:07d}"

    age0 = int(rng.integers(demo.min_age, demo.max_age + 1))
    birth_year = cfg.years_span[0] - age0
    gender = "female" if rng.random() < demo.female_fraction else "male"
    enroll = 0
    last_enroll = M - cfg.onset_delay_months - 12
    if rng.random() < cfg.late_enrollment:
        enroll = int(rng.integers(1, last_enroll + 1))

    carried = tuple(t for t, q in zip(plan.carriers, plan.carrier_prev) if rng.random() < q)

    # Visits: the enrollment month always has one; later months are Poisson.
    months = np.arange(enroll, M)
    counts = rng.poisson(cfg.visit_rate / 12.0, size=len(months))
    counts[0] = max(counts[0], 1)
    visit_months = np.repeat(months, counts)
    n_visits = len(visit_months)
    days = rng.random(n_visits)
    kinds = rng.choice(len(_KINDS), size=n_visits, p=_KIND_P)
    n_codes = 1 + rng.poisson(cfg.codes_per_visit - 1.0, size=n_visits)
    draws = np.searchsorted(plan.pool_cdf, rng.random(int(n_codes.sum())), side="right")
    draws = np.minimum(draws, len(plan.pool) - 1)
    recur = rng.random((n_visits, len(carried))) < cfg.risk_recurrence
    recur[0, :] = True

    # Cancer onsets, one month at a time from the onset window start.
    window_start = enroll + cfg.onset_delay_months
    W = M - window_start
    onset_month: dict[str, int] = {}
    for cancer in plan.cancers:
        base = cfg.base_rates[cancer]
        mult_const = 1.0
        timed: list[tuple[int, float]] = []
        for rule in plan.rules_for[cancer]:
            if rule.risk_code in carried:
                mult_const *= rule.hazard_multiplier
            elif rule.risk_code in onset_month:
                timed.append((onset_month[rule.risk_code] + rule.min_lead_months, rule.hazard_multiplier))
        u = rng.random(W)
        for j in range(W):
            t = window_start + j
            mult = mult_const
            for start, m in timed:
                if t >= start:
                    mult *= m
            p = -math.expm1(mult / W * math.log1p(-base))
            if u[j] < p:
                onset_month[cancer] = t
                break

    visits: list[Visit] = []
    offset = 0
    for v in range(n_visits):
        codes = {plan.pool[i] for i in draws[offset : offset + n_codes[v]]}
        offset += n_codes[v]
        for c, tok in enumerate(carried):
            if recur[v, c]:
                codes.add(plan.carrier_codes[tok])
        visits.append(Visit(_month_date(cfg, int(visit_months[v]), days[v]), _KINDS[kinds[v]], tuple(codes)))

    diagnoses: dict[str, date] = {}
    for cancer in plan.cancers:
        if cancer in onset_month:
            when = _month_date(cfg, onset_month[cancer], rng.random())
            diagnoses[cancer] = when
            visits.append(Visit(when, "outpatient", (plan.cancer_codes[cancer],)))

    record = PatientRecord(pid, birth_year, gender, tuple(visits))
    return record, GroundTruth(pid, diagnoses, carried)


def generate(config: GeneratorConfig) -> Iterator[tuple[PatientRecord, GroundTruth]]:
    """Yield (record, truth) pairs for patients 0..n-1; each depends only on (seed, index)."""
    plan = _Plan(config)
    if config.n_patients and not plan.pool:
        raise ConfigError("code_pool is empty")
    for i in range(config.n_patients):
        yield _simulate(plan, i)


def write_truth(truths: Iterable[GroundTruth], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for t in truths:
            fh.write(json.dumps(t.to_dict(), separators=(",", ":")) + "\n")
            n += 1
    return n


def load_truth(path: str | Path) -> list[GroundTruth]:
    with open(path, encoding="utf-8") as fh:
        return [GroundTruth.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Summaries and the Bayes oracle


@dataclass(frozen=True)
class CorpusSummary:
    n_patients: int
    n_visits: int
    n_codes: int
    avg_visits_per_patient: float


def summarize(patients: Iterable[PatientRecord]) -> CorpusSummary:
    n_p = n_v = n_c = 0
    for record in patients:
        n_p += 1
        n_v += len(record.visits)
        n_c += sum(len(v.codes) for v in record.visits)
    return CorpusSummary(n_p, n_v, n_c, n_v / n_p if n_p else 0.0)


@dataclass(frozen=True)
class OracleReport:
    prevalence: float  # P(target) over the population
    auroc: float
    sensitivity: float  # at the requested specificity floor
    specificity_floor: float


def cancer_probability(config: GeneratorConfig, target: str, carried: Iterable[str]) -> float:
    """P(target | carried non-cancer risk codes), ignoring cancer-on-cancer rules."""
    mult = 1.0
    carried = set(carried)
    for rule in config.risk_rules:
        if rule.target == target and rule.risk_code in carried:
            mult *= rule.hazard_multiplier
    return -math.expm1(mult * math.log1p(-config.base_rates[target]))


def bayes_oracle(config: GeneratorConfig, target: str, spec_floor: float = 0.99) -> OracleReport:
    """Best achievable ranking of cases vs cancer-free patients from risk codes alone.

    Enumerates every subset of the target's carrier risk codes. Positives are weighted
    by P(S) P(c|S) and negatives by P(S) (1 - P(c|S)); AUROC counts within-group ties
    as one half, and the sensitivity takes whole groups in descending risk while the
    negative mass stays within ``1 - spec_floor``.
    """
    prevalence_of = {r.risk_code: r.prevalence for r in config.risk_rules}
    codes = [c for c in config.carrier_codes() if any(r.target == target and r.risk_code == c for r in config.risk_rules)]
    groups = []
    for mask in itertools.product((0, 1), repeat=len(codes)):
        ps = 1.0
        carried = []
        for bit, code in zip(mask, codes):
            ps *= prevalence_of[code] if bit else 1 - prevalence_of[code]
            if bit:
                carried.append(code)
        pc = cancer_probability(config, target, carried)
        groups.append((pc, ps * pc, ps * (1 - pc)))
    groups.sort(key=lambda g: -g[0])
    pos_total = sum(g[1] for g in groups)
    neg_total = sum(g[2] for g in groups)
    auc = 0.0
    neg_below = neg_total
    for _, pos, neg in groups:
        neg_below -= neg
        auc += pos * (neg_below + 0.5 * neg)
    auc /= pos_total * neg_total
    sens, fp = 0.0, 0.0
    for _, pos, neg in groups:
        if (fp + neg) / neg_total > 1 - spec_floor + 1e-12:
            break
        fp += neg
        sens += pos / pos_total
    return OracleReport(pos_total, auc, sens, spec_floor)


# ---------------------------------------------------------------------------
# Presets


def default_code_pool(n_diag: int = 300, n_drug: int = 150, n_proc: int = 40, n_order: int = 60,
                      exponent: float = 1.0) -> dict[str, float]:
    """Background codes with Zipf-like weights; diagnosis codes avoid the neoplasm range."""
    tokens = []
    cats = [c for c in range(1, 1000) if not 140 <= c <= 239]
    for i in range(n_diag):
        cat = cats[(i * 7) % len(cats)]
        tokens.append(f"ICD9-Diag:{cat:03d}.{i % 10}")
    tokens += [f"ICD9-Proc:{10 + i}.{i % 10}" for i in range(n_proc)]
    tokens += [f"DrugCode:D{i:05d}" for i in range(n_drug)]
    tokens += [f"OrderCode:O{i:05d}" for i in range(n_order)]
    # interleave systems so the heaviest codes are not all diagnoses
    rng = np.random.default_rng(12345)
    order = rng.permutation(len(tokens))
    return {tokens[j]: 1.0 / (rank + 1) ** exponent for rank, j in enumerate(order)}


TARGET = "ICD9-Diag:157.0"  # pancreas
OTHER_CANCERS = ("ICD9-Diag:155.0", "ICD9-Diag:162.9")  # liver, lung

# Planted risk codes for the pancreatic target: (token, prevalence, hazard multiplier).
# Rare but strong, so the Bayes-optimal screen reaches high sensitivity at 99% specificity.
PLANTED_RISKS = (
    ("ICD9-Diag:577.1", 0.004, 1000.0),  # chronic pancreatitis
    ("ICD9-Diag:250.03", 0.004, 800.0),  # diabetes, uncontrolled
    ("ICD9-Diag:576.2", 0.004, 1200.0),  # bile duct obstruction
    ("ICD9-Diag:782.4", 0.004, 1000.0),  # jaundice
    ("DrugCode:RX-PANCRELIPASE", 0.004, 600.0),
)


def planted_config(n_patients: int, seed: int = 0, target_rate: float = 0.001, **overrides) -> GeneratorConfig:
    """Desk preset: rare, strong risk codes for the target plus two other cancers."""
    rules = [RiskRule(code, TARGET, mult, 12, prev) for code, prev, mult in PLANTED_RISKS]
    # earlier liver or lung cancer raises the target's hazard, populating the subsequent cohort
    rules += [RiskRule(c, TARGET, 60.0, 12) for c in OTHER_CANCERS]
    base = {TARGET: target_rate, OTHER_CANCERS[0]: 0.03, OTHER_CANCERS[1]: 0.03}
    kw = dict(
        seed=seed,
        n_patients=n_patients,
        years_span=(2005, 2014),
        code_pool=default_code_pool(),
        base_rates=base,
        risk_rules=rules,
        visit_rate=10.0,
        codes_per_visit=2.0,
    )
    kw.update(overrides)
    return GeneratorConfig(**kw)
