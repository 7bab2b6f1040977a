"""Case-control cohort construction for a target cancer.

Cases are patients whose first code in the target ICD-9 category defines their index
date. ``first`` cohorts require no earlier neoplasm code of any kind; ``subsequent``
cohorts require an earlier non-target neoplasm. Controls come from patients with no
neoplasm code anywhere and take their index date from a visit matched to the case.
Every example sees only the visits in [index - history window, index - exclusion].
"""

from __future__ import annotations

import bisect
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from catchfm.ehr import NEOPLASM_RANGE, PatientRecord, Visit

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MIN_POSITIVES = 10


class CohortError(ValueError):
    pass


def add_months(d: date, months: int) -> date:
    """Calendar month arithmetic, clamping the day to the target month's length."""
    y, m = divmod(d.year * 12 + (d.month - 1) + months, 12)
    m += 1
    for day in (d.day, 30, 29, 28):
        try:
            return date(y, m, min(d.day, day))
        except ValueError:
            continue
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class CohortSpec:
    target: str = "157"  # three-digit ICD-9 category
    kind: str = "first"  # first | subsequent
    exclusion_months: int = 12
    history_years: float = 5.0
    control_ratio: int = 62
    matching: str = "controlled"  # controlled | random
    duration_tolerance: float = 0.10
    min_history_months: int = 12  # pre-window history a case needs
    age_bucket_years: int = 5
    random_window_days: int = 30

    def __post_init__(self):
        if not (len(self.target) == 3 and self.target.isdigit()):
            raise CohortError(f"target must be a three-digit ICD-9 category, got {self.target!r}")
        if self.kind not in ("first", "subsequent"):
            raise CohortError(f"kind must be first or subsequent, got {self.kind!r}")
        if self.exclusion_months not in (6, 12):
            raise CohortError("exclusion_months must be 6 or 12")
        if not self.history_years > 0:
            raise CohortError("history_years must be positive")
        if self.control_ratio < 1:
            raise CohortError("control_ratio must be at least 1")
        if self.matching not in ("controlled", "random"):
            raise CohortError(f"matching must be controlled or random, got {self.matching!r}")

    @property
    def history_months(self) -> int:
        return round(12 * self.history_years)

    def window(self, index_date: date) -> tuple[date, date]:
        """Inclusive [start, end] dates of visible history."""
        return add_months(index_date, -self.history_months), add_months(index_date, -self.exclusion_months)


@dataclass(frozen=True)
class CohortExample:
    patient_id: str
    index_date: date
    label: int  # 1 positive, 0 negative
    history: tuple[Visit, ...] = ()
    split: str | None = None


def history_for(record: PatientRecord, index_date: date, spec: CohortSpec) -> tuple[Visit, ...]:
    start, end = spec.window(index_date)
    return tuple(v for v in record.visits if start <= v.date <= end)


def _categories(visit: Visit) -> set[int]:
    return {int(c.category) for c in visit.codes if c.category is not None}


def _is_neoplasm(cat: int) -> bool:
    return NEOPLASM_RANGE[0] <= cat <= NEOPLASM_RANGE[1]


def has_neoplasm(record: PatientRecord) -> bool:
    return any(_is_neoplasm(cat) for v in record.visits for cat in _categories(v))


def select_cases(patients: Iterable[PatientRecord], spec: CohortSpec) -> list[CohortExample]:
    target = int(spec.target)
    cases = []
    for record in patients:
        index = None
        prior = False  # any non-target neoplasm up to and including the index date
        for visit in record.visits:
            cats = _categories(visit)
            if target in cats and index is None:
                index = visit.date
            if index is not None and visit.date > index:
                break
            if any(_is_neoplasm(c) and c != target for c in cats):
                prior = True
        if index is None:
            continue
        if (spec.kind == "first") == prior:
            continue
        if record.first_date > add_months(index, -(spec.exclusion_months + spec.min_history_months)):
            continue
        history = history_for(record, index, spec)
        if not history:
            continue
        cases.append(CohortExample(record.patient_id, index, 1, history))
    return cases


def candidate_pool(patients: Iterable[PatientRecord]) -> list[PatientRecord]:
    """Patients eligible as controls: no neoplasm code anywhere in their record."""
    return [r for r in patients if r.visits and not has_neoplasm(r)]


@dataclass
class MatchReport:
    requested: int = 0
    matched: int = 0
    short: dict[str, int] = field(default_factory=dict)  # case id -> controls found, when < ratio
    unmatched: list[str] = field(default_factory=list)  # cases with no control at all


class _PoolIndex:
    def __init__(self, pool: Sequence[PatientRecord]):
        self.pool = list(pool)
        self.gender = np.array([r.gender == "female" for r in self.pool])
        self.birth_year = np.array([r.birth_year for r in self.pool])
        self.first = np.array([r.first_date.toordinal() for r in self.pool])
        self.last = np.array([r.last_date.toordinal() for r in self.pool])
        self.by_date: dict[int, list[int]] = defaultdict(list)
        self.visit_days: list[list[int]] = []
        for i, r in enumerate(self.pool):
            days = sorted({v.date.toordinal() for v in r.visits})
            self.visit_days.append(days)
            for d in days:
                self.by_date[d].append(i)


def match_controls(
    cases: Sequence[CohortExample],
    pool: Sequence[PatientRecord],
    records: dict[str, PatientRecord],
    spec: CohortSpec,
    seed: int = 0,
) -> tuple[list[CohortExample], MatchReport]:
    """Pick up to ``control_ratio`` controls per case, each pool patient used at most once.

    Cases are processed in (index_date, patient_id) order with per-case random streams,
    so the result depends only on the inputs and the seed.
    """
    if any(has_neoplasm(r) for r in pool):
        raise CohortError("candidate pool contains a patient with a neoplasm code")
    idx = _PoolIndex(pool)
    used = np.zeros(len(idx.pool), dtype=bool)
    report = MatchReport()
    controls: list[CohortExample] = []
    ordered = sorted(range(len(cases)), key=lambda i: (cases[i].index_date, cases[i].patient_id))
    for rank, ci in enumerate(ordered):
        case = cases[ci]
        rng = np.random.default_rng([seed, rank])
        if spec.matching == "controlled":
            picks = _controlled(case, records[case.patient_id], idx, used, spec, rng)
        else:
            picks = _random(case, idx, used, spec, rng)
        report.requested += spec.control_ratio
        for j, when in picks:
            used[j] = True
            record = idx.pool[j]
            controls.append(CohortExample(record.patient_id, when, 0, history_for(record, when, spec)))
        report.matched += len(picks)
        if len(picks) < spec.control_ratio:
            report.short[case.patient_id] = len(picks)
            if not picks:
                report.unmatched.append(case.patient_id)
    if report.short:
        logger.info("%d of %d cases received fewer than %d controls",
                    len(report.short), len(cases), spec.control_ratio)
    return controls, report


def _has_window_history(idx: _PoolIndex, j: int, when: date, spec: CohortSpec) -> bool:
    start, end = spec.window(when)
    days = idx.visit_days[j]
    k = bisect.bisect_left(days, start.toordinal())
    return k < len(days) and days[k] <= end.toordinal()


def _controlled(case, record, idx, used, spec, rng) -> list[tuple[int, date]]:
    when = case.index_date
    day = when.toordinal()
    cands = np.array(idx.by_date.get(day, []), dtype=np.int64)
    if cands.size == 0:
        return []
    cands = cands[~used[cands]]
    bucket = (when.year - record.birth_year) // spec.age_bucket_years
    ages = when.year - idx.birth_year[cands]
    keep = (idx.gender[cands] == (record.gender == "female")) & (ages // spec.age_bucket_years == bucket)
    case_prior = day - record.first_date.toordinal()
    case_total = record.last_date.toordinal() - record.first_date.toordinal()
    tol = spec.duration_tolerance
    prior = day - idx.first[cands]
    total = idx.last[cands] - idx.first[cands]
    keep &= np.abs(prior - case_prior) <= tol * case_prior
    keep &= np.abs(total - case_total) <= tol * case_total
    cands = cands[keep]
    cands = np.array([j for j in cands if _has_window_history(idx, j, when, spec)], dtype=np.int64)
    if cands.size > spec.control_ratio:
        cands = np.sort(rng.choice(cands, spec.control_ratio, replace=False))
    return [(int(j), when) for j in cands]


def _random(case, idx, used, spec, rng) -> list[tuple[int, date]]:
    day = case.index_date.toordinal()
    picks: list[tuple[int, date]] = []
    for j in rng.permutation(len(idx.pool)):
        if used[j]:
            continue
        days = idx.visit_days[j]
        k = bisect.bisect_left(days, day)
        near = [d for d in days[max(k - 1, 0) : k + 1] if abs(d - day) <= spec.random_window_days]
        if not near:
            continue
        when = date.fromordinal(min(near, key=lambda d: (abs(d - day), d)))
        if not _has_window_history(idx, int(j), when, spec):
            continue
        picks.append((int(j), when))
        if len(picks) == spec.control_ratio:
            break
    return picks


@dataclass
class CohortDataset:
    spec: CohortSpec
    examples: list[CohortExample]
    report: MatchReport = field(default_factory=MatchReport)

    def split(self, name: str) -> list[CohortExample]:
        return [e for e in self.examples if e.split == name]

    @property
    def n_positive(self) -> int:
        return sum(e.label for e in self.examples)

    def positive_rate(self, split: str | None = None) -> float:
        rows = self.examples if split is None else self.split(split)
        return sum(e.label for e in rows) / len(rows) if rows else 0.0


def _split_counts(n_pos: int, n_neg: int) -> dict[str, tuple[int, int]]:
    """(positives, negatives) per split.

    Valid and test take about 10% of the positives each; their negatives follow the
    cohort-wide negative:positive ratio, which keeps every split's positive rate close
    to the overall rate even when the held-out splits hold only a handful of cases.
    """
    ratio = n_neg / n_pos
    out = {}
    for name, frac in zip(SPLITS[1:], SPLIT_FRACTIONS[1:]):
        pos = max(1, round(n_pos * frac))
        out[name] = (pos, round(pos * ratio))
    held_pos = sum(p for p, _ in out.values())
    held_neg = sum(n for _, n in out.values())
    out[SPLITS[0]] = (n_pos - held_pos, n_neg - held_neg)
    return out


def assemble(cases: Sequence[CohortExample], controls: Sequence[CohortExample], spec: CohortSpec,
             seed: int = 0, report: MatchReport | None = None) -> CohortDataset:
    """Stratified 80/10/10 split; examples come out ordered by patient id."""
    if len(cases) < MIN_POSITIVES:
        raise CohortError(f"only {len(cases)} positives; at least {MIN_POSITIVES} are needed to stratify")
    if not controls:
        raise CohortError("no controls were matched")
    ids = [e.patient_id for e in (*cases, *controls)]
    if len(set(ids)) != len(ids):
        raise CohortError("a patient appears in more than one example")
    counts = _split_counts(len(cases), len(controls))
    rng = np.random.default_rng(seed)
    out = []
    for k, group in enumerate((cases, controls)):
        group = sorted(group, key=lambda e: e.patient_id)
        names = [name for name in SPLITS for _ in range(counts[name][k])]
        for name, i in zip(names, rng.permutation(len(group))):
            out.append(replace(group[i], split=name))
    out.sort(key=lambda e: e.patient_id)
    return CohortDataset(spec, out, report or MatchReport())


def build_cohort(patients: Iterable[PatientRecord], spec: CohortSpec, seed: int = 0) -> CohortDataset:
    records = {r.patient_id: r for r in patients}
    cases = select_cases(records.values(), spec)
    case_ids = {c.patient_id for c in cases}
    pool = [r for r in candidate_pool(records.values()) if r.patient_id not in case_ids]
    controls, report = match_controls(cases, pool, records, spec, seed)
    return assemble(cases, controls, spec, seed, report)


# ---------------------------------------------------------------------------
# cohort.jsonl rows: {patient_id, index_date, label, split}


def write_cohort(dataset: CohortDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in dataset.examples:
            row = {"patient_id": e.patient_id, "index_date": e.index_date.isoformat(),
                   "label": e.label, "split": e.split}
            fh.write(json.dumps(row) + "\n")


def read_cohort(path: str | Path, records: dict[str, PatientRecord] | None = None,
                spec: CohortSpec | None = None) -> list[CohortExample]:
    """Rows as examples; histories are rebuilt when ``records`` and ``spec`` are given."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                when = date.fromisoformat(row["index_date"])
                history: tuple[Visit, ...] = ()
                if records is not None and spec is not None:
                    history = history_for(records[row["patient_id"]], when, spec)
                out.append(CohortExample(row["patient_id"], when, int(row["label"]), history, row.get("split")))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise CohortError(f"{path}: line {lineno}: {exc}") from exc
    return out


def leakage_violations(dataset: CohortDataset) -> list[str]:
    """Examples with a visible visit later than index - exclusion (should be empty)."""
    bad = []
    for e in dataset.examples:
        _, end = dataset.spec.window(e.index_date)
        if any(v.date > end for v in e.history):
            bad.append(e.patient_id)
    return bad

