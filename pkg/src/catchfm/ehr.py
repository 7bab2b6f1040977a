"""Patient records, medical codes, vocabularies and the patients.jsonl format."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

if TYPE_CHECKING:
    from catchfm.tokenizer import BucketTables

logger = logging.getLogger(__name__)

# Order in which systems appear inside a visit: diagnoses, procedures, drugs, orders.
SYSTEMS = ("ICD9-Diag", "ICD9-Proc", "DrugCode", "OrderCode")
_SYSTEM_RANK = {s: i for i, s in enumerate(SYSTEMS)}
VISIT_KINDS = ("outpatient", "inpatient", "pharmacy")
_KIND_RANK = {k: i for i, k in enumerate(VISIT_KINDS)}
GENDERS = ("male", "female")

_ICD9_DIAG = re.compile(r"^\d{3}(\.\d{1,2})?$")

NEOPLASM_RANGE = (140, 239)


class RecordError(ValueError):
    """A patient record or patients.jsonl line violates the schema."""


def normalize_value(value: str) -> str:
    return "".join(value.split()).upper()


@dataclass(frozen=True, slots=True)
class MedicalCode:
    system: str
    value: str
    description: str | None = None

    def __post_init__(self):
        if self.system not in _SYSTEM_RANK:
            raise RecordError(f"unknown code system {self.system!r}")
        value = normalize_value(self.value)
        if not value:
            raise RecordError("empty code value")
        if self.system == "ICD9-Diag" and not _ICD9_DIAG.match(value):
            raise RecordError(f"malformed ICD9 diagnosis code {self.value!r}")
        object.__setattr__(self, "value", value)

    @property
    def key(self) -> tuple[str, str]:
        return (self.system, self.value)

    @property
    def token(self) -> str:
        return f"{self.system}:{self.value}"

    @property
    def category(self) -> str | None:
        """Three-digit ICD-9 category, or None for non-diagnosis systems."""
        if self.system != "ICD9-Diag":
            return None
        return self.value[:3]

    @classmethod
    def parse(cls, token: str) -> "MedicalCode":
        system, _, value = token.partition(":")
        return cls(system, value)


def is_cancer_code(code: MedicalCode) -> bool:
    """True for ICD-9 diagnoses in the neoplasm chapter (140-239)."""
    cat = code.category
    return cat is not None and NEOPLASM_RANGE[0] <= int(cat) <= NEOPLASM_RANGE[1]


def _sort_codes(codes: Iterable[MedicalCode]) -> tuple[MedicalCode, ...]:
    return tuple(sorted(codes, key=lambda c: (_SYSTEM_RANK[c.system], c.value)))


@dataclass(frozen=True, slots=True)
class Visit:
    date: date
    kind: str
    codes: tuple[MedicalCode, ...]

    def __post_init__(self):
        if self.kind not in _KIND_RANK:
            raise RecordError(f"unknown visit kind {self.kind!r}")
        if not self.codes:
            raise RecordError(f"visit on {self.date} has no codes")
        object.__setattr__(self, "codes", _sort_codes(self.codes))


@dataclass(frozen=True, slots=True)
class PatientRecord:
    patient_id: str
    birth_year: int
    gender: str
    visits: tuple[Visit, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise RecordError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        visits = tuple(self.visits)
        order = sorted(range(len(visits)), key=lambda i: (visits[i].date, _KIND_RANK[visits[i].kind], i))
        if order != list(range(len(visits))):
            visits = tuple(visits[i] for i in order)
        object.__setattr__(self, "visits", visits)
        if visits and visits[0].date < date(self.birth_year, 1, 1):
            raise RecordError(f"patient {self.patient_id}: visit before birth year")

    def age_at(self, when: date) -> int:
        return when.year - self.birth_year

    @property
    def first_date(self) -> date | None:
        return self.visits[0].date if self.visits else None

    @property
    def last_date(self) -> date | None:
        return self.visits[-1].date if self.visits else None

    def iter_codes(self) -> Iterator[MedicalCode]:
        for visit in self.visits:
            yield from visit.codes


# ---------------------------------------------------------------------------
# patients.jsonl


@dataclass
class LoadStats:
    records: int = 0
    resorted: int = 0


class CodeCache:
    """Interns MedicalCode objects so large corpora share one instance per code."""

    def __init__(self):
        self._codes: dict[tuple, MedicalCode] = {}

    def get(self, system: str, value: str, description: str | None = None) -> MedicalCode:
        key = (system, value, description)
        code = self._codes.get(key)
        if code is None:
            code = MedicalCode(system, value, description)
            self._codes[key] = code
        return code


def record_from_dict(obj: dict, cache: CodeCache | None = None) -> tuple[PatientRecord, bool]:
    """Build a record from its JSON object. Returns (record, was_resorted)."""
    cache = cache or CodeCache()
    for key in ("patient_id", "birth_year", "gender", "visits"):
        if key not in obj:
            raise RecordError(f"missing field {key!r}")
    visits = []
    for v in obj["visits"]:
        codes = tuple(cache.get(c["system"], c["value"], c.get("description")) for c in v["codes"])
        visits.append(Visit(date.fromisoformat(v["date"]), v["kind"], codes))
    in_order = all(
        (a.date, _KIND_RANK[a.kind]) <= (b.date, _KIND_RANK[b.kind]) for a, b in zip(visits, visits[1:])
    )
    record = PatientRecord(str(obj["patient_id"]), int(obj["birth_year"]), obj["gender"], tuple(visits))
    return record, not in_order


def record_to_dict(record: PatientRecord) -> dict:
    visits = []
    for v in record.visits:
        codes = []
        for c in v.codes:
            entry = {"system": c.system, "value": c.value}
            if c.description is not None:
                entry["description"] = c.description
            codes.append(entry)
        visits.append({"date": v.date.isoformat(), "kind": v.kind, "codes": codes})
    return {
        "patient_id": record.patient_id,
        "birth_year": record.birth_year,
        "gender": record.gender,
        "visits": visits,
    }


def load_patients(path: str | Path, stats: LoadStats | None = None) -> Iterator[PatientRecord]:
    """Stream records from a patients.jsonl file in file order.

    Visits that arrive out of order are re-sorted and counted in ``stats.resorted``.
    Any schema problem raises RecordError naming the 1-based line number.
    """
    stats = stats if stats is not None else LoadStats()
    cache = CodeCache()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record, resorted = record_from_dict(json.loads(line), cache)
            except (json.JSONDecodeError, RecordError, KeyError, TypeError, ValueError) as exc:
                raise RecordError(f"line {lineno}: {exc}") from exc
            stats.records += 1
            if resorted:
                stats.resorted += 1
                logger.warning("line %d: visits re-sorted by date", lineno)
            yield record


def dumps_record(record: PatientRecord) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"), ensure_ascii=False)


def write_patients(records: Iterable[PatientRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps_record(record))
            fh.write("\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Vocabulary

SPECIALS = ("[EOS]", "[PAD]", "[UNK]")


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-id space: specials, age buckets, genders, time buckets, then codes."""

    tokens: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.kinds):
            raise ValueError("tokens and kinds differ in length")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index[token]

    def get(self, token: str, default: int | None = None) -> int | None:
        return self._index.get(token, default)

    def lookup(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def eos(self) -> int:
        return self._index["[EOS]"]

    @property
    def pad(self) -> int:
        return self._index["[PAD]"]

    @property
    def unk(self) -> int:
        return self._index["[UNK]"]

    def ids_of_kind(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    def write_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, kind) in enumerate(zip(self.tokens, self.kinds)):
                fh.write(f"{i}\t{kind}\t{tok}\n")

    @classmethod
    def read_tsv(cls, path: str | Path) -> "Vocabulary":
        tokens, kinds = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3 or int(parts[0]) != len(tokens):
                    raise ValueError(f"{path}: bad vocabulary line {lineno}")
                kinds.append(parts[1])
                tokens.append(parts[2])
        return cls(tuple(tokens), tuple(kinds))


def build_vocabulary(patients: Iterable[PatientRecord], buckets: "BucketTables") -> Vocabulary:
    """Assign ids: specials, age buckets, genders, time buckets, then codes by first sighting."""
    tokens: list[str] = list(SPECIALS)
    kinds: list[str] = ["special"] * len(SPECIALS)
    for tok in buckets.age_tokens():
        tokens.append(tok)
        kinds.append("age-bucket")
    for g in GENDERS:
        tokens.append(f"GENDER:{g}")
        kinds.append("gender")
    for tok in buckets.time_tokens():
        tokens.append(tok)
        kinds.append("time-bucket")
    seen: set[str] = set()
    for record in patients:
        for code in record.iter_codes():
            tok = code.token
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
                kinds.append("code")
    return Vocabulary(tuple(tokens), tuple(kinds))
