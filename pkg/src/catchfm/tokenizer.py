"""Patient record -> token sequence with per-token visit positions.

A sequence is ``[age, gender, codes(v1), gap(v1,v2), codes(v2), ..., codes(vn), EOS]``.
Demographic tokens sit at position 0, every token of visit i (and the gap token
that follows it) at position i, and EOS shares the last visit's position.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from catchfm.ehr import PatientRecord, Visit, Vocabulary

DEFAULT_MAX_LEN = 2048
SHARD_MAGIC = b"CFM1"


class TokenizeError(ValueError):
    pass


class ShardError(ValueError):
    pass


def _band_edges(bands: Sequence[int], step: int) -> tuple[int, ...]:
    edges = []
    for lo, hi in zip(bands, bands[1:]):
        edges.extend(range(lo, hi, step))
    edges.append(bands[-1])
    return tuple(edges)


DEFAULT_AGE_BANDS = (0, 18, 35, 50, 70, 120)
# same day, 1-7d, 8-30d, 31-90d, 91-365d, >365d
DEFAULT_TIME_EDGES = (0, 1, 8, 31, 91, 366)


@dataclass(frozen=True)
class BucketTables:
    """Left-closed bucket edges; the last bucket is open-ended so [0, inf) is covered."""

    age_edges: tuple[int, ...] = field(default_factory=lambda: _band_edges(DEFAULT_AGE_BANDS, 5))
    time_edges: tuple[int, ...] = DEFAULT_TIME_EDGES

    def __post_init__(self):
        for name in ("age_edges", "time_edges"):
            edges = tuple(getattr(self, name))
            if not edges or edges[0] != 0:
                raise ValueError(f"{name} must start at 0")
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, edges)

    @staticmethod
    def _labels(prefix: str, edges: tuple[int, ...]) -> list[str]:
        out = [f"{prefix}:{lo}-{hi - 1}" for lo, hi in zip(edges, edges[1:])]
        out.append(f"{prefix}:{edges[-1]}+")
        return out

    def age_tokens(self) -> list[str]:
        return self._labels("AGE", self.age_edges)

    def time_tokens(self) -> list[str]:
        return self._labels("GAP", self.time_edges)

    def age_bucket(self, age: int) -> int:
        if age < 0:
            raise TokenizeError(f"negative age {age}")
        return bisect_right(self.age_edges, age) - 1

    def time_bucket(self, days: int) -> int:
        if days < 0:
            raise TokenizeError(f"negative gap {days}")
        return bisect_right(self.time_edges, days) - 1

    def age_token(self, age: int) -> str:
        return self.age_tokens()[self.age_bucket(age)]

    def time_token(self, days: int) -> str:
        return self.time_tokens()[self.time_bucket(days)]


@dataclass
class TokenSequence:
    ids: np.ndarray
    visit_positions: np.ndarray
    source: str = ""
    label: int | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.visit_positions = np.asarray(self.visit_positions, dtype=np.int64)
        if self.ids.shape != self.visit_positions.shape or self.ids.ndim != 1:
            raise TokenizeError("ids and visit_positions must be 1-D and equally long")

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.visit_positions, other.visit_positions)
            and self.label == other.label
        )


class Tokenizer:
    def __init__(self, vocab: Vocabulary, buckets: BucketTables | None = None):
        self.vocab = vocab
        self.buckets = buckets or BucketTables()
        self._age_ids = [vocab.id_of(t) for t in self.buckets.age_tokens()]
        self._time_ids = [vocab.id_of(t) for t in self.buckets.time_tokens()]
        self._gender_ids = {g: vocab.id_of(f"GENDER:{g}") for g in ("male", "female")}
        self._code_ids: dict[str, int] = {}

    def _code_id(self, token: str) -> int:
        tid = self._code_ids.get(token)
        if tid is None:
            tid = self.vocab.get(token, self.vocab.unk)
            self._code_ids[token] = tid
        return tid

    def encode(
        self,
        record: PatientRecord,
        visits: Sequence[Visit] | None = None,
        at_date: date | None = None,
        max_len: int | None = DEFAULT_MAX_LEN,
        label: int | None = None,
    ) -> TokenSequence:
        """Encode ``visits`` (default: all of the record's visits).

        ``at_date`` fixes the age token and defaults to the last visit date.
        With ``max_len`` set, the oldest event/time tokens are dropped so that the
        demographics and EOS always survive; positions are renumbered from 1.
        """
        visits = record.visits if visits is None else visits
        if not visits:
            raise TokenizeError(f"patient {record.patient_id}: no visits to encode")
        at_date = at_date or visits[-1].date
        if at_date < visits[0].date:
            raise TokenizeError(f"patient {record.patient_id}: at_date {at_date} precedes first visit")
        if at_date < visits[-1].date:
            raise TokenizeError(f"patient {record.patient_id}: at_date {at_date} precedes last visit")

        body: list[int] = []
        pos: list[int] = []
        for i, visit in enumerate(visits, start=1):
            for code in visit.codes:
                body.append(self._code_id(code.token))
                pos.append(i)
            if i < len(visits):
                gap = (visits[i].date - visit.date).days
                body.append(self._time_ids[self.buckets.time_bucket(gap)])
                pos.append(i)
        last_pos = len(visits)

        if max_len is not None:
            if max_len < 4:
                raise TokenizeError("max_len must leave room for demographics, one event and EOS")
            keep = max_len - 3
            if len(body) > keep:
                body = body[-keep:]
                shift = pos[-keep] - 1
                pos = [p - shift for p in pos[-keep:]]
                last_pos -= shift

        age_id = self._age_ids[self.buckets.age_bucket(record.age_at(at_date))]
        ids = [age_id, self._gender_ids[record.gender], *body, self.vocab.eos]
        positions = [0, 0, *pos, last_pos]
        return TokenSequence(np.array(ids), np.array(positions), record.patient_id, label)


def chunk_for_pretraining(seq: TokenSequence, max_len: int) -> list[TokenSequence]:
    """Split into consecutive non-overlapping chunks of at most ``max_len`` tokens."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    return [
        TokenSequence(seq.ids[i : i + max_len], seq.visit_positions[i : i + max_len], seq.source, seq.label)
        for i in range(0, len(seq), max_len)
    ]


# ---------------------------------------------------------------------------
# Shards: "CFM1", u32 count, then per sequence u32 length, u32 label+1,
# length x u32 ids, length x u32 positions. Little-endian throughout.


def write_shard(sequences: Iterable[TokenSequence], path: str | Path) -> int:
    sequences = list(sequences)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", len(sequences)))
        for seq in sequences:
            label = 0 if seq.label is None else int(seq.label) + 1
            fh.write(struct.pack("<II", len(seq), label))
            fh.write(seq.ids.astype("<u4").tobytes())
            fh.write(seq.visit_positions.astype("<u4").tobytes())
    tmp.replace(path)
    return len(sequences)


def read_shard(path: str | Path) -> list[TokenSequence]:
    data = Path(path).read_bytes()
    if data[:4] != SHARD_MAGIC:
        raise ShardError(f"{path}: bad magic at offset 0")
    if len(data) < 8:
        raise ShardError(f"{path}: truncated header at offset 4")
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    out = []
    for _ in range(count):
        if offset + 8 > len(data):
            raise ShardError(f"{path}: truncated sequence header at offset {offset}")
        length, label = struct.unpack_from("<II", data, offset)
        end = offset + 8 + 8 * length
        if end > len(data):
            raise ShardError(f"{path}: length field at offset {offset} overruns file ({length} tokens)")
        ids = np.frombuffer(data, dtype="<u4", count=length, offset=offset + 8).astype(np.int64)
        positions = np.frombuffer(data, dtype="<u4", count=length, offset=offset + 8 + 4 * length).astype(np.int64)
        out.append(TokenSequence(ids, positions, "", None if label == 0 else label - 1))
        offset = end
    if offset != len(data):
        raise ShardError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return out
