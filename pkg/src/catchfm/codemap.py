"""Cross-ontology code mapping: exact tables first, then nearest-neighbour soft matches
over description embeddings accepted only above a strict cosine threshold.

Codes are addressed as ``system:value`` strings on both sides.
"""

from __future__ import annotations

import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

DEFAULT_THRESHOLD = 0.98
EMB_MAGIC = b"CFME"


class CodeMapError(ValueError):
    pass


@dataclass(frozen=True)
class MappingTable:
    exact: dict[str, str] = field(default_factory=dict)
    origin: dict[str, str] = field(default_factory=dict)  # source code -> table name

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, str]]) -> "MappingTable":
        exact: dict[str, str] = {}
        origin: dict[str, str] = {}
        for source, target, table in rows:
            if source in exact and exact[source] != target:
                raise CodeMapError(f"{source} maps to both {exact[source]} and {target}")
            exact[source] = target
            origin.setdefault(source, table)
        return cls(exact, origin)

    @classmethod
    def read_tsv(cls, path: str | Path) -> "MappingTable":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise CodeMapError(f"{path}: line {lineno}: expected source, target, table")
                rows.append(tuple(parts))
        return cls.from_rows(rows)

    def write_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for source, target in self.exact.items():
                fh.write(f"{source}\t{target}\t{self.origin.get(source, '')}\n")


class EmbeddingIndex:
    """Unit-normalized vectors keyed by code."""

    def __init__(self, codes: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(codes):
            raise CodeMapError("need one vector per code")
        if len(set(codes)) != len(codes):
            raise CodeMapError("duplicate codes in embedding index")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise CodeMapError("zero-length embedding vector")
        self.codes = list(codes)
        self.vectors = vectors / norms
        self._row = {c: i for i, c in enumerate(self.codes)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self._row

    def vector(self, code: str) -> np.ndarray:
        return self.vectors[self._row[code]]

    @classmethod
    def empty(cls, dim: int = 1) -> "EmbeddingIndex":
        return cls([], np.zeros((0, dim)))

    def write(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(EMB_MAGIC)
            fh.write(struct.pack("<II", len(self.codes), self.dim))
            for code, vec in zip(self.codes, self.vectors):
                raw = code.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(vec.astype("<f4").tobytes())

    @classmethod
    def read(cls, path: str | Path) -> "EmbeddingIndex":
        data = Path(path).read_bytes()
        if data[:4] != EMB_MAGIC:
            raise CodeMapError(f"{path}: bad magic")
        count, dim = struct.unpack_from("<II", data, 4)
        offset = 12
        codes, rows = [], []
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", data, offset)
                offset += 2
                codes.append(data[offset : offset + n].decode("utf-8"))
                offset += n
                rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=offset))
                offset += 4 * dim
        except (struct.error, ValueError) as exc:
            raise CodeMapError(f"{path}: truncated at offset {offset}") from exc
        if offset != len(data):
            raise CodeMapError(f"{path}: {len(data) - offset} trailing bytes")
        return cls(codes, np.array(rows, dtype=np.float64).reshape(count, dim))


@dataclass(frozen=True)
class MapResult:
    kind: str  # exact | soft | unmapped
    target: str | None = None
    similarity: float | None = None


UNMAPPED = MapResult("unmapped")


def map_code(source: str, table: MappingTable, sources: EmbeddingIndex, targets: EmbeddingIndex,
             threshold: float = DEFAULT_THRESHOLD) -> MapResult:
    """Exact entry if any; otherwise the most similar target when similarity >= threshold."""
    if source in table.exact:
        return MapResult("exact", table.exact[source])
    if source not in sources or len(targets) == 0:
        return UNMAPPED
    if sources.dim != targets.dim:
        raise CodeMapError(f"embedding dimensions differ: {sources.dim} vs {targets.dim}")
    sims = targets.vectors @ sources.vector(source)
    best = float(sims.max())
    if best < threshold:
        return UNMAPPED
    tied = np.nonzero(sims >= best - 1e-12)[0]
    target = min(targets.codes[i] for i in tied)
    return MapResult("soft", target, min(best, 1.0))


@dataclass
class CoverageReport:
    """Distinct-code and occurrence counts per source system."""

    codes: dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))
    occurrences: dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))

    def to_dict(self) -> dict:
        out = {}
        for system in sorted(self.codes):
            c = self.codes[system]
            total = sum(c.values())
            out[system] = {
                "codes": total,
                "exact": c["exact"],
                "soft": c["soft"],
                "unmapped": c["unmapped"],
                "exact_pct": 100.0 * c["exact"] / total if total else 0.0,
                "coverage_pct": 100.0 * (c["exact"] + c["soft"]) / total if total else 0.0,
                "occurrences": dict(self.occurrences[system]),
            }
        return out

    def coverage(self, system: str | None = None) -> float:
        counters = [self.codes[system]] if system else list(self.codes.values())
        total = sum(sum(c.values()) for c in counters)
        hit = sum(c["exact"] + c["soft"] for c in counters)
        return hit / total if total else 0.0


def _split(code: str) -> tuple[str, str]:
    system, sep, value = code.partition(":")
    if not sep:
        raise CodeMapError(f"code {code!r} is not of the form system:value")
    return system, value


def map_corpus(records: Iterable[dict], table: MappingTable, sources: EmbeddingIndex,
               targets: EmbeddingIndex, threshold: float = DEFAULT_THRESHOLD) -> tuple[list[dict], CoverageReport]:
    """Rewrite every code of raw patient dicts; unmapped codes are dropped, and so are
    visits left without codes. Each distinct code is resolved once."""
    cache: dict[str, MapResult] = {}
    report = CoverageReport()
    out = []
    for rec in records:
        visits = []
        for visit in rec.get("visits", []):
            codes = []
            for c in visit["codes"]:
                key = f"{c['system']}:{c['value']}"
                res = cache.get(key)
                if res is None:
                    res = cache[key] = map_code(key, table, sources, targets, threshold)
                    report.codes[c["system"]][res.kind] += 1
                report.occurrences[c["system"]][res.kind] += 1
                if res.target is not None:
                    system, value = _split(res.target)
                    codes.append({"system": system, "value": value})
            if codes:
                visits.append({**visit, "codes": codes})
        out.append({**rec, "visits": visits})
    return out, report


def iter_raw_records(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CodeMapError(f"{path}: line {lineno}: {exc}") from exc
