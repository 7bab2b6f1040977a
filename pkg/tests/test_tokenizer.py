import struct
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catchfm.ehr import build_vocabulary
from catchfm.tokenizer import (
    BucketTables, ShardError, TokenizeError, TokenSequence, Tokenizer, chunk_for_pretraining, read_shard,
    write_shard,
)

from conftest import patient, visit


def _tok(records):
    return Tokenizer(build_vocabulary(records, BucketTables()))


def test_worked_example_positions():
    rec = patient("A", visit("2010-01-01", "ICD9-Diag:401.9", "DrugCode:RX1"), visit("2010-01-11", "ICD9-Diag:250.00"))
    tok = _tok([rec])
    seq = tok.encode(rec)
    v = tok.vocab
    assert [v.lookup(i) for i in seq.ids] == [
        "AGE:50-54", "GENDER:female", "ICD9-Diag:401.9", "DrugCode:RX1", "GAP:8-30", "ICD9-Diag:250.00", "[EOS]",
    ]
    assert seq.visit_positions.tolist() == [0, 0, 1, 1, 1, 2, 2]


def test_permuting_codes_inside_a_visit_changes_nothing():
    a = patient("A", visit("2010-01-01", "ICD9-Diag:401.9", "DrugCode:RX1", "ICD9-Proc:88.1"))
    b = patient("A", visit("2010-01-01", "ICD9-Proc:88.1", "DrugCode:RX1", "ICD9-Diag:401.9"))
    tok = _tok([a])
    assert tok.encode(a) == tok.encode(b)


@pytest.mark.parametrize("days,bucket", [(0, "GAP:0-0"), (1, "GAP:1-7"), (7, "GAP:1-7"), (8, "GAP:8-30"),
                                         (90, "GAP:31-90"), (365, "GAP:91-365"), (366, "GAP:366+")])
def test_time_buckets(days, bucket):
    assert BucketTables().time_token(days) == bucket


def test_age_buckets_are_five_year_inside_coarse_bands():
    b = BucketTables()
    assert b.age_token(17) == "AGE:15-17"
    assert b.age_token(18) == "AGE:18-22"
    assert b.age_token(200) == "AGE:120+"
    for edge in (18, 35, 50, 70, 120):
        assert edge in b.age_edges


def test_unknown_codes_become_unk():
    known = patient("A", visit("2010-01-01", "ICD9-Diag:401.9"))
    other = patient("B", visit("2010-01-01", "ICD9-Diag:999.9"))
    tok = _tok([known])
    assert tok.vocab.unk in tok.encode(other).ids.tolist()


def test_empty_history_and_early_date_are_errors():
    rec = patient("A", visit("2010-01-01", "ICD9-Diag:401.9"))
    tok = _tok([rec])
    with pytest.raises(TokenizeError):
        tok.encode(rec, visits=())
    with pytest.raises(TokenizeError):
        tok.encode(rec, at_date=date(2009, 1, 1))


def _long_record(n_visits, codes_per_visit=2):
    start = date(2000, 1, 1)
    visits = [visit((start + timedelta(days=3 * i)).isoformat(), *[f"ICD9-Diag:{300 + (i + j) % 50}" for j in range(codes_per_visit)])
              for i in range(n_visits)]
    return patient("L", *visits, birth_year=1950)


def test_truncation_keeps_latest_tokens_and_frames():
    rec = _long_record(1700)  # 1700 * 2 codes + 1699 gaps = 5099 body tokens
    tok = _tok([rec])
    full = tok.encode(rec, max_len=None)
    cut = tok.encode(rec, max_len=2048)
    assert len(full) == 5099 + 3
    assert len(cut) == 2048
    assert cut.ids[:2].tolist() == full.ids[:2].tolist()
    assert cut.ids[-1] == tok.vocab.eos
    assert cut.ids[2:-1].tolist() == full.ids[-2046:-1].tolist()
    # renumbered so the first surviving visit is position 1
    assert cut.visit_positions[2] == 1
    assert np.all(np.diff(cut.visit_positions[2:]) >= 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 400), st.integers(1, 4)), min_size=1, max_size=12),
       st.integers(4, 40))
def test_position_invariants(gaps_and_sizes, max_len):
    day = date(2005, 1, 1)
    visits = []
    for i, (gap, n) in enumerate(gaps_and_sizes):
        day = day + timedelta(days=gap)
        visits.append(visit(day.isoformat(), *[f"ICD9-Diag:{300 + 7 * i + j}" for j in range(n)]))
    rec = patient("H", *visits)
    tok = _tok([rec])
    for limit in (None, max_len):
        seq = tok.encode(rec, max_len=limit)
        pos = seq.visit_positions
        assert len(seq) == len(pos) and (limit is None or len(seq) <= limit)
        assert pos[0] == pos[1] == 0 and seq.ids[-1] == tok.vocab.eos
        steps = np.diff(pos[1:])
        assert set(steps.tolist()) <= {0, 1}
    # untruncated: visit i's codes and its trailing gap token all sit at position i
    expected = [0, 0]
    for i, (_, n) in enumerate(gaps_and_sizes, start=1):
        expected += [i] * n + ([i] if i < len(gaps_and_sizes) else [])
    expected.append(len(gaps_and_sizes))
    assert tok.encode(rec, max_len=None).visit_positions.tolist() == expected


@pytest.mark.parametrize("n,expected", [(5000, [2048, 2048, 904]), (2048, [2048]), (0, [])])
def test_chunk_lengths(n, expected):
    seq = TokenSequence(np.arange(n), np.arange(n))
    chunks = chunk_for_pretraining(seq, 2048)
    assert [len(c) for c in chunks] == expected
    if n:
        assert np.array_equal(np.concatenate([c.ids for c in chunks]), seq.ids)


def test_shard_round_trip(tmp_path):
    seqs = [TokenSequence([1, 2, 3], [0, 0, 1], label=1), TokenSequence([4], [0]), TokenSequence([], [], label=0)]
    write_shard(seqs, tmp_path / "s.shard")
    assert read_shard(tmp_path / "s.shard") == seqs


def test_empty_shard_is_header_only(tmp_path):
    write_shard([], tmp_path / "e.shard")
    assert (tmp_path / "e.shard").read_bytes() == b"CFM1" + struct.pack("<I", 0)
    assert read_shard(tmp_path / "e.shard") == []


def test_corrupt_length_reports_offset(tmp_path):
    path = tmp_path / "s.shard"
    write_shard([TokenSequence([1, 2], [0, 0])], path)
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", 1000)
    path.write_bytes(bytes(data))
    with pytest.raises(ShardError, match="offset 8"):
        read_shard(path)


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(ShardError, match="offset 0"):
        read_shard(tmp_path / "x")
