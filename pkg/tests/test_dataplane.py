import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uclsketch.core import SketchConfig
from uclsketch.dataplane import COLD, HOT, DataPlane, KeyReport, Snapshot, counter_scale, read_reports, write_reports
from uclsketch.sensing import SketchOperator
from uclsketch.streamgen import ZipfSpec, exact_counts, generate_arrays

A, B, C = b"AAAA", b"BBBB", b"CCCC"


def one_slot(**kw):
    return DataPlane(SketchConfig(depth=2, width=4, hf_slots=1, bf_bits=1024, bf_hashes=3, **kw), seed=5)


def test_case1_install():
    dp = one_slot()
    assert dp.update((A, 3)) == []
    assert dp.hf_slot(0) == (A, 3, 0)
    assert dp.counters.sum() == 0


def test_case3_then_case2():
    dp = one_slot()
    dp.update((A, 3))
    reps = dp.update((B, 1))
    assert dp.hf_slot(0) == (A, 3, 1)
    assert [(r.key, r.flag) for r in reps] == [(B, COLD)]
    assert dp.counters.sum(axis=1).tolist() == [1, 1]
    assert dp.bf_contains(B)

    reps = dp.update((C, 5))
    assert [(r.key, r.flag) for r in reps] == [(A, HOT)]
    assert dp.hf_slot(0) == (C, 5, 0)
    assert dp.counters.sum(axis=1).tolist() == [4, 4]
    assert dp.hf_query(A) == 0
    assert dp.hf_query(C) == 5


def test_tie_evicts():
    dp = one_slot()
    dp.update((A, 2))
    dp.update((B, 2))
    assert dp.hf_slot(0)[0] == B


def test_cold_report_once():
    dp = one_slot()
    dp.update((A, 10))
    assert len(dp.update((B, 1))) == 1
    assert dp.update((B, 1)) == []


def test_listing_rule_differs():
    dp = one_slot(eviction_rule="listing")
    dp.update((A, 3))
    dp.update((B, 1))
    assert dp.hf_slot(0)[0] == B


def test_hf_query_absent():
    assert one_slot().hf_query(A) == 0


def test_sketch_insert_conservation():
    dp = DataPlane(SketchConfig(depth=2, width=4, hf_slots=1, bf_bits=64, bf_hashes=1), seed=1)
    dp.sketch_insert(A, 3)
    assert sorted(dp.counters.ravel().tolist()) == [0] * 6 + [3, 3]
    assert dp.counters.sum(axis=1).tolist() == [3, 3]


def test_forced_collision():
    dp = DataPlane(SketchConfig(depth=2, width=2, hf_slots=1, bf_bits=64, bf_hashes=1), seed=1)
    other = next(k for k in (i.to_bytes(4, "big") for i in range(1, 100)) if dp.columns(k) == dp.columns(A))
    dp.sketch_insert(A, 2)
    dp.sketch_insert(other, 5)
    assert sorted(dp.counters.ravel().tolist()) == [0, 0, 7, 7]


def test_random_inserts_row_sums():
    dp = DataPlane(SketchConfig(depth=4, width=64, hf_slots=8, bf_bits=1024, bf_hashes=2), seed=3)
    rng = np.random.default_rng(0)
    total = 0
    for _ in range(1000):
        v = int(rng.integers(1, 10))
        dp.sketch_insert(rng.bytes(4), v)
        total += v
    assert (dp.counters.sum(axis=1) == total).all()


def test_snapshot_timing():
    cfg = SketchConfig(depth=2, width=16, hf_slots=4, bf_bits=1024, bf_hashes=2, sampling_interval=1000)
    dp = DataPlane(cfg, seed=1)
    keys = np.random.default_rng(1).integers(0, 256, size=(1000, 4), dtype=np.uint8)
    dp.ingest(keys[:999])
    assert dp.snapshots == [] and dp.maybe_snapshot() is None
    dp.ingest(keys[999:])
    assert len(dp.snapshots) == 1 and dp.snapshots[0].seq == 1
    snap = dp.snapshots[0]
    with pytest.raises(ValueError):
        snap.y_raw[0] = 1
    dp.ingest(keys[:10])
    assert snap.insert_count == 1000


def test_scale_min_of_row_max():
    assert counter_scale(np.array([[1, 5, 2], [9, 0, 3]])) == 5


def test_bloom_semantics():
    dp = one_slot()
    assert not dp.bf_contains(b"zzzz")
    dp.bf_insert(b"zzzz")
    assert dp.bf_contains(b"zzzz")


@pytest.mark.parametrize("m_b,k_b,K", [(4096, 3, 500), (8192, 4, 1500), (2048, 2, 1000)])
def test_bloom_fp_bound(m_b, k_b, K):
    dp = DataPlane(SketchConfig(depth=1, width=2, hf_slots=1, bf_bits=m_b, bf_hashes=k_b), seed=11)
    rng = np.random.default_rng(m_b)
    universe = rng.choice(2**32, size=K + 10_000, replace=False).astype(">u4")
    for k in universe[:K]:
        dp.bf_insert(k.tobytes())
    fp = np.mean([dp.bf_contains(k.tobytes()) for k in universe[K:]])
    bound = 1 - math.exp(-k_b * K / m_b)
    sigma = math.sqrt(bound * (1 - bound) / 10_000)
    assert fp <= bound + 3 * sigma


def shadow_check(cfg, keys, values, seed):
    """Replay the stream; every snapshot must equal A applied to sketch-resident volumes."""
    dp = DataPlane(cfg, seed)
    dp.ingest(keys, values)
    truth = exact_counts(keys, values)
    resident = dp.hf_residents()
    residual = {k: v - resident.get(k, 0) for k, v in truth.items()}
    assert all(v >= 0 for v in residual.values())
    ks = [k for k, v in residual.items() if v > 0]
    op = SketchOperator.from_keys(ks, cfg.depth, cfg.width, seed, cfg.key_len)
    x = np.array([residual[k] for k in ks], dtype=np.int64)
    y = op.apply(x) if ks else np.zeros(cfg.depth * cfg.width, dtype=np.int64)
    assert np.array_equal(y.astype(np.int64), dp.snapshot().y_raw)
    return dp


@given(st.integers(1, 3000), st.integers(0, 2**31), st.sampled_from([1, 2, 3]))
@settings(max_examples=25, deadline=None)
def test_exact_decomposition(length, seed, vmax):
    keys, _ = generate_arrays(ZipfSpec(1.1, 400, length, seed=seed))
    values = np.random.default_rng(seed).integers(1, vmax + 1, size=length)
    cfg = SketchConfig(depth=3, width=32, hf_slots=16, bf_bits=4096, bf_hashes=3, sampling_interval=100)
    dp = shadow_check(cfg, keys, values, seed)
    occ = dp.hf_occ
    assert (dp.hf_new[occ] > dp.hf_old[occ]).all()
    assert (dp.hf_new[~occ] == 0).all() and (dp.hf_old[~occ] == 0).all()


def test_hash_budget():
    cfg = SketchConfig(depth=4, width=64, hf_slots=8, bf_bits=4096, bf_hashes=5)
    dp = DataPlane(cfg, seed=2)
    keys, vals = generate_arrays(ZipfSpec(1.0, 1000, 20_000, seed=3))
    dp.ingest(keys, vals)
    assert 0 < dp.max_hash_calls <= 1 + cfg.depth + cfg.bf_hashes
    assert sum(dp.case_counts) == 20_000


@given(st.integers(1, 6), st.integers(2, 40), st.integers(0, 2**40), st.integers(0, 2**40),
       st.booleans(), st.data())
@settings(max_examples=60, deadline=None)
def test_snapshot_roundtrip_fuzz(d, w, seq, count, signed, data):
    lo = -(2**31) if signed else 0
    hi = 2**31 - 1 if signed else 2**32 - 1
    y = np.array(data.draw(st.lists(st.integers(lo, hi), min_size=d * w, max_size=d * w)), dtype=np.int64)
    snap = Snapshot(y, count, seq, counter_scale(y.reshape(d, w)), d, w, signed)
    buf = snap.to_bytes()
    back = Snapshot.from_bytes(buf)
    assert back == snap and back.to_bytes() == buf


def test_snapshot_header_layout(tmp_path):
    snap = Snapshot(np.arange(6, dtype=np.int64), 1000, 1, 2, 2, 3, False)
    buf = snap.to_bytes()
    assert buf[:4] == b"UCLS" and len(buf) == 4 + 2 + 2 + 4 + 8 * 3 + 6 * 4
    snap.save(tmp_path / "s.ucls")
    assert Snapshot.load(tmp_path / "s.ucls") == snap


@pytest.mark.parametrize("mutate", [lambda b: b[:-1], lambda b: b"XXXX" + b[4:]])
def test_snapshot_corrupt(mutate):
    buf = Snapshot(np.arange(6, dtype=np.int64), 1000, 1, 2, 2, 3, False).to_bytes()
    with pytest.raises(ValueError):
        Snapshot.from_bytes(mutate(buf))


@given(st.lists(st.tuples(st.binary(min_size=1, max_size=16), st.sampled_from([COLD, HOT]),
                          st.integers(0, 2**64 - 1)), max_size=30))
def test_report_stream_roundtrip(items):
    reps = [KeyReport(k, f, s) for k, f, s in items]
    buf = io.BytesIO()
    write_reports(buf, reps)
    buf.seek(0)
    assert read_reports(buf) == reps
