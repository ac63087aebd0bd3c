"""Bounded-memory online structure: heavy filter, count-min array, Bloom filter.

The per-item update runs inside a numba kernel that walks a whole chunk of
items, so the hot path never touches Python objects. Reports and snapshots
are materialised by the Python wrapper between chunks.
"""

from __future__ import annotations

import gc
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, NamedTuple

import numba
import numpy as np

from .core import (NS_BLOOM, NS_HEAVY, NS_ROWS, NS_SIGNS, HashFamily, SketchConfig,
                   StreamItem, as_key_array, hash64)

COLD = 0
HOT = 1

SNAPSHOT_MAGIC = b"UCLS"
SNAPSHOT_VERSION = 1
SNAPSHOT_VERSION_SIGNED = 2
_SNAP_HEADER = struct.Struct("<4sHHIQQQ")


@contextmanager
def _gc_paused():
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


class KeyReport(NamedTuple):
    key: bytes
    flag: int
    seq: int

    @property
    def hot(self) -> bool:
        return self.flag == HOT


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Immutable copy of the sketch counters, flattened row-major."""

    y_raw: np.ndarray
    insert_count: int
    seq: int
    scale: int
    depth: int
    width: int
    signed: bool = False

    def __post_init__(self):
        self.y_raw.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (self.insert_count, self.seq, self.scale, self.depth, self.width, self.signed) == (
            other.insert_count, other.seq, other.scale, other.depth, other.width, other.signed
        ) and np.array_equal(self.y_raw, other.y_raw)

    @property
    def grid(self) -> np.ndarray:
        return self.y_raw.reshape(self.depth, self.width)

    def to_bytes(self) -> bytes:
        version = SNAPSHOT_VERSION_SIGNED if self.signed else SNAPSHOT_VERSION
        header = _SNAP_HEADER.pack(SNAPSHOT_MAGIC, version, self.depth, self.width,
                                   self.seq, self.insert_count, self.scale)
        body = self.y_raw.astype("<i4" if self.signed else "<u4").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Snapshot":
        if len(buf) < _SNAP_HEADER.size:
            raise ValueError("snapshot truncated in header")
        magic, version, d, w, seq, count, scale = _SNAP_HEADER.unpack_from(buf)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"bad snapshot magic {magic!r}")
        if version not in (SNAPSHOT_VERSION, SNAPSHOT_VERSION_SIGNED):
            raise ValueError(f"unsupported snapshot version {version}")
        signed = version == SNAPSHOT_VERSION_SIGNED
        need = _SNAP_HEADER.size + 4 * d * w
        if len(buf) != need:
            raise ValueError(f"snapshot body has {len(buf) - _SNAP_HEADER.size} bytes, expected {4 * d * w}")
        y = np.frombuffer(buf, dtype="<i4" if signed else "<u4", offset=_SNAP_HEADER.size).astype(np.int64)
        return cls(y, count, seq, scale, d, w, signed)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Snapshot":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def counter_scale(grid: np.ndarray) -> int:
    """min over rows of the row maximum (absolute value for signed counters)."""
    if grid.size == 0:
        return 0
    return int(np.abs(grid).max(axis=1).min())


def write_reports(f: BinaryIO, reports: Iterable[KeyReport]) -> None:
    for r in reports:
        f.write(struct.pack("<H", len(r.key)) + r.key + struct.pack("<BQ", r.flag, r.seq))


def read_reports(f: BinaryIO) -> list[KeyReport]:
    out = []
    while True:
        head = f.read(2)
        if not head:
            return out
        if len(head) < 2:
            raise ValueError(f"report {len(out)}: truncated length prefix")
        (n,) = struct.unpack("<H", head)
        body = f.read(n + 9)
        if len(body) < n + 9:
            raise ValueError(f"report {len(out)}: truncated record")
        flag, seq = struct.unpack("<BQ", body[n:])
        out.append(KeyReport(bytes(body[:n]), flag, seq))


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, inline="always")
def _bloom_positions(key, seeds, m, out):
    for i in range(seeds.shape[0]):
        out[i] = np.int64(hash64(key, seeds[i]) % np.uint64(m))


@numba.njit(cache=True)
def _sketch_add(counters, key, value, row_seeds, sign_seeds, signed):
    w = counters.shape[1]
    for j in range(counters.shape[0]):
        h = hash64(key, row_seeds[j])
        col = np.int64(h % np.uint64(w))
        if signed:
            # sign taken from an independent per-row seed
            if hash64(key, sign_seeds[j]) & np.uint64(1):
                counters[j, col] -= value
            else:
                counters[j, col] += value
        else:
            counters[j, col] += value


@numba.njit(cache=True)
def _ingest(keys, values, lo, hi,
            hf_keys, hf_occ, hf_new, hf_old,
            counters, bloom, hf_seed, row_seeds, sign_seeds, bloom_seeds,
            signed, listing_rule, rep_keys, rep_flags, stats):
    """Run the update for items [lo, hi); return the number of reports written.

    stats: [hash_calls_total, max_hash_calls_per_update, case1, case2, case3]
    """
    s = hf_keys.shape[0]
    d = counters.shape[0]
    m = bloom.shape[0] * 8
    kb = bloom_seeds.shape[0]
    pos = np.empty(kb, dtype=np.int64)
    nrep = 0
    for t in range(lo, hi):
        key = keys[t]
        v = values[t]
        calls = 1
        i = np.int64(hash64(key, hf_seed) % np.uint64(s))
        if not hf_occ[i]:
            hf_keys[i, :] = key
            hf_occ[i] = True
            hf_new[i] = v
            hf_old[i] = 0
            stats[2] += 1
        else:
            same = True
            for b in range(key.shape[0]):
                if hf_keys[i, b] != key[b]:
                    same = False
                    break
            if same:
                hf_new[i] += v
                stats[2] += 1
            else:
                hf_old[i] += v
                evict = hf_old[i] >= hf_new[i]
                if listing_rule:
                    evict = not evict
                if evict:
                    resident = hf_keys[i].copy()
                    _sketch_add(counters, resident, hf_new[i], row_seeds, sign_seeds, signed)
                    _bloom_positions(resident, bloom_seeds, m, pos)
                    for p in pos:
                        bloom[p >> 3] |= np.uint8(1 << (p & 7))
                    calls += d + kb
                    rep_keys[nrep, :] = resident
                    rep_flags[nrep] = 1
                    nrep += 1
                    hf_keys[i, :] = key
                    hf_new[i] = v
                    hf_old[i] = 0
                    stats[3] += 1
                else:
                    _sketch_add(counters, key, v, row_seeds, sign_seeds, signed)
                    _bloom_positions(key, bloom_seeds, m, pos)
                    calls += d + kb
                    present = True
                    for p in pos:
                        if not (bloom[p >> 3] >> (p & 7)) & 1:
                            present = False
                            break
                    if not present:
                        for p in pos:
                            bloom[p >> 3] |= np.uint8(1 << (p & 7))
                        rep_keys[nrep, :] = key
                        rep_flags[nrep] = 0
                        nrep += 1
                    stats[4] += 1
        stats[0] += calls
        if calls > stats[1]:
            stats[1] = calls
    return nrep


@numba.njit(cache=True)
def _bloom_contains(bloom, key, bloom_seeds):
    m = bloom.shape[0] * 8
    for i in range(bloom_seeds.shape[0]):
        p = np.int64(hash64(key, bloom_seeds[i]) % np.uint64(m))
        if not (bloom[p >> 3] >> (p & 7)) & 1:
            return False
    return True


@numba.njit(cache=True)
def _bloom_insert(bloom, key, bloom_seeds):
    m = bloom.shape[0] * 8
    for i in range(bloom_seeds.shape[0]):
        p = np.int64(hash64(key, bloom_seeds[i]) % np.uint64(m))
        bloom[p >> 3] |= np.uint8(1 << (p & 7))


# ---------------------------------------------------------------------------


@dataclass
class DataPlane:
    """Heavy filter + sketch + Bloom filter with periodic snapshots.

    One writer only. ``ingest`` returns the key reports produced by the batch
    and appends any snapshots to ``self.snapshots`` (or hands them to
    ``on_snapshot`` when given).
    """

    cfg: SketchConfig
    seed: int
    keep_snapshots: bool = True
    on_snapshot: object = None

    insert_count: int = field(default=0, init=False)
    snapshot_seq: int = field(default=0, init=False)
    report_seq: int = field(default=0, init=False)

    def __post_init__(self):
        cfg = self.cfg
        if cfg.bf_bits % 8:
            raise ValueError("bf_bits must be a multiple of 8")
        self.hf_family = HashFamily.derive(self.seed, NS_HEAVY, 1)
        self.row_family = HashFamily.derive(self.seed, NS_ROWS, cfg.depth)
        self.sign_family = HashFamily.derive(self.seed, NS_SIGNS, cfg.depth)
        self.bloom_family = HashFamily.derive(self.seed, NS_BLOOM, cfg.bf_hashes)
        self._hf_seed = np.uint64(self.hf_family.seeds[0])
        self._row_seeds = np.array(self.row_family.seeds, dtype=np.uint64)
        self._sign_seeds = np.array(self.sign_family.seeds, dtype=np.uint64)
        self._bloom_seeds = np.array(self.bloom_family.seeds, dtype=np.uint64)

        self.hf_keys = np.zeros((cfg.hf_slots, cfg.key_len), dtype=np.uint8)
        self.hf_occ = np.zeros(cfg.hf_slots, dtype=np.bool_)
        self.hf_new = np.zeros(cfg.hf_slots, dtype=np.uint32)
        self.hf_old = np.zeros(cfg.hf_slots, dtype=np.uint32)
        self.counters = np.zeros((cfg.depth, cfg.width), dtype=np.int32 if cfg.signed else np.uint32)
        self.bloom = np.zeros(cfg.bf_bits // 8, dtype=np.uint8)
        self.stats = np.zeros(5, dtype=np.int64)
        self.snapshots: list[Snapshot] = []

    # -- update path ------------------------------------------------------

    def update(self, item: StreamItem | tuple) -> list[KeyReport]:
        key, value = item
        return self.ingest(as_key_array([key], self.cfg.key_len), np.array([value], dtype=np.uint32))

    def ingest(self, keys, values=None) -> list[KeyReport]:
        # Report tuples cannot form cycles; generation-0 sweeps over them cost ~30% of ingest.
        with _gc_paused():
            return self._ingest_batch(keys, values)

    def _ingest_batch(self, keys, values) -> list[KeyReport]:
        cfg = self.cfg
        keys = as_key_array(keys, cfg.key_len)
        if values is None:
            values = np.ones(len(keys), dtype=np.uint32)
        else:
            values = np.asarray(values)
            if values.shape != (len(keys),):
                raise ValueError("keys and values differ in length")
            if len(values) and values.min() < 1:
                raise ValueError("stream values must be >= 1")
            values = values.astype(np.uint32)
        reports: list[KeyReport] = []
        rep_keys = np.empty((min(len(keys), cfg.sampling_interval), cfg.key_len), dtype=np.uint8)
        rep_flags = np.empty(len(rep_keys), dtype=np.uint8)
        t = 0
        while t < len(keys):
            step = cfg.sampling_interval - self.insert_count % cfg.sampling_interval
            hi = min(len(keys), t + step)
            nrep = _ingest(keys, values, t, hi, self.hf_keys, self.hf_occ, self.hf_new, self.hf_old,
                           self.counters, self.bloom, self._hf_seed, self._row_seeds, self._sign_seeds,
                           self._bloom_seeds, cfg.signed, cfg.eviction_rule == "listing",
                           rep_keys, rep_flags, self.stats)
            if nrep:
                kl = cfg.key_len
                raw = rep_keys[:nrep].tobytes()
                seq0 = self.report_seq + 1
                reports.extend(map(KeyReport, [raw[i:i + kl] for i in range(0, nrep * kl, kl)],
                                   rep_flags[:nrep].tolist(), range(seq0, seq0 + nrep)))
                self.report_seq += nrep
            self.insert_count += hi - t
            t = hi
            snap = self.maybe_snapshot()
            if snap is not None:
                if self.keep_snapshots:
                    self.snapshots.append(snap)
                if self.on_snapshot is not None:
                    self.on_snapshot(snap)
        return reports

    def maybe_snapshot(self) -> Snapshot | None:
        if self.insert_count == 0 or self.insert_count % self.cfg.sampling_interval:
            return None
        self.snapshot_seq += 1
        return self.snapshot()

    def snapshot(self) -> Snapshot:
        """Copy of the current counters, tagged with the latest snapshot seq."""
        return Snapshot(self.counters.astype(np.int64).ravel(), self.insert_count, self.snapshot_seq,
                        counter_scale(self.counters), self.cfg.depth, self.cfg.width, self.cfg.signed)

    # -- queries ----------------------------------------------------------

    def hf_query(self, key: bytes) -> int:
        i = self.hf_family.hash(0, key, self.cfg.hf_slots)
        if self.hf_occ[i] and self.hf_keys[i].tobytes() == bytes(key):
            return int(self.hf_new[i])
        return 0

    def hf_slot(self, i: int) -> tuple[bytes | None, int, int]:
        key = self.hf_keys[i].tobytes() if self.hf_occ[i] else None
        return key, int(self.hf_new[i]), int(self.hf_old[i])

    def hf_residents(self) -> dict[bytes, int]:
        idx = np.flatnonzero(self.hf_occ)
        return {self.hf_keys[i].tobytes(): int(self.hf_new[i]) for i in idx}

    def sketch_insert(self, key: bytes, value: int) -> None:
        if value < 1:
            raise ValueError("value must be >= 1")
        arr = np.frombuffer(bytes(key), dtype=np.uint8)
        self.stats[0] += self.cfg.depth
        _sketch_add(self.counters, arr, value, self._row_seeds, self._sign_seeds, self.cfg.signed)

    def bf_contains(self, key: bytes) -> bool:
        return bool(_bloom_contains(self.bloom, np.frombuffer(bytes(key), dtype=np.uint8), self._bloom_seeds))

    def bf_insert(self, key: bytes) -> None:
        _bloom_insert(self.bloom, np.frombuffer(bytes(key), dtype=np.uint8), self._bloom_seeds)

    def columns(self, key: bytes) -> list[int]:
        return [self.row_family.hash(j, key, self.cfg.width) for j in range(self.cfg.depth)]

    @property
    def max_hash_calls(self) -> int:
        return int(self.stats[1])

    @property
    def case_counts(self) -> tuple[int, int, int]:
        return int(self.stats[2]), int(self.stats[3]), int(self.stats[4])
