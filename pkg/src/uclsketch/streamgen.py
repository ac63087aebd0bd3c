"""Synthetic Zipf streams and trace files (csv or raw, optionally gzipped)."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import StreamItem


@dataclass(frozen=True)
class ZipfSpec:
    skew: float
    universe: int
    length: int
    seed: int = 0
    permute_seed: int | None = None

    def __post_init__(self):
        if self.skew < 0:
            raise ValueError(f"skew must be >= 0, got {self.skew}")
        if self.universe < 1:
            raise ValueError(f"universe must be >= 1, got {self.universe}")
        if self.length < 0:
            raise ValueError(f"length must be >= 0, got {self.length}")


@dataclass(frozen=True)
class TraceFormat:
    variant: str = "csv"
    key_len: int = 4
    has_values: bool = True

    def __post_init__(self):
        if self.variant not in ("csv", "raw"):
            raise ValueError(f"unknown trace variant {self.variant!r}")


class TraceError(ValueError):
    pass


def zipf_cdf(skew: float, universe: int) -> np.ndarray:
    w = np.arange(1, universe + 1, dtype=np.float64) ** -skew
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return cdf


def generate_ranks(spec: ZipfSpec) -> np.ndarray:
    """0-based rank of every emitted item, drawn i.i.d. by inverse CDF."""
    cdf = zipf_cdf(spec.skew, spec.universe)
    u = np.random.default_rng(spec.seed).random(spec.length)
    ranks = np.searchsorted(cdf, u, side="right")
    return np.minimum(ranks, spec.universe - 1)


def rank_keys(ranks: np.ndarray, key_len: int = 4, permute_seed: int | None = None,
              universe: int | None = None) -> np.ndarray:
    """Map ranks to big-endian key bytes, optionally through a seeded permutation."""
    ids = ranks.astype(np.uint64)
    if permute_seed is not None:
        perm = np.random.default_rng(permute_seed).permutation(universe or int(ranks.max()) + 1)
        ids = perm[ranks].astype(np.uint64)
    be = ids.astype(">u8").view(np.uint8).reshape(-1, 8)
    if key_len >= 8:
        out = np.zeros((len(ids), key_len), dtype=np.uint8)
        out[:, key_len - 8:] = be
        return out
    return np.ascontiguousarray(be[:, 8 - key_len:])


def generate_arrays(spec: ZipfSpec, key_len: int = 4) -> tuple[np.ndarray, np.ndarray]:
    ranks = generate_ranks(spec)
    keys = rank_keys(ranks, key_len, spec.permute_seed, spec.universe)
    return keys, np.ones(len(keys), dtype=np.uint32)


def generate(spec: ZipfSpec, key_len: int = 4) -> Iterator[StreamItem]:
    keys, values = generate_arrays(spec, key_len)
    for k, v in zip(keys, values):
        yield StreamItem(k.tobytes(), int(v))


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_trace(path, fmt: TraceFormat, items) -> None:
    path = Path(path)
    with _open(path, "wb") as f:
        if fmt.variant == "csv":
            for key, value in items:
                f.write(f"{bytes(key).hex()},{int(value)}\n".encode())
        else:
            rec = struct.Struct("<I")
            for key, value in items:
                if len(key) != fmt.key_len:
                    raise TraceError(f"key length {len(key)} != {fmt.key_len}")
                f.write(bytes(key))
                if fmt.has_values:
                    f.write(rec.pack(int(value)))


def read_trace(path, fmt: TraceFormat) -> list[StreamItem]:
    keys, values = read_trace_arrays(path, fmt)
    return [StreamItem(k.tobytes(), int(v)) for k, v in zip(keys, values)]


def read_trace_arrays(path, fmt: TraceFormat) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with _open(path, "rb") as f:
        data = f.read()
    if fmt.variant == "raw":
        rec = fmt.key_len + (4 if fmt.has_values else 0)
        if len(data) % rec:
            raise TraceError(f"{path}: truncated record {len(data) // rec} "
                             f"({len(data) % rec} trailing bytes of a {rec}-byte record)")
        if fmt.has_values:
            dt = np.dtype([("k", np.uint8, (fmt.key_len,)), ("v", "<u4")])
            arr = np.frombuffer(data, dtype=dt)
            keys, values = arr["k"].copy(), arr["v"].astype(np.uint32)
        else:
            keys = np.frombuffer(data, dtype=np.uint8).reshape(-1, fmt.key_len).copy()
            values = np.ones(len(keys), dtype=np.uint32)
        if len(values) and values.min() < 1:
            bad = int(np.argmax(values < 1))
            raise TraceError(f"{path}: record {bad} has value 0")
        return keys, values

    keys, values = [], []
    for lineno, line in enumerate(data.decode().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        hexkey, _, val = line.partition(",")
        try:
            key = bytes.fromhex(hexkey)
            value = int(val) if fmt.has_values and val else 1
        except ValueError:
            raise TraceError(f"{path}:{lineno}: malformed line {line!r}") from None
        if len(key) != fmt.key_len:
            raise TraceError(f"{path}:{lineno}: key has {len(key)} bytes, expected {fmt.key_len}")
        if value < 1:
            raise TraceError(f"{path}:{lineno}: value must be >= 1")
        keys.append(key)
        values.append(value)
    karr = np.frombuffer(b"".join(keys), dtype=np.uint8).reshape(-1, fmt.key_len).copy()
    return karr, np.array(values, dtype=np.uint32)


def exact_counts(keys: np.ndarray, values: np.ndarray) -> dict[bytes, int]:
    """Exact per-key volume of a stream."""
    if len(keys) == 0:
        return {}
    view = np.ascontiguousarray(keys).view(np.dtype((np.void, keys.shape[1]))).ravel()
    uniq, inv = np.unique(view, return_inverse=True)
    tot = np.bincount(inv.ravel(), weights=values, minlength=len(uniq)).astype(np.int64)
    return {u.tobytes(): int(c) for u, c in zip(uniq, tot)}
