"""Keys, stream items, the seeded hash family and configuration.

Every hashed structure (heavy filter, sketch rows, count-sketch signs, Bloom
filter) draws its seeds from one master seed through separate namespaces, so
two structures never share a hash function by accident.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numba
import numpy as np

MASK64 = (1 << 64) - 1

_P1 = 0x9E3779B185EBCA87
_P2 = 0xC2B2AE3D27D4EB4F
_P4 = 0x85EBCA77C2B2AE63
_P5 = 0x27D4EB2F165667C5

# seed namespaces
NS_HEAVY = 1
NS_ROWS = 2
NS_SIGNS = 3
NS_BLOOM = 4

DEFAULT_SEED = 20240917
COUNTER_BYTES = 4
COUNT_BYTES = 4


class ConfigError(ValueError):
    """Raised for an invalid configuration value or file."""


class StreamItem(NamedTuple):
    key: bytes
    value: int


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, namespace: int, index: int) -> int:
    return splitmix64(splitmix64(master & MASK64) ^ ((namespace << 32) | index))


@numba.njit(cache=True, inline="always")
def _fmix64(h):
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return h


@numba.njit(cache=True)
def hash64(key, seed):
    """Seeded 64-bit mixer over a uint8 key array.

    Little-endian 8-byte words (last one zero padded) are folded into the
    state, followed by a murmur3 finalizer.
    """
    n = key.shape[0]
    h = np.uint64(seed) + np.uint64(_P5) + np.uint64(n)
    i = 0
    while i < n:
        w = np.uint64(0)
        for b in range(8):
            if i + b < n:
                w |= np.uint64(key[i + b]) << np.uint64(8 * b)
        h ^= _fmix64(w * np.uint64(_P2))
        h = ((h << np.uint64(27)) | (h >> np.uint64(37))) * np.uint64(_P1) + np.uint64(_P4)
        i += 8
    return _fmix64(h)


@numba.njit(cache=True)
def hash_rows(keys, seed, rng):
    out = np.empty(keys.shape[0], dtype=np.int64)
    for r in range(keys.shape[0]):
        out[r] = np.int64(hash64(keys[r], seed) % np.uint64(rng))
    return out


def as_key_array(keys, key_len: int) -> np.ndarray:
    """Pack an iterable of equal-length byte strings into a (n, key_len) uint8 array."""
    if isinstance(keys, np.ndarray):
        arr = np.ascontiguousarray(keys, dtype=np.uint8)
        if arr.ndim != 2 or arr.shape[1] != key_len:
            raise ValueError(f"expected (n, {key_len}) key array, got {arr.shape}")
        return arr
    keys = list(keys)
    for k in keys:
        if len(k) != key_len:
            raise ValueError(f"key {bytes(k).hex()} has length {len(k)}, expected {key_len}")
    buf = b"".join(bytes(k) for k in keys)
    return np.frombuffer(buf, dtype=np.uint8).reshape(len(keys), key_len).copy()


@dataclass(frozen=True)
class HashFamily:
    seeds: tuple[int, ...]
    algorithm: str = "fold64-murmurfin"

    @classmethod
    def derive(cls, master: int, namespace: int, count: int) -> "HashFamily":
        return cls(tuple(derive_seed(master, namespace, i) for i in range(count)))

    def hash(self, seed_index: int, key: bytes, rng: int) -> int:
        return hash_key(self, seed_index, key, rng)

    def hash_many(self, seed_index: int, keys: np.ndarray, rng: int) -> np.ndarray:
        self._check(seed_index, rng)
        return hash_rows(keys, np.uint64(self.seeds[seed_index]), np.uint64(rng))

    def _check(self, seed_index: int, rng: int) -> None:
        if not 0 <= seed_index < len(self.seeds):
            raise ConfigError(f"seed_index {seed_index} out of range for {len(self.seeds)} seeds")
        if rng < 1:
            raise ConfigError(f"hash range must be >= 1, got {rng}")


def hash_key(family: HashFamily, seed_index: int, key: bytes, rng: int) -> int:
    family._check(seed_index, rng)
    arr = np.frombuffer(bytes(key), dtype=np.uint8)
    return int(hash64(arr, np.uint64(family.seeds[seed_index])) % np.uint64(rng))


@dataclass(frozen=True)
class SketchConfig:
    depth: int = 4
    width: int = 512
    hf_slots: int = 500
    bf_bits: int = 1 << 18
    bf_hashes: int = 8
    sampling_interval: int = 1000
    key_len: int = 4
    eviction_rule: str = "prose"
    signed: bool = False

    def __post_init__(self):
        checks = [
            ("depth", self.depth >= 1, "must be >= 1"),
            ("width", self.width >= 2, "must be >= 2"),
            ("hf_slots", self.hf_slots >= 1, "must be >= 1"),
            ("bf_bits", self.bf_bits >= 8, "must be >= 8"),
            ("bf_hashes", self.bf_hashes >= 1, "must be >= 1"),
            ("sampling_interval", self.sampling_interval >= 1, "must be >= 1"),
            ("key_len", self.key_len >= 1, "must be >= 1"),
            ("eviction_rule", self.eviction_rule in ("prose", "listing"), "must be 'prose' or 'listing'"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"sketch.{name} {msg} (got {getattr(self, name)!r})")

    @property
    def slot_bytes(self) -> int:
        return self.key_len + 2 * COUNT_BYTES

    @property
    def memory_bytes(self) -> float:
        return self.bf_bits / 8 + self.depth * self.width * COUNTER_BYTES + self.hf_slots * self.slot_bytes

    @property
    def epsilon(self) -> float:
        return math.e / self.width

    @property
    def delta(self) -> float:
        return math.exp(-self.depth)

    def with_(self, **kw) -> "SketchConfig":
        return SketchConfig(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    epochs: int = 300
    patience: int = 30
    batch_size: int = 32
    window_len: int = 128
    lr: float = 0.001
    transform_c: int | None = None  # None -> sampling interval
    cold_fraction: float = 0.05
    equivariance: bool = True

    def __post_init__(self):
        for name in ("epochs", "patience", "batch_size", "window_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be positive (got {getattr(self, name)!r})")
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be positive (got {self.lr!r})")
        if self.lam < 0:
            raise ConfigError(f"training.lam must be >= 0 (got {self.lam!r})")
        if not 0 <= self.cold_fraction <= 1:
            raise ConfigError(f"training.cold_fraction must lie in [0, 1] (got {self.cold_fraction!r})")


@dataclass(frozen=True)
class ModelConfig:
    bucket_len: int = 512
    hidden: int = 128
    shared: bool = True

    def __post_init__(self):
        if self.bucket_len < 1:
            raise ConfigError(f"buckets.bucket_len must be >= 1 (got {self.bucket_len!r})")
        if self.hidden < 2 or self.hidden % 2:
            raise ConfigError(f"buckets.hidden must be a positive even number (got {self.hidden!r})")


@dataclass(frozen=True)
class Config:
    sketch: SketchConfig = field(default_factory=SketchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = DEFAULT_SEED


# (hf_slots, depth, width) per nominal memory budget; Bloom sizing is separate.
PRESETS = {
    "16KB": (500, 4, 512),
    "32KB": (1500, 4, 512),
    "48KB": (2000, 4, 1024),
    "64KB": (3000, 4, 1024),
    "80KB": (3500, 6, 1024),
    "96KB": (4500, 6, 1024),
    "112KB": (5500, 6, 1024),
    "128KB": (6000, 8, 1024),
}


def preset(name: str, **overrides) -> SketchConfig:
    try:
        s, d, w = PRESETS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return SketchConfig(depth=d, width=w, hf_slots=s, **overrides)


# JSON section -> (dataclass, {json field: dataclass field})
_SECTIONS = {
    "sketch": (SketchConfig, {"depth": "depth", "width": "width", "sampling_interval": "sampling_interval",
                              "key_len": "key_len", "eviction_rule": "eviction_rule", "signed": "signed"}),
    "bloom": (SketchConfig, {"bits": "bf_bits", "hashes": "bf_hashes"}),
    "heavy_filter": (SketchConfig, {"slots": "hf_slots"}),
    "training": (TrainConfig, {"lambda": "lam", **{f.name: f.name for f in fields(TrainConfig)}}),
    "buckets": (ModelConfig, {f.name: f.name for f in fields(ModelConfig)}),
}


def parse_config(doc: dict) -> Config:
    unknown = set(doc) - set(_SECTIONS) - {"preset", "seed"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sketch_kw: dict = {}
    if "preset" in doc:
        s, d, w = PRESETS.get(str(doc["preset"]).upper(), (None, None, None))
        if s is None:
            raise ConfigError(f"unknown preset {doc['preset']!r}")
        sketch_kw.update(hf_slots=s, depth=d, width=w)
    kw = {SketchConfig: sketch_kw, TrainConfig: {}, ModelConfig: {}}
    for section, (cls, mapping) in _SECTIONS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for k, v in body.items():
            if k not in mapping:
                raise ConfigError(f"unknown field {section}.{k}")
            kw[cls][mapping[k]] = v
    seed = doc.get("seed", env_seed())
    return Config(SketchConfig(**kw[SketchConfig]), TrainConfig(**kw[TrainConfig]),
                  ModelConfig(**kw[ModelConfig]), int(seed))


def load_config(path) -> Config:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc)


def env_seed(default: int = DEFAULT_SEED) -> int:
    raw = os.environ.get("UCL_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw, 0)
    except ValueError:
        raise ConfigError(f"UCL_SEED must be an integer, got {raw!r}") from None
