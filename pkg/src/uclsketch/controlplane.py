"""Key registry, snapshot intake, and the query path."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .dataplane import HOT, DataPlane, KeyReport, Snapshot
from .sensing import SketchOperator
from .solver import SolverModel, normalize


class KeyRegistry:
    """Append-only key list in first-report order plus a sticky hot-flag set."""

    def __init__(self):
        self.keys: list[bytes] = []
        self.index: dict[bytes, int] = {}
        self.hot: set[int] = set()
        self.version = 0
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self.index

    def handle_report(self, report: KeyReport) -> int:
        with self._lock:
            pos = self.index.get(report.key)
            if pos is None:
                pos = len(self.keys)
                self.keys.append(report.key)
                self.index[report.key] = pos
                self.version += 1
            if report.flag == HOT and pos not in self.hot:
                self.hot.add(pos)
                self.version += 1
            return pos

    def handle_reports(self, reports) -> None:
        for r in reports:
            self.handle_report(r)

    def lookup(self, key: bytes) -> int | None:
        return self.index.get(key)

    def frozen(self) -> "FrozenRegistry":
        with self._lock:
            return FrozenRegistry(tuple(self.keys), frozenset(self.hot), self.version)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for i, k in enumerate(self.keys):
                f.write(f"{k.hex()},{'hot' if i in self.hot else 'cold'}\n")

    @classmethod
    def load(cls, path) -> "KeyRegistry":
        reg = cls()
        with open(path) as f:
            for seq, line in enumerate(f, 1):
                hexkey, flag = line.strip().split(",")
                reg.handle_report(KeyReport(bytes.fromhex(hexkey), HOT if flag == "hot" else 0, seq))
        return reg


@dataclass(frozen=True)
class FrozenRegistry:
    keys: tuple[bytes, ...]
    hot: frozenset[int]
    version: int
    index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {k: i for i, k in enumerate(self.keys)})

    def __len__(self):
        return len(self.keys)

    def lookup(self, key: bytes) -> int | None:
        return self.index.get(key)

    def hot_indices(self) -> np.ndarray:
        return np.array(sorted(self.hot), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class QueryContext:
    """Everything a query reads, captured together."""

    model: SolverModel | None
    snapshot: Snapshot | None
    registry: FrozenRegistry
    hf: dict[bytes, int]
    bucket_len: int
    model_version: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def solver_part(self, position: int) -> int:
        if self.model is None or self.snapshot is None:
            return 0
        bucket_id, inner_id = divmod(position, self.bucket_len)
        out = self._cache.get(bucket_id)
        if out is None:
            y_norm, scale = normalize(self.snapshot)
            if y_norm is None:
                out = np.zeros(self.bucket_len, dtype=np.int64)
            else:
                x, _ = self.model.forward(y_norm[None], [bucket_id])
                out = np.maximum(np.floor(x[0, 0] * scale + 0.5), 0).astype(np.int64)
            self._cache[bucket_id] = out
        return int(out[inner_id])

    def query(self, key: bytes) -> int:
        hf = self.hf.get(bytes(key), 0)
        pos = self.registry.lookup(bytes(key))
        if pos is None:
            return hf
        return self.solver_part(pos) + hf

    def query_all(self) -> np.ndarray:
        """Solver part for every registered key, in registry order."""
        n = len(self.registry)
        if self.model is None or self.snapshot is None or n == 0:
            return np.zeros(n, dtype=np.int64)
        y_norm, scale = normalize(self.snapshot)
        if y_norm is None:
            return np.zeros(n, dtype=np.int64)
        x, _ = self.model.recover(y_norm[None], n)
        return np.maximum(np.floor(x[0] * scale + 0.5), 0).astype(np.int64)


def bucket_position(position: int, bucket_len: int) -> tuple[int, int]:
    return divmod(position, bucket_len)


class ControlPlane:
    """Registry + latest snapshot + published model, with atomic context capture."""

    def __init__(self, dataplane: DataPlane, bucket_len: int = 512):
        self.dataplane = dataplane
        self.registry = KeyRegistry()
        self.bucket_len = bucket_len
        self.latest: Snapshot | None = None
        self.model: SolverModel | None = None
        self.model_version = 0
        self._lock = threading.Lock()

    def on_snapshot(self, snap: Snapshot) -> None:
        with self._lock:
            self.latest = snap

    def publish(self, model: SolverModel) -> None:
        with self._lock:
            self.model = model
            self.model_version += 1

    def operator(self, registry: FrozenRegistry | None = None) -> SketchOperator:
        reg = registry or self.registry.frozen()
        cfg = self.dataplane.cfg
        return SketchOperator.from_keys(reg.keys, cfg.depth, cfg.width, self.dataplane.seed, cfg.key_len,
                                        signed=cfg.signed, version=reg.version)

    def freeze_epoch(self) -> QueryContext:
        with self._lock:
            return QueryContext(self.model, self.latest, self.registry.frozen(),
                                self.dataplane.hf_residents(), self.bucket_len, self.model_version)
