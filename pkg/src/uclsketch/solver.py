"""Learned bucket-shared decoder and its label-free equivariant training.

The decoder maps normalised counters plus a logical bucket id to ``L``
per-key frequencies in (0, 1). Training sees only counter snapshots: it asks
for measurement consistency, sparsity, and equivariance under random
Zipf-preserving increments of the decoder's own output.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .core import TrainConfig
from .dataplane import Snapshot


class DivergenceError(RuntimeError):
    pass


def normalize(snapshot: Snapshot | np.ndarray, depth: int | None = None):
    """Return (y / scale, scale) with scale = min over rows of the row maximum.

    Returns ``(None, 0)`` for all-zero counters, which carry no training signal.
    """
    if isinstance(snapshot, Snapshot):
        y, scale = snapshot.y_raw, snapshot.scale
    else:
        y = np.asarray(snapshot)
        scale = int(np.abs(y.reshape(depth, -1)).max(axis=1).min())
    if scale <= 0:
        return None, 0
    return y.astype(np.float64) / scale, scale


# ---------------------------------------------------------------------------
# model


class SolverModel:
    """Bucket-conditioned decoder.

    Rows of the (d, w) counter grid pass through two per-row blocks, are fused
    into one h-dim representation, modulated per bucket as ``scale * x + shift``
    (from a sinusoidal id embedding) and decoded by a ReLU trunk and a sigmoid
    head of width L. With ``shared=False`` each bucket gets its own trunk and
    head instead of an embedding.
    """

    def __init__(self, depth: int, width: int, hidden: int = 128, bucket_len: int = 512,
                 seed: int = 0, shared: bool = True, n_buckets: int | None = None):
        if hidden % 2:
            raise ValueError("hidden must be even")
        if not shared and not n_buckets:
            raise ValueError("unshared model needs a fixed bucket count")
        self.depth, self.width, self.hidden, self.bucket_len = depth, width, hidden, bucket_len
        self.seed, self.shared, self.n_buckets = seed, shared, n_buckets
        self.calibrated = False
        rng = np.random.default_rng(seed)
        h = hidden
        self.row1 = nn.Linear(width, h, rng)
        self.row2 = nn.Linear(h, h, rng)
        self.row3 = nn.Linear(h, h, rng)
        self.row4 = nn.Linear(h, h, rng)
        self.fuse = nn.Linear(depth * h, h, rng)
        if shared:
            self.embed = nn.Linear(h, 2 * h, rng)
            self.embed.b[:h] = 1.0
            self.trunk1 = nn.Linear(h, h, rng)
            self.trunk2 = nn.Linear(h, h, rng)
            self.head = nn.Linear(h, bucket_len, rng)
        else:
            self.trunk1 = nn.BucketLinear(n_buckets, h, h, rng)
            self.trunk2 = nn.BucketLinear(n_buckets, h, h, rng)
            self.head = nn.BucketLinear(n_buckets, h, bucket_len, rng)

    def layers(self):
        out = [self.row1, self.row2, self.row3, self.row4, self.fuse]
        if self.shared:
            out.append(self.embed)
        return out + [self.trunk1, self.trunk2, self.head]

    def params(self):
        return [pg for layer in self.layers() for pg in layer.params()]

    def param_count(self) -> int:
        return sum(p.size for p, _ in self.params())

    def zero_grad(self):
        for _, g in self.params():
            g[...] = 0.0

    def get_weights(self) -> list[np.ndarray]:
        return [p.copy() for p, _ in self.params()]

    def set_weights(self, weights) -> None:
        for (p, _), w in zip(self.params(), weights):
            p[...] = w

    def calibrate(self, Y: np.ndarray, n: int) -> None:
        """Set the head bias so a fresh model starts near the mean per-key volume.

        Starting every output at 0.5 overshoots the counters by orders of
        magnitude and drives the sigmoid head into saturation.
        """
        mean_rows = Y.reshape(len(Y), self.depth, self.width).sum(axis=2).mean()
        p0 = float(np.clip(mean_rows / max(n, 1), 1e-9, 0.5))
        self.head.b[...] = np.log(p0 / (1 - p0))
        self.calibrated = True

    def n_buckets_for(self, n: int) -> int:
        return max(1, math.ceil(n / self.bucket_len))

    # -- forward / backward ---------------------------------------------

    def forward(self, Y: np.ndarray, bucket_ids):
        """Y: (B, d*w) normalised counters -> (B, len(bucket_ids), L)."""
        ids = np.asarray(bucket_ids, dtype=np.int64)
        if not self.shared and (ids.min() < 0 or ids.max() >= self.n_buckets):
            raise IndexError(f"bucket id out of range for {self.n_buckets} buckets")
        B = Y.shape[0]
        X = Y.reshape(B, self.depth, self.width)
        a1, c1 = self.row1.forward(X)
        r1, k1 = nn.relu(a1)
        a2, c2 = self.row2.forward(r1)
        r2, k2 = nn.relu(a2)
        a3, c3 = self.row3.forward(r2)
        r3, k3 = nn.relu(a3)
        a4, c4 = self.row4.forward(r3)
        r4, k4 = nn.relu(a4)
        s, c5 = self.fuse.forward(r4.reshape(B, -1))
        if self.shared:
            emb = nn.sinusoidal_embed(ids, self.hidden)
            e_act, ke = nn.silu(emb)
            e, ce = self.embed.forward(e_act)
            h = self.hidden
            gain, shift = e[:, :h], e[:, h:]
            z = gain[None] * s[:, None, :] + shift[None]
            t1, ct1 = self.trunk1.forward(z)
            u1, kt1 = nn.relu(t1)
            t2, ct2 = self.trunk2.forward(u1)
            u2, kt2 = nn.relu(t2)
            o, co = self.head.forward(u2)
        else:
            gain = shift = ke = ce = None
            z = np.broadcast_to(s[:, None, :], (B, len(ids), self.hidden))
            t1, ct1 = self.trunk1.forward(z, ids)
            u1, kt1 = nn.relu(t1)
            t2, ct2 = self.trunk2.forward(u1, ids)
            u2, kt2 = nn.relu(t2)
            o, co = self.head.forward(u2, ids)
        out, ko = nn.sigmoid_fwd(o)
        cache = (B, c1, k1, c2, k2, c3, k3, c4, k4, c5, s, gain, ke, ce, ct1, kt1, ct2, kt2, co, ko)
        return out, cache

    def backward(self, cache, g_out, need_input_grad: bool = False):
        (B, c1, k1, c2, k2, c3, k3, c4, k4, c5, s, gain, ke, ce, ct1, kt1, ct2, kt2, co, ko) = cache
        g = nn.sigmoid_backward(ko, g_out)
        g = self.head.backward(co, g)
        g = nn.relu_backward(kt2, g)
        g = self.trunk2.backward(ct2, g)
        g = nn.relu_backward(kt1, g)
        g_z = self.trunk1.backward(ct1, g)
        if self.shared:
            g_gain = (g_z * s[:, None, :]).sum(axis=0)
            g_shift = g_z.sum(axis=0)
            g_s = (g_z * gain[None]).sum(axis=1)
            g_e = np.concatenate([g_gain, g_shift], axis=1)
            self.embed.backward(ce, g_e)  # embedding input is constant
        else:
            g_s = g_z.sum(axis=1)
        g = self.fuse.backward(c5, g_s).reshape(B, self.depth, self.hidden)
        g = nn.relu_backward(k4, g)
        g = self.row4.backward(c4, g)
        g = nn.relu_backward(k3, g)
        g = self.row3.backward(c3, g)
        g = nn.relu_backward(k2, g)
        g = self.row2.backward(c2, g)
        g = nn.relu_backward(k1, g)
        if not need_input_grad:
            # the first layer still needs its parameter gradient
            self.row1.backward(c1, g)
            return None
        return self.row1.backward(c1, g).reshape(B, -1)

    def recover(self, Y: np.ndarray, n: int):
        """Full per-key recovery for a batch: (B, n) in the normalised domain."""
        nb = self.n_buckets_for(n)
        out, cache = self.forward(Y, np.arange(nb))
        return out.reshape(Y.shape[0], -1)[:, :n], (cache, nb, n)

    def recover_backward(self, rcache, g_x, need_input_grad: bool = False):
        cache, nb, n = rcache
        B = g_x.shape[0]
        g = np.zeros((B, nb * self.bucket_len))
        g[:, :n] = g_x
        return self.backward(cache, g.reshape(B, nb, self.bucket_len), need_input_grad)

    # -- persistence --------------------------------------------------------

    def header(self) -> dict:
        return {"depth": self.depth, "width": self.width, "hidden": self.hidden,
                "bucket_len": self.bucket_len, "seed": self.seed, "shared": self.shared,
                "n_buckets": self.n_buckets,
                "layers": [list(p.shape) for p, _ in self.params()]}

    def save(self, path) -> None:
        nn.save_arrays(path, self.header(), [p for p, _ in self.params()])

    @classmethod
    def load(cls, path) -> "SolverModel":
        meta, arrays = nn.load_arrays(path)
        model = cls(meta["depth"], meta["width"], meta["hidden"], meta["bucket_len"], meta["seed"],
                    meta["shared"], meta["n_buckets"])
        if [list(p.shape) for p, _ in model.params()] != meta["layers"]:
            raise ValueError("checkpoint layer shapes do not match the recorded architecture")
        model.set_weights(arrays)
        return model


def forward_bucket(model: SolverModel, y_norm: np.ndarray, bucket_id: int, n: int | None = None) -> np.ndarray:
    if bucket_id < 0 or (n is not None and bucket_id >= model.n_buckets_for(n)):
        raise IndexError(f"bucket id {bucket_id} out of range")
    out, _ = model.forward(np.asarray(y_norm, dtype=np.float64)[None], [bucket_id])
    return out[0, 0]


def recover_full(model: SolverModel, snapshot: Snapshot, n: int, raw: bool = False) -> np.ndarray:
    """Per-key estimates in count units (rounded, non-negative unless ``raw``)."""
    y_norm, scale = normalize(snapshot)
    if y_norm is None:
        return np.zeros(n)
    x, _ = model.recover(y_norm[None], n)
    x = x[0] * scale
    if raw:
        return x
    return np.maximum(np.floor(x + 0.5), 0).astype(np.int64)


# ---------------------------------------------------------------------------
# transformations


@dataclass(frozen=True)
class TransformSpec:
    c: int
    hot_indices: np.ndarray
    cold_fraction: float = 0.05
    unit: int = 1
    seed: int = 0


def allocate(weights: np.ndarray, total: int) -> np.ndarray:
    """Split ``total`` integer units proportionally by largest remainder.

    Ties in the remainder go to the lowest index; zero total weight spreads
    the units uniformly.
    """
    weights = np.asarray(weights, dtype=np.float64)
    k = len(weights)
    if k == 0 or total == 0:
        return np.zeros(k, dtype=np.int64)
    s = weights.sum()
    share = np.full(k, total / k) if s <= 0 else total * weights / s
    base = np.floor(share).astype(np.int64)
    rest = int(total - base.sum())
    if rest:
        rem = share - base
        thr = np.partition(rem, k - rest)[k - rest]
        above = np.flatnonzero(rem > thr)
        tied = np.flatnonzero(rem == thr)[: rest - len(above)]
        base[above] += 1
        base[tied] += 1
    return base


def transform_increments(x_counts: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    """Count-unit increments of one transformation applied to ``x_counts``."""
    n = len(x_counts)
    hot = np.asarray(spec.hot_indices, dtype=np.int64)
    if len(hot) and (hot.min() < 0 or hot.max() >= n):
        raise IndexError("hot index out of range")
    delta = np.zeros(n, dtype=np.float64)
    if len(hot):
        delta[hot] += allocate(np.maximum(x_counts[hot], 0), spec.c)
    cold = np.ones(n, dtype=bool)
    cold[hot] = False
    cold_idx = np.flatnonzero(cold)
    k = math.ceil(spec.cold_fraction * len(cold_idx)) if len(cold_idx) else 0
    if k:
        pick = rng.choice(cold_idx, size=k, replace=False)
        delta[pick] += spec.unit
    return delta


def apply_transform(x: np.ndarray, spec: TransformSpec, scale: float,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Transform a normalised frequency vector; increments are made in count units."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    delta = transform_increments(np.asarray(x) * scale, spec, rng)
    return x + delta / scale


# ---------------------------------------------------------------------------
# training


class SlidingWindow:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._buf: deque[Snapshot] = deque(maxlen=capacity)

    def push(self, snap: Snapshot) -> None:
        self._buf.append(snap)

    def __len__(self):
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)

    def items(self) -> list[Snapshot]:
        return list(self._buf)


@dataclass
class LossParts:
    measurement: float
    equivariance: float
    sparsity: float

    @property
    def total(self) -> float:
        return self.measurement + self.equivariance + self.sparsity


def loss_and_grad(model: SolverModel, Y: np.ndarray, A, deltas: np.ndarray | None, lam: float,
                  backward: bool = True) -> LossParts:
    """Objective on a batch and (optionally) parameter gradients.

    Y: (B, m) normalised counters. deltas: (B, n) normalised transform
    increments, a callable building them from the decoder output, or None to
    drop the equivariance term. Each term is a mean
    over its entries and over the batch. Increments are held constant, so the
    transformed target moves one-for-one with the decoder output.
    """
    B, m = Y.shape
    n = A.n
    csr = A.csr()
    X, rc1 = model.recover(Y, n)
    R = (csr @ X.T).T - Y
    meas = float((R**2).sum() / (B * m))
    spars = float(lam * np.abs(X).sum() / (B * n))
    g_X = (csr.T @ R.T).T * (2.0 / (B * m)) + lam * np.sign(X) / (B * n)
    equiv = 0.0
    if callable(deltas):
        deltas = deltas(X)
    if deltas is not None:
        Xt = X + deltas
        Y2 = (csr @ Xt.T).T
        Xh, rc2 = model.recover(Y2, n)
        E = Xh - Xt
        equiv = float((E**2).sum() / (B * n))
        g_E = E * (2.0 / (B * n))
        if backward:
            g_Y2 = model.recover_backward(rc2, g_E, need_input_grad=True)
            g_X += (csr.T @ g_Y2.T).T - g_E
    if backward:
        model.recover_backward(rc1, g_X)
    parts = LossParts(meas, equiv, spars)
    if not np.isfinite(parts.total):
        raise DivergenceError(f"non-finite loss {parts}")
    return parts


def sample_deltas(X: np.ndarray, scales: np.ndarray, hot: np.ndarray, cfg: TrainConfig, c: int,
                  rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(X)
    for b in range(len(X)):
        spec = TransformSpec(c, hot, cfg.cold_fraction)
        out[b] = transform_increments(X[b] * scales[b], spec, rng) / scales[b]
    return out


@dataclass
class TrainReport:
    epochs: list[LossParts] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    equivariance: bool = True

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            self.to_csv(f)

    def to_csv(self, f) -> None:
        w = csv.writer(f, lineterminator="\n")
        head = ["epoch", "loss_measurement"]
        if self.equivariance:
            head.append("loss_equiv")
        w.writerow(head + ["loss_sparse", "total"])
        for i, p in enumerate(self.epochs, 1):
            row = [i, f"{p.measurement:.10g}"]
            if self.equivariance:
                row.append(f"{p.equivariance:.10g}")
            w.writerow(row + [f"{p.sparsity:.10g}", f"{p.total:.10g}"])


def train(model: SolverModel, window, A, hot_indices, cfg: TrainConfig, seed: int = 0,
          c: int | None = None, optimizer: nn.Adam | None = None, log=None) -> TrainReport:
    """Run up to ``cfg.epochs`` epochs over the window with early stopping.

    The best-loss weights are restored at the end.
    """
    samples = [normalize(s) for s in window]
    samples = [(y, sc) for y, sc in samples if y is not None]
    if not samples:
        raise ValueError("window holds no usable snapshot")
    Yall = np.stack([y for y, _ in samples])
    scales = np.array([sc for _, sc in samples], dtype=np.float64)
    hot = np.asarray(sorted(hot_indices), dtype=np.int64)
    c = c if c is not None else (cfg.transform_c or 1000)
    if not model.calibrated:
        model.calibrate(Yall, A.n)
    rng = np.random.default_rng(seed)
    opt = optimizer or nn.Adam(model.params(), lr=cfg.lr)
    report = TrainReport(equivariance=cfg.equivariance)
    best, best_w, since = math.inf, model.get_weights(), 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(Yall))
        acc = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            Y = Yall[idx]
            deltas = None
            if cfg.equivariance:
                deltas = lambda X, sc=scales[idx]: sample_deltas(X, sc, hot, cfg, c, rng)
            model.zero_grad()
            parts = loss_and_grad(model, Y, A, deltas, cfg.lam)
            opt.step()
            acc += np.array([parts.measurement, parts.equivariance, parts.sparsity]) * len(idx)
        acc /= len(order)
        parts = LossParts(*acc)
        report.epochs.append(parts)
        if log:
            log(epoch + 1, parts)
        if parts.total < best:
            best, best_w, since = parts.total, model.get_weights(), 0
            report.best_epoch = epoch + 1
        else:
            since += 1
            if since >= cfg.patience:
                report.stopped_early = True
                break
    model.set_weights(best_w)
    return report
