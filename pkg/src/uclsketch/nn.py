"""Small dense-network toolkit with hand-written backward passes.

Tensors are plain numpy arrays. Layers are functional about their caches:
``forward`` returns ``(out, cache)`` and ``backward(cache, grad)`` returns the
input gradient while accumulating parameter gradients in place, so one layer
can be evaluated several times per step (as the equivariance loss requires).
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = np.sqrt(1.0 / n_in)
        self.W = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        return x @ self.W.T + self.b, x

    def backward(self, x, g):
        if g.shape[-1] != self.n_out:
            raise ShapeError(f"gradient last dim {g.shape[-1]} != {self.n_out}")
        g2 = g.reshape(-1, self.n_out)
        self.gW += g2.T @ x.reshape(-1, self.n_in)
        self.gb += g2.sum(axis=0)
        return g @ self.W

    def params(self):
        return [(self.W, self.gW), (self.b, self.gb)]


def relu(x):
    return np.maximum(x, 0.0), x


def relu_backward(x, g):
    return g * (x > 0)


def sigmoid(x):
    return expit(x)


def sigmoid_fwd(x):
    y = sigmoid(x)
    return y, y


def sigmoid_backward(y, g):
    return g * y * (1.0 - y)


def silu(x):
    return x * sigmoid(x), x


def silu_backward(x, g):
    s = sigmoid(x)
    return g * (s + x * s * (1.0 - s))


def sinusoidal_embed(i, h: int) -> np.ndarray:
    """Entries 2j, 2j+1 are sin / cos of i / 10000^(2j/h). Accepts scalar or array i."""
    if h % 2:
        raise ValueError(f"embedding dimension must be even, got {h}")
    i = np.asarray(i, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, h, 2, dtype=np.float64) / h)
    ang = i[..., None] * freqs
    out = np.empty(i.shape + (h,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p, _ in self.params]
        self.v = [np.zeros_like(p) for p, _ in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for (p, g), m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for _, g in self.params:
            g[...] = 0.0


def adam_step(params, grads, state: Adam):
    """Functional wrapper: copy ``grads`` into the tracked buffers and step."""
    for (p, g), new in zip(state.params, grads):
        g[...] = new
    state.step()


# ---------------------------------------------------------------------------
# checkpoints: magic, version, header json length, header json, float32 blobs

_CKPT_MAGIC = b"UCLM"


def save_arrays(path, header: dict, arrays: list[np.ndarray]) -> None:
    import json

    meta = dict(header)
    meta["shapes"] = [list(a.shape) for a in arrays]
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<HI", 1, len(blob)) + blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_arrays(path) -> tuple[dict, list[np.ndarray]]:
    import json

    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError("not a model checkpoint")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off:off + n])
    off += n
    arrays = []
    for shape in meta["shapes"]:
        count = int(np.prod(shape))
        a = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays.append(a.copy())
        off += 4 * count
    if off != len(buf):
        raise ValueError("checkpoint has trailing or missing bytes")
    return meta, arrays


class BucketLinear:
    """One independent Linear per bucket; input (..., n_buckets, n_in)."""

    def __init__(self, n_buckets: int, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = np.sqrt(1.0 / n_in)
        self.W = rng.uniform(-bound, bound, size=(n_buckets, n_out, n_in)).astype(dtype)
        self.b = np.zeros((n_buckets, n_out), dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def forward(self, x, ids):
        return np.einsum("...ki,koi->...ko", x, self.W[ids]) + self.b[ids], (x, ids)

    def backward(self, cache, g):
        x, ids = cache
        k = len(ids)
        g2 = g.reshape(-1, k, g.shape[-1])
        x2 = np.reshape(x, (-1, k, x.shape[-1]))
        np.add.at(self.gW, ids, np.einsum("bko,bki->koi", g2, x2))
        np.add.at(self.gb, ids, g2.sum(axis=0))
        return np.einsum("...ko,koi->...ki", g, self.W[ids])

    def params(self):
        return [(self.W, self.gW), (self.b, self.gb)]
