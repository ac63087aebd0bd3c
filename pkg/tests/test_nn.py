import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uclsketch import nn


def test_activation_values():
    assert nn.sigmoid(0.0) == 0.5
    assert nn.silu(np.array(0.0))[0] == 0.0
    assert nn.relu(np.array(-1.0))[0] == 0.0


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        a = f(x)
        x[i] = old - h
        b = f(x)
        x[i] = old
        g[i] = (a - b) / (2 * h)
    return g


@pytest.mark.parametrize("name", ["sigmoid", "silu"])
def test_smooth_activation_grads(name):
    x = np.random.default_rng(0).normal(size=7)
    w = np.random.default_rng(1).normal(size=7)
    if name == "sigmoid":
        fwd = lambda v: (nn.sigmoid(v) * w).sum()
        y, cache = nn.sigmoid_fwd(x)
        g = nn.sigmoid_backward(cache, w)
    else:
        fwd = lambda v: (nn.silu(v)[0] * w).sum()
        y, cache = nn.silu(x)
        g = nn.silu_backward(cache, w)
    assert np.allclose(g, central_diff(fwd, x.copy()), rtol=1e-7, atol=1e-9)


def test_relu_grad_away_from_kink():
    x = np.array([-2.0, -0.5, 0.3, 4.0])
    assert np.array_equal(nn.relu_backward(x, np.ones(4)), [0, 0, 1, 1])


def test_linear_grads():
    rng = np.random.default_rng(2)
    lin = nn.Linear(5, 3, rng)
    lin.b[...] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))
    out, cache = lin.forward(x)
    gx = lin.backward(cache, w)
    loss = lambda: (lin.forward(x)[0] * w).sum()
    assert np.allclose(gx, central_diff(lambda v: (lin.forward(v)[0] * w).sum(), x.copy()), atol=1e-8)
    assert np.allclose(lin.gW, central_diff(lambda _: loss(), lin.W), atol=1e-8)
    assert np.allclose(lin.gb, central_diff(lambda _: loss(), lin.b), atol=1e-8)


def test_linear_shape_errors():
    lin = nn.Linear(3, 2, np.random.default_rng(0))
    with pytest.raises(nn.ShapeError):
        lin.forward(np.zeros((1, 4)))
    with pytest.raises(nn.ShapeError):
        lin.backward(np.zeros((1, 3)), np.zeros((1, 5)))


def test_linear_init_bounds():
    lin = nn.Linear(64, 32, np.random.default_rng(0))
    assert np.abs(lin.W).max() <= np.sqrt(1 / 64) and not lin.b.any()


def test_bucket_linear_matches_per_bucket_linear():
    rng = np.random.default_rng(3)
    bl = nn.BucketLinear(4, 3, 5, rng)
    bl.b[...] = rng.normal(size=bl.b.shape)
    ids = np.array([2, 0, 3])
    x = rng.normal(size=(2, 3, 3))
    g = rng.normal(size=(2, 3, 5))
    out, cache = bl.forward(x, ids)
    for j, k in enumerate(ids):
        assert np.allclose(out[:, j], x[:, j] @ bl.W[k].T + bl.b[k])
    gx = bl.backward(cache, g)
    loss = lambda: (bl.forward(x, ids)[0] * g).sum()
    assert np.allclose(gx, central_diff(lambda v: (bl.forward(v, ids)[0] * g).sum(), x.copy()), atol=1e-8)
    assert np.allclose(bl.gW, central_diff(lambda _: loss(), bl.W), atol=1e-8)
    assert np.allclose(bl.gb, central_diff(lambda _: loss(), bl.b), atol=1e-8)


def test_sinusoidal_zero():
    e = nn.sinusoidal_embed(0, 8)
    assert np.array_equal(e, [0, 1, 0, 1, 0, 1, 0, 1])


def test_sinusoidal_distinct_and_bounded():
    E = nn.sinusoidal_embed(np.arange(64), 32)
    assert np.abs(E).max() <= 1
    gaps = np.linalg.norm(E[:, None] - E[None], axis=-1)
    assert gaps[~np.eye(64, dtype=bool)].min() > 0


def test_sinusoidal_formula():
    h, i = 16, 7
    e = nn.sinusoidal_embed(i, h)
    for j in range(h // 2):
        assert e[2 * j] == pytest.approx(np.sin(i / 10000 ** (2 * j / h)))
        assert e[2 * j + 1] == pytest.approx(np.cos(i / 10000 ** (2 * j / h)))


def test_sinusoidal_odd_dim():
    with pytest.raises(ValueError):
        nn.sinusoidal_embed(1, 7)


def test_adam_zero_grad_decays_moments():
    p, g = np.array([1.0, -2.0]), np.array([0.4, -0.2])
    opt = nn.Adam([(p, g)])
    opt.step()
    m, v = opt.m[0].copy(), opt.v[0].copy()
    g[...] = 0
    opt.step()
    assert np.allclose(opt.m[0], 0.9 * m) and np.allclose(opt.v[0], 0.999 * v)


def test_adam_zero_grad_fresh_state_exact():
    p = np.array([1.0, -2.0])
    opt = nn.Adam([(p, np.zeros(2))])
    for _ in range(5):
        opt.step()
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_constant_gradient_step():
    p = np.zeros(3)
    g = np.array([0.5, -3.0, 1e-3])
    opt = nn.Adam([(p, g)], lr=0.001)
    prev = p.copy()
    for _ in range(2000):
        prev[...] = p
        opt.step()
    assert np.allclose(p - prev, -0.001 * np.sign(g), rtol=1e-3)


def test_adam_quadratic_bowl():
    target = np.array([3.0, -1.5, 0.25])
    p = np.zeros(3)
    g = np.zeros(3)
    opt = nn.Adam([(p, g)], lr=0.01)
    for _ in range(5000):
        g[...] = 2 * (p - target)
        opt.step()
    assert np.abs(p - target).max() < 1e-6


def test_adam_functional_wrapper():
    p = np.zeros(2)
    opt = nn.Adam([(p, np.zeros(2))])
    nn.adam_step([p], [np.array([1.0, -1.0])], opt)
    assert opt.t == 1 and np.allclose(p, [-0.001, 0.001])


@given(st.lists(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                       elements=st.floats(-1e6, 1e6, width=32)), min_size=1, max_size=5),
       st.dictionaries(st.sampled_from("abc"), st.integers(0, 100)))
@settings(max_examples=40, deadline=None)
def test_checkpoint_roundtrip_fuzz(tmp_path_factory, arrs, header):
    path = tmp_path_factory.mktemp("ck") / "m.uclm"
    nn.save_arrays(path, header, arrs)
    raw = path.read_bytes()
    meta, back = nn.load_arrays(path)
    assert all(np.array_equal(a, b) for a, b in zip(arrs, back))
    assert {k: meta[k] for k in header} == header
    nn.save_arrays(path, {k: meta[k] for k in header}, back)
    assert path.read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        nn.load_arrays(p)
    nn.save_arrays(p, {}, [np.zeros(3, dtype=np.float32)])
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(ValueError):
        nn.load_arrays(p)
