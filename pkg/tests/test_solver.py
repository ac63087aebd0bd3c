import io

import numpy as np
import pytest

from uclsketch.core import SketchConfig, TrainConfig
from uclsketch.dataplane import Snapshot, counter_scale
from uclsketch.experiment import ingest
from uclsketch.sensing import SketchOperator
from uclsketch.solver import (DivergenceError, SlidingWindow, SolverModel, TransformSpec, allocate,
                              apply_transform, forward_bucket, loss_and_grad, normalize, recover_full,
                              train, transform_increments)
from uclsketch.streamgen import ZipfSpec, generate_arrays


def snap(grid):
    grid = np.asarray(grid, dtype=np.int64)
    d, w = grid.shape
    return Snapshot(grid.ravel(), 1000, 1, counter_scale(grid), d, w, False)


def test_normalize_scale():
    y, sc = normalize(snap([[1, 5, 2], [9, 0, 3]]))
    assert sc == 5 and y[1] == 1.0


def test_normalize_uniform_and_zero():
    y, sc = normalize(snap(np.full((2, 4), 7)))
    assert sc == 7 and (y == 1.0).all()
    assert normalize(snap(np.zeros((2, 4)))) == (None, 0)


def small_model(**kw):
    base = dict(depth=2, width=8, hidden=8, bucket_len=10, seed=0)
    base.update(kw)
    return SolverModel(**base)


def test_forward_bucket_range_and_distinct():
    m = small_model()
    y = np.random.default_rng(0).random(16)
    a = forward_bucket(m, y, 0)
    b = forward_bucket(m, y, 1)
    assert ((a > 0) & (a < 1)).all() and a.shape == (10,)
    assert not np.allclose(a, b)
    with pytest.raises(IndexError):
        forward_bucket(m, y, 3, n=25)


def test_zero_input_zero_head_is_half():
    m = small_model()
    m.head.W[...] = 0
    m.head.b[...] = 0
    assert np.all(forward_bucket(m, np.zeros(16), 2) == 0.5)


def test_embedding_starts_as_identity_modulation():
    m = small_model()
    assert (m.embed.b[:m.hidden] == 1).all() and (m.embed.b[m.hidden:] == 0).all()


@pytest.mark.parametrize("n,expect_buckets", [(10, 1), (11, 2)])
def test_recover_padding(n, expect_buckets):
    m = small_model()
    s = snap(np.random.default_rng(1).integers(1, 50, size=(2, 8)))
    out = recover_full(m, s, n)
    assert out.shape == (n,) and out.dtype == np.int64 and (out >= 0).all()
    assert m.n_buckets_for(n) == expect_buckets
    y, _ = normalize(s)
    last = forward_bucket(m, y, expect_buckets - 1)
    raw = recover_full(m, s, n, raw=True)
    assert np.allclose(raw[(expect_buckets - 1) * 10:], last[:n - (expect_buckets - 1) * 10] * s.scale)


def test_scale_equivariance_of_reports():
    m = small_model()
    grid = np.random.default_rng(2).integers(1, 40, size=(2, 8))
    a = recover_full(m, snap(grid), 20, raw=True)
    b = recover_full(m, snap(2 * grid), 20, raw=True)
    assert np.allclose(b, 2 * a, rtol=1e-12)


def test_param_count_independent_of_n():
    m = small_model()
    d, w, h, L = 2, 8, 8, 10
    expected = (w * h + h) + 3 * (h * h + h) + (d * h * h + h) + (h * 2 * h + 2 * h) + 2 * (h * h + h) + (h * L + L)
    assert m.param_count() == expected
    y = np.random.default_rng(0).random((1, 16))
    for n in (5, 50, 500):
        assert m.recover(y, n)[0].shape == (1, n)
    assert m.param_count() == expected


def test_allocate_examples():
    assert allocate(np.array([30, 10]), 1000).tolist() == [750, 250]
    assert allocate(np.array([1, 1, 1]), 10).tolist() == [4, 3, 3]
    assert allocate(np.zeros(3), 5).tolist() == [2, 2, 1]
    assert allocate(np.array([5.0]), 0).tolist() == [0]


def test_allocate_sums_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = rng.random(rng.integers(1, 30)) * rng.choice([1, 1e-6, 1e6])
        c = int(rng.integers(0, 5000))
        a = allocate(w, c)
        assert a.sum() == c and (a >= 0).all()


def test_identity_transform():
    x = np.array([0.5, 0.2, 0.1])
    spec = TransformSpec(0, np.array([0]), cold_fraction=0.0)
    assert np.array_equal(apply_transform(x, spec, scale=10.0), x)


def test_transform_mass_accounting():
    rng = np.random.default_rng(3)
    x = rng.random(100) * 5
    hot = np.array([1, 7, 9, 40])
    spec = TransformSpec(1000, hot, 0.05)
    delta = transform_increments(x, spec, rng)
    assert delta.sum() == 1000 + int(np.ceil(0.05 * 96))
    assert delta[hot].sum() == 1000
    cold = np.setdiff1d(np.arange(100), hot)
    assert set(np.unique(delta[cold])) <= {0.0, 1.0}
    xp = apply_transform(x / 4.0, spec, 4.0, np.random.default_rng(3))
    assert np.isclose(((xp - x / 4.0) * 4.0).sum(), delta.sum())


def test_transform_bad_hot_index():
    with pytest.raises(IndexError):
        transform_increments(np.ones(3), TransformSpec(5, np.array([3])), np.random.default_rng(0))


def test_sliding_window_evicts_oldest():
    w = SlidingWindow(3)
    snaps = [snap(np.full((1, 2), i + 1)) for i in range(5)]
    for s in snaps:
        w.push(s)
    assert w.items() == snaps[2:]


def toy_problem(n=37, d=2, w=8, seed=0):
    rng = np.random.default_rng(seed)
    A = SketchOperator.from_keys([i.to_bytes(4, "big") for i in range(n)], d, w, 1, 4)
    return A, rng.random((3, d * w)) * 4, rng.random((3, n)) * 0.5


def test_loss_specialization():
    A, Y, D = toy_problem()
    m = small_model()
    X, _ = m.recover(Y, A.n)
    meas = ((A.csr() @ X.T).T - Y) ** 2
    parts = loss_and_grad(m, Y, A, None, 0.0, backward=False)
    assert parts.sparsity == 0 and parts.equivariance == 0
    assert np.isclose(parts.measurement, meas.mean())
    zero = loss_and_grad(m, Y, A, np.zeros_like(D), 0.0, backward=False)
    Xh, _ = m.recover((A.csr() @ X.T).T, A.n)
    assert np.isclose(zero.equivariance, ((Xh - X) ** 2).mean())


def directional_fd(m, Y, A, D, lam, rng, probes=30, h=1e-5):
    m.zero_grad()
    loss_and_grad(m, Y, A, D, lam)
    params = [p for p, _ in m.params()]
    grads = [g.copy() for _, g in m.params()]
    worst = 0.0
    for _ in range(probes):
        vs = [rng.normal(size=p.shape) for p in params]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        for p, v in zip(params, vs):
            p += h * v
        lp = loss_and_grad(m, Y, A, D, lam, backward=False).total
        for p, v in zip(params, vs):
            p -= 2 * h * v
        lm = loss_and_grad(m, Y, A, D, lam, backward=False).total
        for p, v in zip(params, vs):
            p += h * v
        fd = (lp - lm) / (2 * h)
        an = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


@pytest.mark.parametrize("shared", [True, False])
def test_gradient_matches_finite_differences(shared):
    A, Y, D = toy_problem()
    m = small_model(shared=shared, n_buckets=4)
    rng = np.random.default_rng(5)
    for p, _ in m.params():
        if p.ndim == 1 or (not shared and p.ndim == 2):
            p += rng.normal(0, 0.05, size=p.shape)  # keep ReLU pre-activations off exact zero
    assert directional_fd(m, Y, A, D, 0.1, rng) < 1e-4


def test_divergence_detected():
    A, Y, _ = toy_problem()
    Y[0, 0] = np.nan
    with pytest.raises(DivergenceError):
        loss_and_grad(small_model(), Y, A, None, 0.1)


@pytest.fixture(scope="module")
def toy_state():
    keys, vals = generate_arrays(ZipfSpec(1.3, 200, 20_000, seed=3))
    cfg = SketchConfig(depth=2, width=64, hf_slots=8, bf_bits=4096, bf_hashes=3, sampling_interval=100)
    return ingest(cfg, 11, keys, vals, 64)


def fit(state, epochs=100, **kw):
    m = SolverModel(2, 64, hidden=32, bucket_len=64, seed=0)
    tc = TrainConfig(epochs=epochs, patience=epochs, **kw)
    rep = train(m, state.window[-128:], state.operator, state.registry.hot_indices(), tc, seed=0)
    return m, rep


def test_toy_training_converges(toy_state):
    assert 190 <= toy_state.operator.n <= 200
    m, rep = fit(toy_state)
    assert rep.epochs[-1].total < 0.2 * rep.epochs[0].total
    y, _ = normalize(toy_state.final)
    x, _ = m.recover(y[None], toy_state.operator.n)
    assert np.linalg.norm(toy_state.operator.apply(x[0]) - y) / np.linalg.norm(y) < 0.1


def test_training_deterministic(toy_state):
    a, ra = fit(toy_state, epochs=3)
    b, rb = fit(toy_state, epochs=3)
    assert all(np.array_equal(p, q) for (p, _), (q, _) in zip(a.params(), b.params()))
    fa, fb = io.StringIO(), io.StringIO()
    ra.to_csv(fa)
    rb.to_csv(fb)
    assert fa.getvalue() == fb.getvalue()


def test_report_columns(toy_state):
    _, rep = fit(toy_state, epochs=2)
    buf = io.StringIO()
    rep.to_csv(buf)
    assert buf.getvalue().splitlines()[0] == "epoch,loss_measurement,loss_equiv,loss_sparse,total"
    _, rep = fit(toy_state, epochs=2, equivariance=False)
    buf = io.StringIO()
    rep.to_csv(buf)
    assert "loss_equiv" not in buf.getvalue().splitlines()[0]


def test_early_stop_on_flat_loss(toy_state):
    m = SolverModel(2, 64, hidden=32, bucket_len=64, seed=0)
    window = toy_state.window[-16:]
    m.calibrate(np.stack([normalize(s)[0] for s in window]), toy_state.operator.n)
    before = m.get_weights()
    tc = TrainConfig(epochs=50, patience=4, lr=1e-300, equivariance=False)
    rep = train(m, window, toy_state.operator, toy_state.registry.hot_indices(), tc)
    assert rep.stopped_early and rep.best_epoch == 1 and len(rep.epochs) == 5
    assert max(np.abs(a - b[0]).max() for a, b in zip(before, m.params())) < 1e-200


def test_checkpoint_roundtrip(tmp_path):
    m = small_model()
    p = tmp_path / "m.uclm"
    m.save(p)
    back = SolverModel.load(p)
    back.save(tmp_path / "m2.uclm")
    assert p.read_bytes() == (tmp_path / "m2.uclm").read_bytes()
    assert all(np.array_equal(a.astype(np.float32), b) for (a, _), (b, _) in zip(m.params(), back.params()))
