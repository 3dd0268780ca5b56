import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalr.errors import ConfigError, ShapeError
from scalr.gcm import (
    FastWeights,
    GcmConfig,
    GcmState,
    apply_gradient,
    fast_forward,
    gated_residual,
    gcm_apply,
    gcm_step,
    init_gcm,
    inner_gradient,
    inner_loss,
    load_gcm,
    predict_lr,
    project_qkv,
    save_gcm,
    state_size,
)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def f_oracle(w1, w2, w3, x):
    """Straight-line evaluation of W2 (SiLU(W1 x) * (W3 x)) for one vector."""
    hidden = [0.0] * w1.shape[0]
    for j in range(w1.shape[0]):
        a = 0.0
        b = 0.0
        for i in range(w1.shape[1]):
            a += w1[j, i] * x[i]
            b += w3[j, i] * x[i]
        hidden[j] = (a * (1.0 / (1.0 + np.exp(-a)))) * b
    out = np.zeros(w2.shape[0])
    for r in range(w2.shape[0]):
        acc = 0.0
        for j in range(w2.shape[1]):
            acc += w2[r, j] * hidden[j]
        out[r] = acc
    return out


def loss_oracle(w1, w2, w3, k, v, eta):
    h1, h3 = k @ w1.T, k @ w3.T
    y = (_silu(h1) * h3) @ w2.T
    return -np.sum(eta * np.sum(y * v, axis=1))


def random_weights(rng, nh, hd, ex, w2_scale=1.0):
    return FastWeights(
        rng.normal(size=(nh, hd * ex, hd)) / np.sqrt(hd),
        w2_scale * rng.normal(size=(nh, hd, hd * ex)) / np.sqrt(hd * ex),
        rng.normal(size=(nh, hd * ex, hd)) / np.sqrt(hd),
    )


def state_for(d, nh=1, ex=4, seed=0, gate=0.1, base_lr=1e-3):
    cfg = GcmConfig(d, nh, ex, base_lr, gate, seed)
    w, p = init_gcm(cfg)
    return GcmState(cfg, w, p)


@pytest.mark.parametrize(
    "nh,hd,k,expected", [(1, 64, 4, 16384), (1, 1, 1, 1), (4, 16, 2, 2048)]
)
def test_state_size_formula(nh, hd, k, expected):
    cfg = GcmConfig(nh * hd, nh, k)
    assert state_size(cfg) == expected
    w, _ = init_gcm(cfg)
    for block in w.blocks().values():
        assert block.size == expected
    assert w.size == 3 * expected


def test_config_validation():
    with pytest.raises(ConfigError):
        GcmConfig(10, 3)
    with pytest.raises(ConfigError):
        GcmConfig(8, 1, 0)
    with pytest.raises(ConfigError):
        GcmConfig(8, 1, 4, base_lr=0.0)


def test_init_deterministic_and_gate():
    a = state_for(16, seed=3)
    b = state_for(16, seed=3)
    assert a.weights.equals(b.weights)
    assert np.array_equal(a.projections.wq, b.projections.wq)
    assert not a.weights.equals(state_for(16, seed=4).weights)
    assert np.array_equal(state_for(16, gate=0.0).projections.alpha, np.zeros(16))
    assert not np.any(a.weights.w2)


def test_project_qkv_identity_and_oracle(rng):
    st_ = state_for(8)
    p = st_.projections
    x = rng.normal(size=(5, 8))
    p_id = type(p)(np.eye(8), np.eye(8), np.eye(8), p.wo, p.lr_w, p.lr_b, p.alpha)
    q, k, v = project_qkv(p_id, x)
    assert np.array_equal(q[:, 0], x) and np.array_equal(k[:, 0], x) and np.array_equal(v[:, 0], x)
    q, k, v = project_qkv(p, np.zeros((3, 8)))
    assert not q.any() and not k.any() and not v.any()
    q, _, _ = project_qkv(p, x, n_heads=2)
    assert q.shape == (5, 2, 4)
    assert np.allclose(q.reshape(5, 8), x @ p.wq.T, rtol=0, atol=1e-14)
    with pytest.raises(ShapeError):
        project_qkv(p, np.ones((2, 7)))


def test_predict_lr(rng):
    p = state_for(6).projections
    zero = type(p)(p.wq, p.wk, p.wv, p.wo, np.zeros(6), 0.0, p.alpha)
    x = rng.normal(size=(4, 6))
    assert np.allclose(predict_lr(zero, x, 1e-3), 1e-3 * np.log(2.0), rtol=0, atol=1e-18)
    assert not predict_lr(p, x, 0.0).any()
    eta = predict_lr(p, x, 1e-3)
    assert np.all(eta > 0)
    lo, hi = 0.5 * p.lr_w / (p.lr_w @ p.lr_w), 2.0 * p.lr_w / (p.lr_w @ p.lr_w)
    e = predict_lr(p, np.stack([lo, hi]), 1.0)
    assert e[1] > e[0]


def test_fast_forward_zero_blocks_and_oracle(rng):
    w = random_weights(rng, 1, 5, 3)
    x = rng.normal(size=(4, 5))
    for name in ("w1", "w3"):
        blocks = w.blocks()
        blocks[name] = np.zeros_like(blocks[name])
        assert not fast_forward(FastWeights(**blocks), x).any()
    out = fast_forward(w, x)
    for i in range(4):
        ref = f_oracle(w.w1[0], w.w2[0], w.w3[0], x[i])
        assert np.abs(out[i] - ref).max() <= 1e-13 * max(1.0, np.abs(ref).max())


def test_inner_loss_cases(rng):
    w = random_weights(rng, 1, 4, 2)
    k = rng.normal(size=(6, 4))
    v = rng.normal(size=(6, 4))
    eta = rng.uniform(0.1, 1.0, 6)
    assert inner_loss(w, k, v, np.zeros(6)) == 0.0
    assert inner_loss(w, k, np.zeros((6, 4)), eta) == 0.0
    assert np.isclose(inner_loss(w, k, v, eta), loss_oracle(w.w1[0], w.w2[0], w.w3[0], k, v, eta),
                      rtol=1e-12, atol=0)
    # single token whose memory output equals its value
    fk = fast_forward(w, k[:1])
    assert np.isclose(inner_loss(w, k[:1], fk, [0.7]), -0.7 * fk[0] @ fk[0], rtol=1e-14)


def test_inner_gradient_zero_and_linear_in_eta(rng):
    w = random_weights(rng, 2, 4, 3)
    k = rng.normal(size=(5, 2, 4))
    v = rng.normal(size=(5, 2, 4))
    eta = rng.uniform(0.1, 1.0, 5)
    g0 = inner_gradient(w, k, v, np.zeros(5))
    assert all(not b.any() for b in g0.blocks().values())
    g1 = inner_gradient(w, k, v, eta)
    g2 = inner_gradient(w, k, v, 2 * eta)
    assert g2.equals(g1.scale(2.0))


def _fd(w, k, v, eta, h=1e-5):
    out = {}
    base = {n: b[0] for n, b in w.blocks().items()}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for sgn in (1, -1):
                pert = dict(base)
                a = arr.copy()
                a[idx] += sgn * h
                pert[name] = a
                vals.append(loss_oracle(pert["w1"], pert["w2"], pert["w3"], k, v, eta))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_inner_gradient_matches_finite_differences(hd, ex, m, seed):
    r = np.random.default_rng(seed)
    w = random_weights(r, 1, hd, ex)
    k, v = r.normal(size=(m, hd)), r.normal(size=(m, hd))
    eta = r.uniform(0.1, 1.0, m)
    g = inner_gradient(w, k, v, eta)
    fd = _fd(w, k, v, eta)
    for name, block in g.blocks().items():
        a, b = block[0], fd[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(b))
        assert denom == 0 or np.linalg.norm(a - b) / denom < 1e-6


def test_apply_gradient_inverse(rng):
    w = random_weights(rng, 1, 3, 2)
    g = random_weights(rng, 1, 3, 2)
    assert apply_gradient(w, w.zeros_like()).equals(w)
    back = apply_gradient(apply_gradient(w, g), -g)
    for a, b in zip(back.blocks().values(), w.blocks().values()):
        assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_gcm_apply_cases(rng):
    w = random_weights(rng, 1, 4, 2)
    q = rng.normal(size=(3, 4))
    assert not gcm_apply(w.zeros_like(), q, np.eye(4)).any()
    assert np.array_equal(gcm_apply(w, q, np.eye(4)), fast_forward(w, q))
    wo = rng.normal(size=(4, 4))
    assert np.allclose(gcm_apply(w, q, wo), fast_forward(w, q) @ wo.T, rtol=0, atol=1e-13)
    w2 = random_weights(rng, 2, 3, 2)
    q2 = rng.normal(size=(5, 2, 3))
    heads = np.concatenate([f_oracle_rows(w2, q2, h) for h in range(2)], axis=1)
    assert np.allclose(gcm_apply(w2, q2, np.eye(6)), heads, rtol=0, atol=1e-13)


def f_oracle_rows(w, q, h):
    return np.stack([f_oracle(w.w1[h], w.w2[h], w.w3[h], row) for row in q[:, h]])


def test_gated_residual_cases(rng):
    out, x = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert np.array_equal(gated_residual(out, x, np.zeros(4)), x)
    assert np.array_equal(gated_residual(np.zeros((3, 4)), x, rng.normal(size=4)), x)
    assert np.array_equal(gated_residual(out, x, np.ones(4)), out + x)
    with pytest.raises(ShapeError):
        gated_residual(out, x, np.ones(3))


def test_gcm_step_zero_tokens_and_composition(rng):
    st_ = state_for(8, seed=2)
    new_w, out = gcm_step(st_, np.zeros((4, 8)))
    assert new_w.equals(st_.weights)
    assert not out.any()

    x = rng.normal(size=(6, 8))
    new_w, out = gcm_step(st_, x)
    p = st_.projections
    q, k, v = x @ p.wq.T, x @ p.wk.T, x @ p.wv.T
    eta = 1e-3 * np.logaddexp(0, x @ p.lr_w + p.lr_b)
    w1, w2, w3 = st_.weights.w1[0], st_.weights.w2[0], st_.weights.w3[0]
    h1, h3 = k @ w1.T, k @ w3.T
    a = _silu(h1)
    dy = -eta[:, None] * v
    g2 = dy.T @ (a * h3)
    dz = dy @ w2
    sig = 1 / (1 + np.exp(-h1))
    g1 = (dz * h3 * sig * (1 + h1 * (1 - sig))).T @ k
    g3 = (dz * a).T @ k
    n1, n2, n3 = w1 - g1, w2 - g2, w3 - g3
    ref = p.alpha * ((_silu(q @ n1.T) * (q @ n3.T)) @ n2.T @ p.wo.T) + x
    assert np.allclose(new_w.w2[0], n2, rtol=0, atol=1e-15)
    assert np.allclose(out, ref, rtol=0, atol=1e-12)
    again = gcm_step(st_, x)
    assert again[0].equals(new_w) and np.array_equal(again[1], out)


def test_snapshot_round_trip(tmp_path, rng):
    st_ = state_for(8, nh=2, ex=3, seed=9)
    st_ = GcmState(st_.config, random_weights(rng, 2, 4, 3), st_.projections)
    path = tmp_path / "gcm.sclr"
    save_gcm(path, st_)
    back = load_gcm(path)
    assert back.config == st_.config
    assert back.weights.equals(st_.weights)
    assert np.array_equal(back.projections.wo, st_.projections.wo)
    assert back.projections.lr_b == st_.projections.lr_b


def test_fast_weight_arithmetic_and_checksum(rng):
    a = random_weights(rng, 1, 3, 2)
    b = random_weights(rng, 1, 3, 2)
    assert (a + b - b).checksum() == a.checksum() or np.allclose((a + b - b).w1, a.w1)
    assert a.checksum() == a.copy().checksum()
    assert a.checksum() != b.checksum()
    with pytest.raises(ShapeError):
        FastWeights(np.zeros((1, 4, 2)), np.zeros((1, 2, 3)), np.zeros((1, 4, 2)))
