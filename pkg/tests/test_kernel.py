import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echokv.errors import ConfigError, DimensionError, TrainingError
from echokv.kernel import (
    AttentionGeometry,
    MemoryMeter,
    adamw_step,
    attention_grad_kv,
    causal_attention,
    cosine_lr,
    matmul,
    mse,
    qk_kl_loss,
    rope_apply,
)


def naive_attention(q, k, v, geom):
    """Dense float64 reference: full L x L scores, explicit mask."""
    q, k, v = (np.asarray(a, np.float64) for a in (q, k, v))
    L, d = q.shape[0], geom.d_head
    out = np.zeros_like(q)
    for h in range(geom.n_q_heads):
        kvh = h // geom.gqa_group
        qh = q[:, h * d:(h + 1) * d]
        kh = k[:, kvh * d:(kvh + 1) * d]
        vh = v[:, kvh * d:(kvh + 1) * d]
        s = qh @ kh.T / math.sqrt(d)
        s[np.triu_indices(L, 1)] = -np.inf
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        out[:, h * d:(h + 1) * d] = p @ vh
    return out


def kl_direct(q, kt, kr, geom):
    """Triple loop over heads, rows and columns."""
    q, kt, kr = (np.asarray(a, np.float64) for a in (q, kt, kr))
    L, d = q.shape[0], geom.d_head
    total = 0.0
    for h in range(geom.n_q_heads):
        kvh = h // geom.gqa_group
        qh = q[:, h * d:(h + 1) * d]
        for i in range(L):
            def row(k):
                s = [float(qh[i] @ k[j, kvh * d:(kvh + 1) * d]) / math.sqrt(d) for j in range(i + 1)]
                m = max(s)
                e = [math.exp(x - m) for x in s]
                z = sum(e)
                return [x / z for x in e]
            a, b = row(kt), row(kr)
            total += sum(ai * (math.log(max(ai, 1e-9)) - math.log(max(bi, 1e-9))) for ai, bi in zip(a, b))
    return total / (L * geom.n_q_heads)


def rand_qkv(rng, L, geom, dtype=np.float32):
    q = rng.standard_normal((L, geom.d_q)).astype(dtype)
    k = rng.standard_normal((L, geom.d_kv)).astype(dtype)
    v = rng.standard_normal((L, geom.d_kv)).astype(dtype)
    return q, k, v


# ---- geometry ----

def test_geometry_derived_fields():
    g = AttentionGeometry(8, 4, 16)
    assert (g.gqa_group, g.d_kv, g.d_q) == (2, 64, 128)


@pytest.mark.parametrize("args", [(6, 4, 16), (8, 4, 15), (0, 1, 2)])
def test_geometry_rejects_bad_shapes(args):
    with pytest.raises(ConfigError):
        AttentionGeometry(*args)


# ---- matmul / mse ----

def test_matmul_identity_and_hand_case():
    b = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(matmul(np.eye(2, dtype=np.float32), b), b)
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_matmul_against_float64():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    ref = a.astype(np.float64) @ b.astype(np.float64)
    assert np.max(np.abs(matmul(a, b) - ref)) < 1e-4


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_mse_cases():
    x = np.random.default_rng(1).standard_normal((4, 5)).astype(np.float32)
    assert mse(x, x) == 0.0
    assert mse(np.array([[1.0, 2.0]]), np.zeros((1, 2))) == 2.5
    y = x + np.float32(0.3)
    ref = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    assert abs(mse(x, y) - ref) / ref < 1e-5
    assert mse(x, y) == mse(y, x)
    with pytest.raises(DimensionError):
        mse(x, x[:2])


# ---- RoPE ----

def test_rope_position_zero_is_identity():
    g = AttentionGeometry(2, 2, 4)
    x = np.random.default_rng(0).standard_normal((3, 8)).astype(np.float32)
    np.testing.assert_array_equal(rope_apply(x, [0, 0, 0], g), x)


def test_rope_one_radian_pair():
    g = AttentionGeometry(1, 1, 2)
    x = np.array([[0.3, -1.2]])
    out = rope_apply(x, [1], g)
    c, s = math.cos(1.0), math.sin(1.0)
    np.testing.assert_allclose(out[0], [0.3 * c + 1.2 * s, 0.3 * s - 1.2 * c], atol=1e-12)


def test_rope_leaves_input_untouched():
    g = AttentionGeometry(2, 2, 4)
    x = np.ones((2, 8), np.float32)
    rope_apply(x, [3, 7], g)
    assert np.all(x == 1)


def test_rope_odd_head_dim_is_config_error():
    g = AttentionGeometry.__new__(AttentionGeometry)
    object.__setattr__(g, "n_q_heads", 1)
    object.__setattr__(g, "n_kv_heads", 1)
    object.__setattr__(g, "d_head", 3)
    with pytest.raises(ConfigError):
        rope_apply(np.zeros((1, 3)), [0], g)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), pos=st.integers(-5000, 5000), heads=st.sampled_from([1, 2, 4]),
       d=st.sampled_from([2, 4, 8, 16]))
def test_rope_isometry_and_inverse(seed, pos, heads, d):
    g = AttentionGeometry(heads, heads, d)
    x = np.random.default_rng(seed).standard_normal((3, heads * d)).astype(np.float32)
    p = [pos] * 3
    y = rope_apply(x, p, g)
    pairs = lambda a: np.linalg.norm(a.reshape(3, -1, 2).astype(np.float64), axis=-1)
    np.testing.assert_allclose(pairs(y), pairs(x), atol=1e-5)
    np.testing.assert_allclose(rope_apply(y, [-pos] * 3, g), x, atol=1e-5)


# ---- attention ----

def test_attention_single_token_returns_value():
    g = AttentionGeometry(4, 2, 4)
    q, k, v = rand_qkv(np.random.default_rng(0), 1, g)
    out = causal_attention(q, k, v, g)
    np.testing.assert_allclose(out, np.repeat(v.reshape(2, 4), 2, axis=0).reshape(1, -1), atol=1e-7)


def test_attention_identical_keys_is_running_mean():
    g = AttentionGeometry(2, 2, 4)
    rng = np.random.default_rng(3)
    q, _, v = rand_qkv(rng, 6, g)
    k = np.tile(rng.standard_normal((1, g.d_kv)).astype(np.float32), (6, 1))
    out = causal_attention(q, k, v, g)
    ref = np.cumsum(v.astype(np.float64), 0) / np.arange(1, 7)[:, None]
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_attention_seed42_small_case():
    g = AttentionGeometry(1, 1, 2)
    q, k, v = rand_qkv(np.random.default_rng(42), 4, g)
    assert np.max(np.abs(causal_attention(q, k, v, g) - naive_attention(q, k, v, g))) < 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_attention_matches_dense_reference(seed):
    rng = np.random.default_rng(seed)
    heads = [(1, 1), (2, 1), (4, 2), (4, 4), (8, 2)][seed % 5]
    g = AttentionGeometry(heads[0], heads[1], int(rng.choice([2, 4, 6, 8])))
    L = int(rng.integers(1, 17))
    q, k, v = rand_qkv(rng, L, g)
    chunk = int(rng.integers(1, 8)) if seed % 2 else 128
    out = causal_attention(q, k, v, g, chunk=chunk)
    assert np.max(np.abs(out - naive_attention(q, k, v, g))) < 1e-4


def test_attention_long_sequence_crosses_chunks():
    g = AttentionGeometry(4, 2, 8)
    q, k, v = rand_qkv(np.random.default_rng(9), 300, g)
    assert np.max(np.abs(causal_attention(q, k, v, g) - naive_attention(q, k, v, g))) < 1e-4


def test_attention_streaming_memory_is_linear():
    g = AttentionGeometry(2, 2, 8)
    peaks = []
    for L in (256, 1024):
        q, k, v = rand_qkv(np.random.default_rng(0), L, g)
        meter = MemoryMeter()
        causal_attention(q, k, v, g, meter=meter)
        peaks.append(meter.peak)
    # 4x longer: quadratic would be 16x
    assert peaks[1] <= 4.5 * peaks[0]


def test_attention_shape_errors():
    g = AttentionGeometry(4, 2, 4)
    q, k, v = rand_qkv(np.random.default_rng(0), 3, g)
    with pytest.raises(DimensionError):
        causal_attention(q[:, :8], k, v, g)
    with pytest.raises(DimensionError):
        causal_attention(q, k[:2], v, g)


def test_attention_deterministic():
    g = AttentionGeometry(4, 2, 8)
    q, k, v = rand_qkv(np.random.default_rng(5), 50, g)
    assert causal_attention(q, k, v, g).tobytes() == causal_attention(q, k, v, g).tobytes()


# ---- attention backward ----

def test_grad_zero_upstream():
    g = AttentionGeometry(2, 1, 4)
    q, k, v = rand_qkv(np.random.default_rng(0), 5, g)
    dk, dv = attention_grad_kv(q, k, v, np.zeros_like(q), g)
    assert not dk.any() and not dv.any()


def test_grad_single_token():
    g = AttentionGeometry(1, 1, 4)
    q, k, v = rand_qkv(np.random.default_rng(0), 1, g)
    up = np.random.default_rng(1).standard_normal(q.shape).astype(np.float32)
    dk, dv = attention_grad_kv(q, k, v, up, g)
    np.testing.assert_allclose(dv, up, atol=1e-7)
    np.testing.assert_allclose(dk, 0, atol=1e-7)


def _fd_check(L, geom, seed, chunk=128):
    rng = np.random.default_rng(seed)
    q, k, v = rand_qkv(rng, L, geom, np.float64)
    up = rng.standard_normal(q.shape)
    dk, dv = attention_grad_kv(q, k, v, up, geom, chunk=chunk)
    h = 1e-3

    def f(kk, vv):
        return float(np.sum(naive_attention(q, kk, vv, geom) * up))

    for which, grad in (("k", dk), ("v", dv)):
        num = np.zeros_like(grad)
        for idx in np.ndindex(*grad.shape):
            kp, vp = k.copy(), v.copy()
            km, vm = k.copy(), v.copy()
            if which == "k":
                kp[idx] += h
                km[idx] -= h
            else:
                vp[idx] += h
                vm[idx] -= h
            num[idx] = (f(kp, vp) - f(km, vm)) / (2 * h)
        rel = np.linalg.norm(grad - num) / max(np.linalg.norm(num), 1e-12)
        assert rel < 1e-3, (which, rel)
        big = np.abs(num) > 1e-2
        assert np.all(np.abs(grad - num)[big] / np.abs(num)[big] < 1e-3)


def test_grad_matches_finite_differences_l3_d2():
    _fd_check(3, AttentionGeometry(1, 1, 2), 0)


@pytest.mark.parametrize("L,heads,d,seed,chunk", [(6, (4, 2), 4, 1, 128), (5, (2, 1), 4, 2, 2), (6, (3, 3), 2, 3, 4)])
def test_grad_matches_finite_differences_gqa(L, heads, d, seed, chunk):
    _fd_check(L, AttentionGeometry(heads[0], heads[1], d), seed, chunk)


# ---- QK-KL ----

def test_kl_identical_is_zero():
    g = AttentionGeometry(4, 2, 4)
    q, k, _ = rand_qkv(np.random.default_rng(0), 7, g)
    assert qk_kl_loss(q, k, k.copy(), g) == 0.0


def test_kl_single_row_is_zero():
    g = AttentionGeometry(2, 2, 4)
    q, k, v = rand_qkv(np.random.default_rng(0), 1, g)
    assert qk_kl_loss(q, k, v, g) == 0.0


def test_kl_matches_direct_sum():
    g = AttentionGeometry(2, 1, 4)
    rng = np.random.default_rng(7)
    q, kt, kr = rand_qkv(rng, 3, g, np.float64)
    ref = kl_direct(q, kt, kr, g)
    assert abs(qk_kl_loss(q, kt, kr, g) - ref) / ref < 1e-4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), L=st.integers(1, 12), scale=st.floats(0.0, 3.0))
def test_kl_nonnegative(seed, L, scale):
    g = AttentionGeometry(4, 2, 4)
    rng = np.random.default_rng(seed)
    q, kt, _ = rand_qkv(rng, L, g)
    kr = kt + np.float32(scale) * rng.standard_normal(kt.shape).astype(np.float32)
    assert qk_kl_loss(q, kt, kr, g) >= -1e-7


def test_kl_materializes_quadratic_scratch():
    g = AttentionGeometry(1, 1, 4)
    peaks = []
    for L in (64, 256):
        q, k, _ = rand_qkv(np.random.default_rng(0), L, g)
        meter = MemoryMeter()
        qk_kl_loss(q, k, k * 0.5, g, meter=meter)
        peaks.append(meter.peak)
    assert peaks[1] >= 15 * peaks[0]


# ---- optimizer / schedule ----

def test_adamw_zero_grad_no_decay_is_noop():
    w = np.array([1.0, -2.0], np.float32)
    z = np.zeros_like(w)
    w2, _, _ = adamw_step(w, z, z, z, 1, 0.1, weight_decay=0.0)
    np.testing.assert_array_equal(w2, w)


def test_adamw_first_step_hand_trace():
    w = np.array([0.5])
    g = np.array([1.0])
    z = np.zeros(1)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    m = (1 - b1) * 1.0
    v = (1 - b2) * 1.0
    expected = 0.5 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    w2, m2, v2 = adamw_step(w, g, z, z, 1, lr, (b1, b2), eps, 0.0)
    assert abs(w2[0] - expected) < 1e-12
    assert abs(w2[0] - 0.4) < 1e-6
    assert m2[0] == pytest.approx(0.1) and v2[0] == pytest.approx(0.001)


def test_adamw_decoupled_decay():
    w = np.array([2.0])
    z = np.zeros(1)
    w2, _, _ = adamw_step(w, z, z, z, 1, 0.1, weight_decay=0.5)
    assert w2[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_converges_on_quadratic():
    w = np.array([1.0])
    m = v = np.zeros(1)
    for t in range(1, 101):
        w, m, v = adamw_step(w, 2 * w, m, v, t, 0.1, weight_decay=0.0)
    assert abs(w[0]) < 0.1


def test_adamw_rejects_non_finite_and_bad_step():
    w = np.zeros(2)
    with pytest.raises(TrainingError):
        adamw_step(w, np.array([np.nan, 0.0]), w, w, 1, 0.1)
    with pytest.raises(ConfigError):
        adamw_step(w, w, w, w, 0, 0.1)


def test_adamw_preserves_float32():
    w = np.ones(3, np.float32)
    w2, _, _ = adamw_step(w, np.ones(3, np.float32), np.zeros(3, np.float32), np.zeros(3, np.float32), 1, 1e-3)
    assert w2.dtype == np.float32


def test_cosine_schedule_points():
    assert cosine_lr(0, 100, 5e-4) == 5e-4
    assert cosine_lr(100, 100, 5e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 5e-4) == pytest.approx(2.5e-4)
    with pytest.raises(ConfigError):
        cosine_lr(0, 0, 1.0)
    with pytest.raises(ConfigError):
        cosine_lr(101, 100, 1.0)


@given(total=st.integers(1, 5000), frac=st.floats(0, 1))
def test_cosine_is_monotone_nonincreasing(total, frac):
    s = int(frac * total)
    a = cosine_lr(s, total, 1.0)
    b = cosine_lr(min(total, s + 1), total, 1.0)
    assert b <= a + 1e-15
