"""Dense numeric substrate: RoPE, blocked causal GQA attention and its
backward pass, losses, AdamW and the cosine schedule.

Matrices are plain 2-D numpy arrays in token-major layout. Storage is
float32; every op computes in the dtype it is given, so float64 inputs
give float64 results (the finite-difference checks rely on that).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, TrainingError

ATTN_CHUNK = 128
# rows are always pushed through BLAS in padded blocks of this height so a
# row's result never depends on how many rows share the call
ROW_BLOCK = 64
KL_EPS = 1e-9


@dataclass(frozen=True)
class AttentionGeometry:
    n_q_heads: int
    n_kv_heads: int
    d_head: int

    def __post_init__(self):
        if min(self.n_q_heads, self.n_kv_heads, self.d_head) < 1:
            raise ConfigError(f"non-positive attention geometry: {self}")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_q_heads={self.n_q_heads} not divisible by n_kv_heads={self.n_kv_heads}"
            )
        if self.d_head % 2:
            raise ConfigError(f"d_head={self.d_head} must be even for RoPE")

    @property
    def gqa_group(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def d_kv(self) -> int:
        return self.n_kv_heads * self.d_head

    @property
    def d_q(self) -> int:
        return self.n_q_heads * self.d_head


class MemoryMeter:
    """Counts bytes of auxiliary (intermediate) arrays and keeps the peak.

    Kernels that accept a meter charge every scratch array they allocate and
    release it when it goes out of use, so ``peak`` is the high-water mark of
    live scratch memory for the call.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def charge(self, *arrays):
        for a in arrays:
            self.current += a.nbytes
        self.peak = max(self.peak, self.current)

    def release(self, *arrays):
        for a in arrays:
            self.current -= a.nbytes


def _charge(meter, *arrays):
    if meter is not None:
        meter.charge(*arrays)


def _release(meter, *arrays):
    if meter is not None:
        meter.release(*arrays)


def _float_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    n = a.shape[0]
    blocks = _pad_rows(a, ROW_BLOCK).reshape(-1, ROW_BLOCK, a.shape[1])
    return (blocks @ b).reshape(-1, b.shape[1])[:n]


def _pad_rows(x: np.ndarray, block: int, axis: int = 0) -> np.ndarray:
    n = x.shape[axis]
    extra = -n % block if n else block
    if not extra:
        return x
    width = [(0, 0)] * x.ndim
    width[axis] = (0, extra)
    return np.pad(x, width)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of squared elementwise differences."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


# --------------------------------------------------------------------------- #
# RoPE
# --------------------------------------------------------------------------- #
def rope_angles(positions, d_head: int, base: float = 10000.0) -> np.ndarray:
    """[len(positions), d_head/2] rotation angles in float64."""
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope_apply(x: np.ndarray, positions, geometry: AttentionGeometry, base: float = 10000.0):
    """Rotate each consecutive channel pair of every head by position * base^(-2i/d)."""
    d = geometry.d_head
    if d % 2:
        raise ConfigError(f"d_head={d} must be even for RoPE")
    positions = np.asarray(positions)
    if x.ndim != 2 or x.shape[1] % d or positions.shape != (x.shape[0],):
        raise DimensionError(
            f"rope_apply: x{x.shape} incompatible with d_head={d} and {positions.shape[0]} positions"
        )
    ang = rope_angles(positions, d, base)
    dt = _float_dtype(x)
    cos = np.cos(ang).astype(dt)[:, None, :]
    sin = np.sin(ang).astype(dt)[:, None, :]
    xh = x.reshape(x.shape[0], -1, d // 2, 2)
    x0, x1 = xh[..., 0], xh[..., 1]
    out = np.empty(xh.shape, dtype=dt)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    return out.reshape(x.shape)


# --------------------------------------------------------------------------- #
# Attention
# --------------------------------------------------------------------------- #
def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """[..., L, n_heads*d] -> [..., n_heads, L, d]"""
    *lead, L, w = x.shape
    return np.moveaxis(x.reshape(*lead, L, n_heads, w // n_heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """[..., H, L, d] -> [..., L, H*d]"""
    *lead, H, L, d = x.shape
    return np.moveaxis(x, -3, -2).reshape(*lead, L, H * d)


def attend(q, k, v, q_offset: int = 0, chunk: int = ATTN_CHUNK, meter=None):
    """Streaming causal softmax attention over head-batched arrays.

    q: [..., Lq, d]; k, v: [..., Lk, d]. Query row i sits at absolute
    position ``q_offset + i`` and sees keys 0..q_offset+i. Queries go in
    blocks of ROW_BLOCK rows and keys in chunks of ``chunk`` rows, both
    zero-padded to full size, with an online softmax across chunks. Scratch
    memory is O(ROW_BLOCK * chunk) per head and every block product has the
    same shape, so a row's output is identical whatever follows it.

    Returns (out, lse) where lse is the per-row log-sum-exp of the scaled
    scores, needed by :func:`attend_backward`.
    """
    dt = _float_dtype(q, k, v)
    Lq, d = q.shape[-2], q.shape[-1]
    Lk = k.shape[-2]
    if q_offset + Lq != Lk:
        raise DimensionError(f"attend: {Lq} queries at offset {q_offset} vs {Lk} keys")
    scale = dt.type(1.0 / math.sqrt(d))
    lead = q.shape[:-2]
    qp = _pad_rows(q.astype(dt, copy=False), ROW_BLOCK, axis=-2)
    kp = _pad_rows(k.astype(dt, copy=False), chunk, axis=-2)
    vp = _pad_rows(v.astype(dt, copy=False), chunk, axis=-2)
    out = np.empty(lead + (Lq, d), dtype=dt)
    lse = np.empty(lead + (Lq,), dtype=dt)
    kcol = np.arange(kp.shape[-2])
    for b0 in range(0, Lq, ROW_BLOCK):
        qb = qp[..., b0:b0 + ROW_BLOCK, :]
        qpos = q_offset + b0 + np.arange(ROW_BLOCK)
        last = min(int(qpos[-1]), Lk - 1)
        m = np.full(lead + (ROW_BLOCK,), -np.inf, dtype=dt)
        l = np.zeros(lead + (ROW_BLOCK,), dtype=dt)
        acc = np.zeros(lead + (ROW_BLOCK, d), dtype=dt)
        _charge(meter, m, l, acc)
        for start in range(0, last + 1, chunk):
            cols = kcol[start:start + chunk]
            s = (qb @ np.swapaxes(kp[..., start:start + chunk, :], -1, -2)) * scale
            s[..., (cols[None, :] > qpos[:, None]) | (cols[None, :] >= Lk)] = -np.inf
            m_new = np.maximum(m, s.max(axis=-1))
            p = np.exp(s - m_new[..., None])
            alpha = np.exp(m - m_new)
            _charge(meter, s, p)
            l = l * alpha + p.sum(axis=-1)
            acc = acc * alpha[..., None] + p @ vp[..., start:start + chunk, :]
            m = m_new
            _release(meter, s, p)
        n = min(ROW_BLOCK, Lq - b0)
        out[..., b0:b0 + n, :] = (acc / l[..., None])[..., :n, :]
        lse[..., b0:b0 + n] = (m + np.log(l))[..., :n]
        _release(meter, m, l, acc)
    return out, lse


def attend_backward(q, k, v, out, lse, d_out, q_offset: int = 0, chunk: int = ATTN_CHUNK, meter=None):
    """Gradients of :func:`attend` wrt k and v (queries are never trained)."""
    dt = _float_dtype(q, k, v, d_out)
    Lq, d = q.shape[-2], q.shape[-1]
    Lk = k.shape[-2]
    scale = dt.type(1.0 / math.sqrt(d))
    delta = np.sum(d_out * out, axis=-1)
    dk = np.zeros(k.shape, dtype=dt)
    dv = np.zeros(v.shape, dtype=dt)
    _charge(meter, delta)
    qpos = q_offset + np.arange(Lq)
    # tiles of ROW_BLOCK queries x chunk keys keep the scratch independent of L
    for start in range(0, Lk, chunk):
        stop = min(start + chunk, Lk)
        cols = np.arange(start, stop)
        kc, vc = k[..., start:stop, :], v[..., start:stop, :]
        for r0 in range(max(0, start - q_offset), Lq, ROW_BLOCK):
            r1 = min(r0 + ROW_BLOCK, Lq)
            qs, dos = q[..., r0:r1, :], d_out[..., r0:r1, :]
            s = (qs @ np.swapaxes(kc, -1, -2)) * scale
            p = np.exp(s - lse[..., r0:r1, None])
            p[..., cols[None, :] > qpos[r0:r1, None]] = 0.0
            dv[..., start:stop, :] += np.swapaxes(p, -1, -2) @ dos
            dp = dos @ np.swapaxes(vc, -1, -2)
            ds = p * (dp - delta[..., r0:r1, None])
            _charge(meter, s, p, dp, ds)
            dk[..., start:stop, :] += (np.swapaxes(ds, -1, -2) @ qs) * scale
            _release(meter, s, p, dp, ds)
    _release(meter, delta)
    return dk, dv


def _check_qkv(q, k, v, geometry: AttentionGeometry):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention inputs must be 2-D token-major matrices")
    if q.shape[1] != geometry.d_q or k.shape[1] != geometry.d_kv or v.shape[1] != geometry.d_kv:
        raise DimensionError(
            f"attention widths q={q.shape[1]}, k={k.shape[1]}, v={v.shape[1]} "
            f"do not match geometry (d_q={geometry.d_q}, d_kv={geometry.d_kv})"
        )
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise DimensionError(f"row counts differ: q={q.shape[0]}, k={k.shape[0]}, v={v.shape[0]}")


def expand_kv(x: np.ndarray, group: int) -> np.ndarray:
    """[..., n_kv, L, d] -> [..., n_kv*group, L, d], query head h reads kv head h // group."""
    return np.repeat(x, group, axis=-3) if group > 1 else x


def reduce_kv(x: np.ndarray, group: int) -> np.ndarray:
    """Transpose of :func:`expand_kv`: sum gradients over each query group."""
    if group == 1:
        return x
    *lead, H, L, d = x.shape
    return x.reshape(*lead, H // group, group, L, d).sum(axis=-3)


def causal_attention(q, k, v, geometry: AttentionGeometry, chunk: int = ATTN_CHUNK, meter=None):
    """Per-head causal softmax(q k^T / sqrt(d)) v for post-RoPE q and k."""
    _check_qkv(q, k, v, geometry)
    g = geometry.gqa_group
    q3 = split_heads(q, geometry.n_q_heads)
    k3 = expand_kv(split_heads(k, geometry.n_kv_heads), g)
    v3 = expand_kv(split_heads(v, geometry.n_kv_heads), g)
    out, _ = attend(q3, k3, v3, chunk=chunk, meter=meter)
    return merge_heads(out)


def attention_grad_kv(q, k, v, upstream, geometry: AttentionGeometry, chunk: int = ATTN_CHUNK):
    """(dK, dV) of causal_attention's output contracted with ``upstream``."""
    _check_qkv(q, k, v, geometry)
    if upstream.shape != q.shape:
        raise DimensionError(f"upstream {upstream.shape} does not match output {q.shape}")
    g = geometry.gqa_group
    q3 = split_heads(q, geometry.n_q_heads)
    k3 = expand_kv(split_heads(k, geometry.n_kv_heads), g)
    v3 = expand_kv(split_heads(v, geometry.n_kv_heads), g)
    out, lse = attend(q3, k3, v3, chunk=chunk)
    dk, dv = attend_backward(q3, k3, v3, out, lse, split_heads(upstream, geometry.n_q_heads), chunk=chunk)
    return merge_heads(reduce_kv(dk, g)), merge_heads(reduce_kv(dv, g))


# --------------------------------------------------------------------------- #
# QK-KL
# --------------------------------------------------------------------------- #
def _causal_probs(q3, k3):
    L, d = q3.shape[-2], q3.shape[-1]
    s = (q3 @ np.swapaxes(k3, -1, -2)) / math.sqrt(d)
    s[..., np.triu(np.ones((L, L), dtype=bool), 1)] = -np.inf
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def qk_kl_heads(q3, k_true3, k_recon3, meter=None, with_grad: bool = False):
    """KL(A || A~) of causal attention rows, head-batched.

    Returns the loss averaged over rows and every leading (head/layer) index
    and, when ``with_grad``, its gradient wrt ``k_recon3``. Both L x L
    probability matrices are materialized; that is the point of this loss.
    """
    L, d = q3.shape[-2], q3.shape[-1]
    a = _causal_probs(q3, k_true3)
    a_t = _causal_probs(q3, k_recon3)
    _charge(meter, a, a_t)
    log_ratio = np.log(np.maximum(a, KL_EPS)) - np.log(np.maximum(a_t, KL_EPS))
    _charge(meter, log_ratio)
    n_rows = L * int(np.prod(q3.shape[:-2], dtype=np.int64))
    loss = float(np.sum(a * log_ratio, dtype=np.float64) / n_rows)
    _release(meter, log_ratio)
    grad = None
    if with_grad:
        # d/dS~ of -sum_j A_ij log A~_ij = A~_ij - A_ij (rows of A sum to 1)
        ds = (a_t - a) / n_rows
        _charge(meter, ds)
        grad = (np.swapaxes(ds, -1, -2) @ q3) / math.sqrt(d)
        _release(meter, ds)
    _release(meter, a, a_t)
    return loss, grad


def qk_kl_loss(q, k_true, k_recon, geometry: AttentionGeometry, meter=None) -> float:
    """(1/L) sum_i KL(A_i || A~_i), averaged over query heads."""
    _check_qkv(q, k_true, k_recon, geometry)
    g = geometry.gqa_group
    q3 = split_heads(q, geometry.n_q_heads)
    kt = expand_kv(split_heads(k_true, geometry.n_kv_heads), g)
    kr = expand_kv(split_heads(k_recon, geometry.n_kv_heads), g)
    loss, _ = qk_kl_heads(q3, kt, kr, meter=meter)
    return loss


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #
def adamw_step(w, g, m, v, step: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One AdamW update with decoupled decay. Returns new (w, m, v)."""
    if step < 1:
        raise ConfigError(f"AdamW step must be >= 1, got {step}")
    if w.shape != g.shape or w.shape != m.shape or w.shape != v.shape:
        raise DimensionError("adamw_step: weights, grads and moments must be congruent")
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient at step {step}")
    b1, b2 = betas
    w_dtype = w.dtype
    dt = w_dtype.type
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * (g * g)
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    w = w * dt(1 - lr * weight_decay) - dt(lr) * m_hat / (np.sqrt(v_hat) + eps)
    return w.astype(w_dtype, copy=False), m, v


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ConfigError("cosine schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
