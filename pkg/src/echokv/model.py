"""Deterministic, randomly initialized GQA decoder used as the K/V source.

Keys leave the model pre-RoPE; the rotation is applied only when a layer
attends. Every forward path goes through :func:`forward`, which accepts a
per-layer hook so that compressed and pruned caches can be substituted for
the true ones without duplicating the layer math.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .kernel import (
    AttentionGeometry,
    attend,
    causal_attention,
    expand_kv,
    matmul,
    merge_heads,
    rope_apply,
    split_heads,
)

INIT_STD = 0.02
NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    geometry: AttentionGeometry = field(default_factory=lambda: AttentionGeometry(8, 4, 16))
    d_model: int = 128
    vocab: int = 256
    d_ff: int = 256
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_layers < 1 or self.vocab < 1 or self.d_ff < 1:
            raise ConfigError(f"invalid model config: {self}")
        if self.d_model != self.geometry.d_q:
            raise ConfigError(
                f"d_model={self.d_model} must equal n_q_heads*d_head={self.geometry.d_q}"
            )

    @property
    def d_kv(self) -> int:
        return self.geometry.d_kv


@dataclass
class LayerKV:
    layer: int
    k_pre_rope: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.k_pre_rope.shape != self.v.shape:
            raise DimensionError(f"layer {self.layer}: k {self.k_pre_rope.shape} vs v {self.v.shape}")

    @property
    def n_tokens(self) -> int:
        return self.k_pre_rope.shape[0]


@dataclass
class TraceBatch:
    tokens: np.ndarray
    q: list  # per layer, post-RoPE queries [L, d_q]
    kv: list  # per layer LayerKV (the K/V each layer actually attended with)
    hidden: list  # per layer residual stream after the block
    attn_out: list  # per layer attention output before the output projection
    logits: np.ndarray


class Model:
    """Immutable bundle of weights; build with :func:`init_model`."""

    def __init__(self, config: ModelConfig, weights: dict):
        self.config = config
        self.weights = weights

    @property
    def geometry(self) -> AttentionGeometry:
        return self.config.geometry

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    g = config.geometry
    shapes = [("embed", (config.vocab, config.d_model))]
    for i in range(config.n_layers):
        shapes += [
            (f"layers.{i}.wq", (config.d_model, g.d_q)),
            (f"layers.{i}.wk", (config.d_model, g.d_kv)),
            (f"layers.{i}.wv", (config.d_model, g.d_kv)),
            (f"layers.{i}.wo", (g.d_q, config.d_model)),
            (f"layers.{i}.w1", (config.d_model, config.d_ff)),
            (f"layers.{i}.w2", (config.d_ff, config.d_model)),
        ]
    shapes.append(("lm_head", (config.d_model, config.vocab)))
    weights = {
        name: (rng.standard_normal(shape) * INIT_STD).astype(np.float32) for name, shape in shapes
    }
    for a in weights.values():
        a.setflags(write=False)
    return Model(config, weights)


def _rmsnorm(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _embed(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("token sequence must be a non-empty 1-D list")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise InputError(f"token ids must lie in [0, {model.config.vocab})")
    return model.weights["embed"][tokens].astype(np.float32)


def _project(model: Model, i: int, h):
    w = model.weights
    x = _rmsnorm(h)
    return matmul(x, w[f"layers.{i}.wq"]), matmul(x, w[f"layers.{i}.wk"]), matmul(x, w[f"layers.{i}.wv"])


def _finish_block(model: Model, i: int, h, attn):
    w = model.weights
    h = h + matmul(attn, w[f"layers.{i}.wo"])
    return h + matmul(_silu(matmul(_rmsnorm(h), w[f"layers.{i}.w1"])), w[f"layers.{i}.w2"])


def forward(model: Model, tokens, kv_hook=None) -> TraceBatch:
    """Full causal forward pass.

    ``kv_hook(layer, k_pre, v)`` may return replacement (k_pre, v) for the
    layer's attention; the trace records whatever was attended with.
    """
    cfg = model.config
    g = cfg.geometry
    h = _embed(model, tokens)
    pos = np.arange(h.shape[0])
    qs, kvs, hidden, attn_outs = [], [], [], []
    for i in range(cfg.n_layers):
        q, k, v = _project(model, i, h)
        if kv_hook is not None:
            k, v = kv_hook(i, k, v)
        q_rot = rope_apply(q, pos, g, cfg.rope_base)
        attn = causal_attention(q_rot, rope_apply(k, pos, g, cfg.rope_base), v, g)
        h = _finish_block(model, i, h, attn)
        qs.append(q_rot)
        kvs.append(LayerKV(i, k, v))
        hidden.append(h)
        attn_outs.append(attn)
    logits = matmul(_rmsnorm(h), model.weights["lm_head"])
    return TraceBatch(np.asarray(tokens), qs, kvs, hidden, attn_outs, logits)


def prefill(model: Model, tokens) -> TraceBatch:
    return forward(model, tokens)


class FullCache:
    """Uncompressed per-layer cache of pre-RoPE keys and values."""

    mode = "full"

    def __init__(self, n_layers: int, d_kv: int):
        self.d_kv = d_kv
        self.k = [np.zeros((0, d_kv), np.float32) for _ in range(n_layers)]
        self.v = [np.zeros((0, d_kv), np.float32) for _ in range(n_layers)]

    @classmethod
    def from_layers(cls, layers):
        cache = cls(len(layers), layers[0].k_pre_rope.shape[1])
        cache.k = [np.array(kv.k_pre_rope, dtype=np.float32) for kv in layers]
        cache.v = [np.array(kv.v, dtype=np.float32) for kv in layers]
        return cache

    @classmethod
    def from_trace(cls, trace: TraceBatch):
        return cls.from_layers(trace.kv)

    @property
    def n_layers(self) -> int:
        return len(self.k)

    @property
    def n_tokens(self) -> int:
        return self.k[-1].shape[0]

    def append(self, layer: int, k_row, v_row):
        self.k[layer] = np.concatenate([self.k[layer], k_row.reshape(1, -1)])
        self.v[layer] = np.concatenate([self.v[layer], v_row.reshape(1, -1)])

    def read(self, layer: int):
        return self.k[layer], self.v[layer]

    def layers(self):
        return [LayerKV(i, self.k[i], self.v[i]) for i in range(self.n_layers)]

    def nbytes(self) -> int:
        return sum(a.size * 4 for a in self.k + self.v)


def decode_step(model: Model, cache, token: int):
    """One-token forward against ``cache``. Returns (logits row, cache).

    The cache object supplies the backend policy: ``append`` stores the new
    token's K/V and ``read`` returns what attention should see (for an echo
    cache that is a fresh reconstruction on every call).
    """
    cfg = model.config
    g = cfg.geometry
    if cache.n_layers != cfg.n_layers or cache.d_kv != cfg.d_kv:
        raise ConfigError(
            f"cache geometry ({cache.n_layers} layers, d_kv={cache.d_kv}) does not match model"
        )
    pos = cache.n_tokens
    h = _embed(model, [token])
    for i in range(cfg.n_layers):
        q, k, v = _project(model, i, h)
        cache.append(i, k[0], v[0])
        k_all, v_all = cache.read(i)
        n = k_all.shape[0]
        q_rot = rope_apply(q, [pos], g, cfg.rope_base)
        k_rot = rope_apply(k_all, np.arange(n), g, cfg.rope_base)
        q3 = split_heads(q_rot, g.n_q_heads)
        k3 = expand_kv(split_heads(k_rot, g.n_kv_heads), g.gqa_group)
        v3 = expand_kv(split_heads(v_all, g.n_kv_heads), g.gqa_group)
        out, _ = attend(q3, k3, v3, q_offset=n - 1)
        h = _finish_block(model, i, h, merge_heads(out))
    logits = matmul(_rmsnorm(h), model.weights["lm_head"])
    return logits[0], cache
