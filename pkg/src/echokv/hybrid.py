"""Hybrid compression: structured channel pruning for keys, echo
reconstruction for values.

The channel score is a query-weighted key energy measured on calibration
text. It stands in for an external low-rank key criterion; anything that
produces one score per key channel and layer can be passed instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cache import EchoConfig, EchoStore, LayerKV, compute_ratio
from .errors import ConfigError, DimensionError, InputError
from .kernel import mse
from .model import Model, forward, prefill


@dataclass(frozen=True)
class HybridConfig:
    key_keep_ratio: float
    value_config: EchoConfig
    channel_scores: np.ndarray = None  # [n_layers, d_kv]

    def __post_init__(self):
        if not 0 < self.key_keep_ratio <= 1:
            raise ConfigError(f"key_keep_ratio must lie in (0, 1], got {self.key_keep_ratio}")

    def kept_channels(self) -> int:
        return kept_count(self.key_keep_ratio, self.value_config.d_kv)

    def overall_ratio(self) -> float:
        return blended_ratio(self.key_keep_ratio, compute_ratio(self.value_config))


def kept_count(r_k: float, d_kv: int) -> int:
    if r_k <= 0:
        raise ConfigError(f"key_keep_ratio must be positive, got {r_k}")
    # guard against 0.5 * 64 landing a hair above 32
    return min(d_kv, math.ceil(round(r_k * d_kv, 9)))


def blended_ratio(key_ratio: float, value_ratio: float) -> float:
    """Keys and values are half the cache each."""
    return (key_ratio + value_ratio) / 2


def key_only_ratio(key_ratio: float) -> float:
    return blended_ratio(key_ratio, 1.0)


def channel_scores(k: np.ndarray, q: np.ndarray, geometry) -> np.ndarray:
    """score[c] = mean_t K[t,c]^2 * mean_t Q[t,c']^2 for one layer, with the
    query energy at c's in-head offset averaged over the heads sharing c."""
    g = geometry
    k = np.asarray(k, np.float64)
    q = np.asarray(q, np.float64)
    k_sq = np.mean(k * k, axis=0)
    q_sq = np.mean(q * q, axis=0).reshape(g.n_kv_heads, g.gqa_group, g.d_head).mean(axis=1)
    return k_sq * q_sq.reshape(g.d_kv)


def calibrate_key_channels(model: Model, docs, max_len: int = 512) -> np.ndarray:
    """[n_layers, d_kv] scores over all calibration tokens (pre-RoPE keys, post-RoPE queries)."""
    docs = [list(d)[:max_len] for d in docs if len(d)]
    if not docs:
        raise InputError("calibration needs at least one non-empty sequence")
    traces = [prefill(model, d) for d in docs]
    scores = [
        channel_scores(np.concatenate([tr.kv[i].k_pre_rope for tr in traces]),
                       np.concatenate([tr.q[i] for tr in traces]), model.geometry)
        for i in range(model.config.n_layers)
    ]
    return np.stack(scores).astype(np.float32)


@dataclass
class PrunedKeys:
    kept: np.ndarray  # sorted channel indices
    values: np.ndarray  # [tokens, kept]
    d_kv: int

    @property
    def bitmap(self) -> bytes:
        mask = np.zeros(self.d_kv, dtype=bool)
        mask[self.kept] = True
        return np.packbits(mask, bitorder="little").tobytes()

    def nbytes(self) -> int:
        return self.values.size * 4 + len(self.bitmap)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.values.shape[0], self.d_kv), dtype=self.values.dtype)
        out[:, self.kept] = self.values
        return out


def select_channels(scores: np.ndarray, r_k: float) -> np.ndarray:
    """Top-ceil(r_k*d) channels by score; ties go to the lower index."""
    scores = np.asarray(scores)
    n_keep = kept_count(r_k, scores.shape[0])
    order = np.lexsort((np.arange(scores.shape[0]), -scores.astype(np.float64)))
    return np.sort(order[:n_keep])


def prune_keys(k: np.ndarray, scores: np.ndarray, r_k: float) -> PrunedKeys:
    if k.ndim != 2 or np.asarray(scores).shape != (k.shape[1],):
        raise DimensionError(f"scores length {np.asarray(scores).shape} vs key width {k.shape}")
    kept = select_channels(scores, r_k)
    return PrunedKeys(kept, np.ascontiguousarray(k[:, kept]), k.shape[1])


def hybrid_forward(model: Model, tokens, config: HybridConfig, bank, features: str = "combined"):
    """Forward pass with pruned, zero-filled keys in every layer and echo
    reconstructed values in compressed layers. Returns the trace; logits are
    ``trace.logits``. Only the bank's value predictors are used."""
    if config.channel_scores is None:
        raise ConfigError("hybrid forward needs channel scores")
    scores = np.asarray(config.channel_scores)
    n_layers = model.config.n_layers
    if scores.shape != (n_layers, model.config.d_kv):
        raise ConfigError(f"channel scores {scores.shape} do not match model ({n_layers}, {model.config.d_kv})")
    if config.value_config.d_kv != model.config.d_kv:
        raise ConfigError("value echo config does not match the model's d_kv")
    store = EchoStore(config.value_config, n_layers)
    observe = getattr(bank, "observe", None)

    def hook(layer, k, v):
        if observe is not None:
            observe(layer, 0, k, v)
        store.put_layer(LayerKV(layer, k, v))
        _, v_used = store.materialize(layer, bank, features)
        return prune_keys(k, scores[layer], config.key_keep_ratio).dense(), v_used

    return forward(model, tokens, hook)


def hybrid_report(model: Model, tokens, config: HybridConfig, bank) -> dict:
    full = prefill(model, tokens)
    hyb = hybrid_forward(model, tokens, config, bank)
    return {
        "per_layer_output_mse": [mse(a, b) for a, b in zip(full.attn_out, hyb.attn_out)],
        "logit_mse": mse(full.logits, hyb.logits),
        "argmax_agreement": float(np.mean(full.logits.argmax(-1) == hyb.logits.argmax(-1))),
        "overall_ratio": config.overall_ratio(),
    }
