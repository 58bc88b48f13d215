"""Layer-grouped KV eviction and linear reconstruction of the dropped heads.

Layers are split into groups of ``S``. The first layer of every group (the
leader) keeps its whole cache; every other layer keeps only its first
``local_dim`` channels, plus full-width rows for the attention sinks and the
recent window. Dropped channels are predicted on read from the leader's full
row and the layer's own local slice by one bias-free linear map per layer
and per key/value.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .kernel import AttentionGeometry
from .model import FullCache, LayerKV, forward

FEATURE_MODES = ("combined", "global_only", "local_only")
KINDS = ("key", "value")
BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class EchoConfig:
    group_size: int
    local_dim: int
    d_kv: int
    sink_tokens: int = 4
    window: int = 128

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 0 <= self.local_dim < self.d_kv:
            raise ConfigError(f"local_dim must lie in [0, d_kv={self.d_kv}), got {self.local_dim}")
        if self.sink_tokens < 0 or self.window < 0:
            raise ConfigError("sink_tokens and window must be non-negative")

    @property
    def drop_dim(self) -> int:
        return self.d_kv - self.local_dim

    def feature_dim(self, features: str = "combined") -> int:
        if features == "combined":
            return self.d_kv + self.local_dim
        if features == "global_only":
            return self.d_kv
        if features == "local_only":
            if self.local_dim == 0:
                raise ConfigError("local_only features need local_dim > 0")
            return self.local_dim
        raise ConfigError(f"unknown feature mode {features!r}; expected one of {FEATURE_MODES}")


def compute_ratio(config: EchoConfig) -> float:
    """Compressed/full cache size, ignoring the sink and window rows."""
    S, d = config.group_size, config.d_kv
    return (d + config.local_dim * (S - 1)) / (d * S)


def count_params(n_layers: int, group_size: int, local_dim: int, d_kv: int) -> int:
    """Total predictor weights for a bank covering every compressed layer."""
    if n_layers % group_size:
        raise ConfigError(f"n_layers={n_layers} not divisible by group_size={group_size}")
    n_compressed = n_layers * (group_size - 1) // group_size
    return n_compressed * 2 * (d_kv + local_dim) * (d_kv - local_dim)


@dataclass(frozen=True)
class GroupLayout:
    n_layers: int
    group_size: int

    @property
    def groups(self):
        S = self.group_size
        return [tuple(range(k * S, (k + 1) * S)) for k in range(self.n_layers // S)]

    @property
    def leaders(self):
        return list(range(0, self.n_layers, self.group_size))

    @property
    def compressed(self):
        return [i for i in range(self.n_layers) if i % self.group_size]

    def is_leader(self, layer: int) -> bool:
        return layer % self.group_size == 0

    def leader_of(self, layer: int) -> int:
        return layer - layer % self.group_size


def partition_layers(n_layers: int, group_size: int) -> GroupLayout:
    if group_size < 1 or n_layers < 1 or n_layers % group_size:
        raise ConfigError(f"cannot split {n_layers} layers into groups of {group_size}")
    return GroupLayout(n_layers, group_size)


# --------------------------------------------------------------------------- #
# Predictors
# --------------------------------------------------------------------------- #
@dataclass
class Predictor:
    layer: int
    w_key: np.ndarray  # [drop_dim, feature_dim]
    w_value: np.ndarray

    def weight(self, which: str) -> np.ndarray:
        if which == "key":
            return self.w_key
        if which == "value":
            return self.w_value
        raise ConfigError(f"which must be 'key' or 'value', got {which!r}")


def predict_dropped(predictor: Predictor, features: np.ndarray, which: str) -> np.ndarray:
    w = predictor.weight(which)
    if features.ndim != 2 or features.shape[1] != w.shape[1]:
        raise ConfigError(
            f"layer {predictor.layer}: feature width {features.shape[-1]} != predictor input {w.shape[1]}"
        )
    return features @ w.T


@dataclass
class PredictorBank:
    config: EchoConfig
    n_layers: int
    n_kv_heads: int
    d_head: int
    predictors: dict = field(default_factory=dict)
    features: str = "combined"

    @property
    def layout(self) -> GroupLayout:
        return partition_layers(self.n_layers, self.config.group_size)

    @property
    def fingerprint(self):
        c = self.config
        return (self.n_layers, c.group_size, c.local_dim, c.d_kv, self.n_kv_heads, self.d_head)

    def predict(self, layer: int, which: str, features: np.ndarray, positions=None) -> np.ndarray:
        try:
            p = self.predictors[layer]
        except KeyError:
            raise UsageError(f"no predictor for layer {layer} (leader or out of range)") from None
        return predict_dropped(p, features, which)

    def param_count(self) -> int:
        return sum(p.w_key.size + p.w_value.size for p in self.predictors.values())

    def matrices(self):
        """(layer, which, array) in checkpoint order."""
        for layer in sorted(self.predictors):
            p = self.predictors[layer]
            yield layer, "key", p.w_key
            yield layer, "value", p.w_value

    def copy(self) -> "PredictorBank":
        preds = {
            i: Predictor(i, p.w_key.copy(), p.w_value.copy()) for i, p in self.predictors.items()
        }
        return PredictorBank(self.config, self.n_layers, self.n_kv_heads, self.d_head, preds, self.features)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for layer, which, w in self.matrices():
            h.update(f"{layer}.{which}".encode())
            h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
        return h.hexdigest()

    def check_geometry(self, n_layers: int, geometry: AttentionGeometry, config: EchoConfig = None):
        mine = self.fingerprint
        theirs = (n_layers, self.config.group_size, self.config.local_dim, geometry.d_kv,
                  geometry.n_kv_heads, geometry.d_head)
        if config is not None:
            theirs = (n_layers, config.group_size, config.local_dim, config.d_kv,
                      geometry.n_kv_heads, geometry.d_head)
        if mine != theirs:
            raise ConfigError(f"predictor bank fingerprint {mine} does not match {theirs}")


def init_bank(n_layers: int, geometry: AttentionGeometry, config: EchoConfig, seed: int = 42,
              features: str = "combined", zero: bool = False) -> PredictorBank:
    """Fresh bank; weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) like a default linear layer."""
    if config.d_kv != geometry.d_kv:
        raise ConfigError(f"echo d_kv={config.d_kv} != model d_kv={geometry.d_kv}")
    layout = partition_layers(n_layers, config.group_size)
    fan_in = config.feature_dim(features)
    shape = (config.drop_dim, fan_in)
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(fan_in)
    preds = {}
    for layer in layout.compressed:
        if zero:
            wk, wv = np.zeros(shape, np.float32), np.zeros(shape, np.float32)
        else:
            wk = rng.uniform(-bound, bound, shape).astype(np.float32)
            wv = rng.uniform(-bound, bound, shape).astype(np.float32)
        preds[layer] = Predictor(layer, wk, wv)
    return PredictorBank(config, n_layers, geometry.n_kv_heads, geometry.d_head, preds, features)


class OraclePredictor:
    """Test double that returns the true dropped channels.

    It learns the truth by observing full-precision rows as they enter a
    store (see ``observe``), or up front via :meth:`from_layers`.
    """

    def __init__(self, config: EchoConfig):
        self.config = config
        self.truth = {}

    @classmethod
    def from_layers(cls, layers, config: EchoConfig):
        o = cls(config)
        for kv in layers:
            o.observe(kv.layer, 0, kv.k_pre_rope, kv.v)
        return o

    def observe(self, layer: int, start: int, k_rows, v_rows):
        k_old, v_old = self.truth.get(layer, (np.zeros((0, k_rows.shape[1]), np.float32),) * 2)
        k_new = np.concatenate([k_old[:start], k_rows])
        v_new = np.concatenate([v_old[:start], v_rows])
        self.truth[layer] = (k_new, v_new)

    def predict(self, layer: int, which: str, features, positions):
        k, v = self.truth[layer]
        src = k if which == "key" else v
        return src[np.asarray(positions), self.config.local_dim:]


class MeanPredictor:
    """Baseline that predicts each layer's mean dropped vector."""

    def __init__(self, config: EchoConfig, means: dict):
        self.config = config
        self.means = means

    @classmethod
    def fit(cls, traces, config: EchoConfig, n_layers: int):
        layout = partition_layers(n_layers, config.group_size)
        means = {}
        for layer in layout.compressed:
            for which in KINDS:
                rows = []
                for tr in traces:
                    kv = tr.kv[layer]
                    src = kv.k_pre_rope if which == "key" else kv.v
                    a, b = middle_range(src.shape[0], config)
                    rows.append(np.asarray(src[a:b, config.local_dim:], dtype=np.float64))
                stacked = np.concatenate(rows)
                means[(layer, which)] = stacked.mean(axis=0) if len(stacked) else np.zeros(config.drop_dim)
        return cls(config, means)

    def predict(self, layer: int, which: str, features, positions):
        n = features.shape[0]
        return np.broadcast_to(self.means[(layer, which)].astype(np.float32), (n, self.config.drop_dim)).copy()


# --------------------------------------------------------------------------- #
# Store
# --------------------------------------------------------------------------- #
def middle_range(n_tokens: int, config: EchoConfig):
    """[start, stop) of the rows a compressed layer keeps only locally."""
    if n_tokens <= config.sink_tokens + config.window:
        return n_tokens, n_tokens
    return config.sink_tokens, n_tokens - config.window


@dataclass
class _Slot:
    leader: bool
    head_k: np.ndarray  # leaders keep every row here
    head_v: np.ndarray
    mid_k: np.ndarray
    mid_v: np.ndarray
    tail_k: np.ndarray
    tail_v: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.head_k) + len(self.mid_k) + len(self.tail_k)


class EchoStore:
    """The compressed cache for one sequence."""

    def __init__(self, config: EchoConfig, n_layers: int):
        self.config = config
        self.layout = partition_layers(n_layers, config.group_size)
        self.slots = [None] * n_layers

    @property
    def n_layers(self) -> int:
        return self.layout.n_layers

    @property
    def n_tokens(self) -> int:
        return self.slots[-1].n_tokens if self.slots[-1] is not None else 0

    def _empty(self, width):
        return np.zeros((0, width), np.float32)

    def put_layer(self, kv: LayerKV):
        """Evict one layer's full cache into the store."""
        c = self.config
        k = np.asarray(kv.k_pre_rope, np.float32)
        v = np.asarray(kv.v, np.float32)
        if k.shape[1] != c.d_kv:
            raise DimensionError(f"layer {kv.layer}: width {k.shape[1]} != d_kv {c.d_kv}")
        if self.layout.is_leader(kv.layer):
            e = self._empty(c.d_kv)
            self.slots[kv.layer] = _Slot(True, k.copy(), v.copy(), self._empty(c.local_dim),
                                         self._empty(c.local_dim), e, e.copy())
            return
        n = k.shape[0]
        a, b = middle_range(n, c)
        if a == b:  # short sequence: everything stays full
            a = min(n, c.sink_tokens)
            b = a
        D = c.local_dim
        self.slots[kv.layer] = _Slot(
            False, k[:a].copy(), v[:a].copy(), k[a:b, :D].copy(), v[a:b, :D].copy(),
            k[b:].copy(), v[b:].copy(),
        )

    def append(self, layer: int, k_row, v_row):
        c = self.config
        s = self.slots[layer]
        k_row = np.asarray(k_row, np.float32).reshape(1, -1)
        v_row = np.asarray(v_row, np.float32).reshape(1, -1)
        if s.leader or (len(s.head_k) < c.sink_tokens and not len(s.mid_k) and not len(s.tail_k)):
            s.head_k = np.concatenate([s.head_k, k_row])
            s.head_v = np.concatenate([s.head_v, v_row])
            return
        s.tail_k = np.concatenate([s.tail_k, k_row])
        s.tail_v = np.concatenate([s.tail_v, v_row])
        if len(s.tail_k) > c.window:
            D = c.local_dim
            s.mid_k = np.concatenate([s.mid_k, s.tail_k[:1, :D]])
            s.mid_v = np.concatenate([s.mid_v, s.tail_v[:1, :D]])
            s.tail_k, s.tail_v = s.tail_k[1:], s.tail_v[1:]

    def mid_range(self, layer: int):
        s = self.slots[layer]
        a = len(s.head_k)
        return a, a + len(s.mid_k)

    def full_rows(self, layer: int, which: str) -> np.ndarray:
        s = self.slots[layer]
        if not s.leader:
            raise UsageError(f"layer {layer} is compressed; it has no full rows")
        return s.head_k if which == "key" else s.head_v

    def local_rows(self, layer: int, which: str) -> np.ndarray:
        """First ``local_dim`` channels of every row of a compressed layer."""
        s = self.slots[layer]
        D = self.config.local_dim
        if which == "key":
            return np.concatenate([s.head_k[:, :D], s.mid_k, s.tail_k[:, :D]])
        return np.concatenate([s.head_v[:, :D], s.mid_v, s.tail_v[:, :D]])

    def layer_bytes(self, layer: int) -> dict:
        s = self.slots[layer]
        if s is None:
            return {}
        if s.leader:
            return {"leader": (s.head_k.size + s.head_v.size) * BYTES_PER_ELEMENT}
        per_row = 2 * self.config.d_kv * BYTES_PER_ELEMENT
        return {
            "sink": len(s.head_k) * per_row,
            "local": (s.mid_k.size + s.mid_v.size) * BYTES_PER_ELEMENT,
            "window": len(s.tail_k) * per_row,
        }

    def breakdown(self) -> list:
        return [self.layer_bytes(i) for i in range(self.n_layers)]

    def materialize(self, layer: int, predictor, features: str = "combined"):
        """Full-width (K_pre, V) for ``layer``; compressed layers are rebuilt."""
        s = self.slots[layer]
        if s.leader:
            return s.head_k, s.head_v
        a, b = self.mid_range(layer)
        if a == b:
            return np.concatenate([s.head_k, s.tail_k]), np.concatenate([s.head_v, s.tail_v])
        if predictor is None:
            raise UsageError("reading a compressed layer needs a predictor")
        positions = np.arange(a, b)
        out = []
        for which, head, mid, tail in (("key", s.head_k, s.mid_k, s.tail_k),
                                       ("value", s.head_v, s.mid_v, s.tail_v)):
            feats = assemble_features(self, layer, which, a, b, features)
            pred = predictor.predict(layer, which, feats, positions)
            out.append(np.concatenate([head, reconstruct_layer(mid, pred), tail]))
        return out[0], out[1]


def evict(layers, config: EchoConfig) -> EchoStore:
    store = EchoStore(config, len(layers))
    for kv in layers:
        store.put_layer(kv)
    return store


def assemble_features(store: EchoStore, layer: int, which: str, start: int = None, stop: int = None,
                      features: str = "combined") -> np.ndarray:
    """Per-token [leader full row ; own local slice] for rows [start, stop)."""
    layout = store.layout
    if layout.is_leader(layer):
        raise UsageError(f"layer {layer} is a group leader; it has nothing to predict")
    if start is None or stop is None:
        start, stop = store.mid_range(layer)
    glob = store.full_rows(layout.leader_of(layer), which)[start:stop]
    if features == "global_only":
        return glob
    loc = store.local_rows(layer, which)[start:stop]
    if features == "local_only":
        store.config.feature_dim(features)
        return loc
    if features != "combined":
        store.config.feature_dim(features)
    return np.concatenate([glob, loc], axis=1)


def reconstruct_layer(local: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """[local ; predicted] along channels, preserving head order."""
    if local.shape[0] != predicted.shape[0]:
        raise DimensionError(f"row counts differ: local {local.shape[0]}, predicted {predicted.shape[0]}")
    return np.concatenate([local, predicted.astype(local.dtype, copy=False)], axis=1)


def compute_bytes(store) -> int:
    if isinstance(store, FullCache):
        return store.nbytes()
    return sum(sum(d.values()) for d in store.breakdown())


def full_bytes(n_layers: int, n_tokens: int, d_kv: int) -> int:
    return n_layers * n_tokens * d_kv * 2 * BYTES_PER_ELEMENT


# --------------------------------------------------------------------------- #
# Cache backend and mode switching
# --------------------------------------------------------------------------- #
class EchoCache:
    """Decode-time backend over an :class:`EchoStore`; reconstructs on every read."""

    mode = "echo"

    def __init__(self, store: EchoStore, predictor=None, features: str = "combined"):
        self.store = store
        self.predictor = predictor
        self.features = features

    @property
    def n_layers(self) -> int:
        return self.store.n_layers

    @property
    def d_kv(self) -> int:
        return self.store.config.d_kv

    @property
    def n_tokens(self) -> int:
        return self.store.n_tokens

    def append(self, layer: int, k_row, v_row):
        observe = getattr(self.predictor, "observe", None)
        if observe is not None:
            observe(layer, self.store.slots[layer].n_tokens, k_row.reshape(1, -1), v_row.reshape(1, -1))
        self.store.append(layer, k_row, v_row)

    def read(self, layer: int):
        return self.store.materialize(layer, self.predictor, self.features)

    def nbytes(self) -> int:
        return compute_bytes(self.store)


def switch_mode(cache, target: str, bank=None, config: EchoConfig = None, features: str = None):
    """Convert a live cache between the full and echo backends."""
    if target not in ("full", "echo"):
        raise UsageError(f"unknown cache mode {target!r}")
    if cache.mode == target:
        return cache
    if target == "echo":
        if config is None:
            if bank is None or not hasattr(bank, "config"):
                raise UsageError("full -> echo needs an EchoConfig or a bank carrying one")
            config = bank.config
        layers = cache.layers()
        observe = getattr(bank, "observe", None)
        if observe is not None:
            for kv in layers:
                observe(kv.layer, 0, kv.k_pre_rope, kv.v)
        feats = features or getattr(bank, "features", "combined")
        return EchoCache(evict(layers, config), bank, feats)
    if bank is None:
        raise UsageError("echo -> full needs a predictor bank to rebuild the dropped heads")
    store = cache.store
    feats = features or cache.features
    layers = [LayerKV(i, *store.materialize(i, bank, feats)) for i in range(store.n_layers)]
    return FullCache.from_layers(layers)


def echo_forward(model, tokens, predictor, config: EchoConfig, features: str = "combined"):
    """Forward pass in which every compressed layer attends with its rebuilt cache.

    Each layer's cache is evicted as it is produced (the leader of a group is
    always produced first), so later layers see the compounded effect of
    earlier reconstructions, as they would at inference time.
    """
    store = EchoStore(config, model.config.n_layers)
    observe = getattr(predictor, "observe", None)

    def hook(layer, k, v):
        if observe is not None:
            observe(layer, 0, k, v)
        store.put_layer(LayerKV(layer, k, v))
        return store.materialize(layer, predictor, features)

    return forward(model, tokens, hook)
