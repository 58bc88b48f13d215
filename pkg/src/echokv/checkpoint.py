"""Little-endian binary formats for predictor banks (ECKV) and key-channel
scores (ECKS).

ECKV v1::

    b"ECKV" | u32 version=1 | u32 n_layers, S, D_local, d_kv, n_kv_heads, d_head
    then per compressed layer, ascending: w_key, w_value as row-major f32
    [(d_kv - D_local) x (d_kv + D_local)]

Banks trained with an ablated feature set are written as version 2, which
appends one u32 feature-mode code to the header (0 combined, 1 global_only,
2 local_only) and stores matrices of the matching input width.

ECKS v1::

    b"ECKS" | u32 version=1 | u32 n_layers, d_kv, n_kv_heads, d_head
    then n_layers f32 score vectors of length d_kv
"""
from __future__ import annotations

import struct

import numpy as np

from .cache import FEATURE_MODES, EchoConfig, Predictor, PredictorBank, partition_layers
from .errors import ConfigError

ECKV_MAGIC = b"ECKV"
ECKS_MAGIC = b"ECKS"
_HEADER = struct.Struct("<4sI6I")
_MODE = struct.Struct("<I")
_SCORE_HEADER = struct.Struct("<4sI4I")


def bank_to_bytes(bank: PredictorBank) -> bytes:
    version = 1 if bank.features == "combined" else 2
    parts = [_HEADER.pack(ECKV_MAGIC, version, *bank.fingerprint)]
    if version == 2:
        parts.append(_MODE.pack(FEATURE_MODES.index(bank.features)))
    for _, _, w in bank.matrices():
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return b"".join(parts)


def save_bank(bank: PredictorBank, path):
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def bank_from_bytes(data: bytes, expect=None, sink_tokens: int = 4, window: int = 128) -> PredictorBank:
    """Parse an ECKV blob. ``expect`` is an optional geometry fingerprint
    (n_layers, S, D_local, d_kv, n_kv_heads, d_head) the file must match."""
    if len(data) < _HEADER.size:
        raise ConfigError("truncated predictor checkpoint")
    magic, version, *fp = _HEADER.unpack_from(data)
    if magic != ECKV_MAGIC:
        raise ConfigError(f"bad checkpoint magic {magic!r}")
    if version not in (1, 2):
        raise ConfigError(f"unsupported checkpoint version {version}")
    fp = tuple(fp)
    if expect is not None and tuple(expect) != fp:
        raise ConfigError(f"checkpoint geometry {fp} does not match expected {tuple(expect)}")
    n_layers, S, D, d_kv, n_kv, d_head = fp
    if n_kv * d_head != d_kv:
        raise ConfigError(f"inconsistent checkpoint header {fp}")
    offset = _HEADER.size
    features = "combined"
    if version == 2:
        (code,) = _MODE.unpack_from(data, offset)
        offset += _MODE.size
        if code >= len(FEATURE_MODES):
            raise ConfigError(f"unknown feature mode code {code}")
        features = FEATURE_MODES[code]
    config = EchoConfig(S, D, d_kv, sink_tokens, window)
    shape = (config.drop_dim, config.feature_dim(features))
    n = shape[0] * shape[1]
    layers = partition_layers(n_layers, S).compressed
    expected = offset + len(layers) * 2 * n * 4
    if len(data) != expected:
        raise ConfigError(f"checkpoint has {len(data)} bytes, header implies {expected}")
    preds = {}
    for layer in layers:
        mats = []
        for _ in range(2):
            mats.append(np.frombuffer(data, "<f4", n, offset).reshape(shape).astype(np.float32))
            offset += n * 4
        preds[layer] = Predictor(layer, *mats)
    return PredictorBank(config, n_layers, n_kv, d_head, preds, features)


def load_bank(path, expect=None, sink_tokens: int = 4, window: int = 128) -> PredictorBank:
    with open(path, "rb") as fh:
        return bank_from_bytes(fh.read(), expect, sink_tokens, window)


def save_scores(scores: np.ndarray, n_kv_heads: int, d_head: int, path):
    scores = np.asarray(scores, dtype="<f4")
    n_layers, d_kv = scores.shape
    if n_kv_heads * d_head != d_kv:
        raise ConfigError(f"score width {d_kv} != n_kv_heads*d_head")
    with open(path, "wb") as fh:
        fh.write(_SCORE_HEADER.pack(ECKS_MAGIC, 1, n_layers, d_kv, n_kv_heads, d_head))
        fh.write(np.ascontiguousarray(scores).tobytes())


def load_scores(path, expect=None) -> np.ndarray:
    """Returns [n_layers, d_kv] float32; ``expect`` = (n_layers, d_kv, n_kv_heads, d_head)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SCORE_HEADER.size:
        raise ConfigError("truncated channel-score file")
    magic, version, *fp = _SCORE_HEADER.unpack_from(data)
    if magic != ECKS_MAGIC or version != 1:
        raise ConfigError(f"not a v1 channel-score file (magic {magic!r}, version {version})")
    if expect is not None and tuple(expect) != tuple(fp):
        raise ConfigError(f"score geometry {tuple(fp)} does not match expected {tuple(expect)}")
    n_layers, d_kv = fp[0], fp[1]
    if len(data) != _SCORE_HEADER.size + n_layers * d_kv * 4:
        raise ConfigError("channel-score payload size does not match header")
    return np.frombuffer(data, "<f4", offset=_SCORE_HEADER.size).reshape(n_layers, d_kv).astype(np.float32)
