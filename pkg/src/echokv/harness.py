"""Run configuration, fidelity evaluation, the memory-capped benchmark and
the needle-retrieval agreement task."""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cache import (
    EchoConfig,
    OraclePredictor,
    compute_bytes,
    compute_ratio,
    echo_forward,
    full_bytes,
    switch_mode,
)
from .corpus import synthetic_text, tokenize
from .errors import ConfigError
from .hybrid import HybridConfig, hybrid_forward
from .kernel import AttentionGeometry, mse
from .model import FullCache, Model, ModelConfig, decode_step, prefill
from .train import TrainConfig, layer_omse

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

MODES = ("full", "echo", "hybrid")
FEATURES = ("combined", "global_only", "local_only")
NEEDLE_DEPTHS = tuple(round(0.1 * i, 1) for i in range(1, 10))

_INT, _FLOAT, _STR, _BOOL = int, float, str, bool
CONFIG_KEYS = {
    "model.layers": _INT, "model.q_heads": _INT, "model.kv_heads": _INT, "model.d_head": _INT,
    "model.d_model": _INT, "model.vocab": _INT, "model.d_ff": _INT, "model.seed": _INT,
    "model.rope_base": _FLOAT,
    "echo.group_size": _INT, "echo.local_dim": _INT, "echo.sink_tokens": _INT, "echo.window": _INT,
    "train.lr": _FLOAT, "train.steps_stage1": _INT, "train.steps_stage2": _INT, "train.batch": _INT,
    "train.seed": _INT, "train.beta1": _FLOAT, "train.beta2": _FLOAT, "train.eps": _FLOAT,
    "train.weight_decay": _FLOAT, "train.loss_stage2": _STR, "train.max_len": _INT,
    "train.compounding": _BOOL,
    "hybrid.key_keep_ratio": _FLOAT,
    "run.corpus": _STR, "run.out": _STR, "run.mode": _STR, "run.features": _STR,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    echo: EchoConfig = field(default_factory=lambda: EchoConfig(2, 16, 64))
    train: TrainConfig = field(default_factory=TrainConfig)
    key_keep_ratio: float = None
    corpus: str = None
    out: str = "out"
    mode: str = "echo"
    features: str = "combined"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.mode!r}")
        if self.features not in FEATURES:
            raise ConfigError(f"run.features must be one of {FEATURES}, got {self.features!r}")
        if self.echo.d_kv != self.model.d_kv:
            raise ConfigError(f"echo d_kv {self.echo.d_kv} != model d_kv {self.model.d_kv}")
        if self.model.n_layers % self.echo.group_size:
            raise ConfigError(
                f"model.layers={self.model.n_layers} not divisible by echo.group_size={self.echo.group_size}"
            )
        self.echo.feature_dim(self.features)
        if self.train.loss_stage2 not in ("o_mse", "qk_kl"):
            raise ConfigError(f"train.loss_stage2 must be o_mse or qk_kl, got {self.train.loss_stage2!r}")
        if self.train.batch != 1:
            raise ConfigError("only batch size 1 is supported")

    def hybrid(self, scores=None) -> HybridConfig:
        r = 1.0 if self.key_keep_ratio is None else self.key_keep_ratio
        return HybridConfig(r, self.echo, scores)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _typed(key, value):
    want = CONFIG_KEYS[key]
    if want is _FLOAT and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if (want is _INT and isinstance(value, bool)) or not isinstance(value, want):
        raise ConfigError(f"{key} expects {want.__name__}, got {value!r}")
    return value


def run_config_from_mapping(values: dict) -> RunConfig:
    flat = _flatten(values)
    unknown = sorted(set(flat) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    v = {k: _typed(k, x) for k, x in flat.items()}
    base = RunConfig()
    m = base.model
    geom = AttentionGeometry(
        v.get("model.q_heads", m.geometry.n_q_heads),
        v.get("model.kv_heads", m.geometry.n_kv_heads),
        v.get("model.d_head", m.geometry.d_head),
    )
    model = ModelConfig(
        n_layers=v.get("model.layers", m.n_layers), geometry=geom,
        d_model=v.get("model.d_model", geom.d_q), vocab=v.get("model.vocab", m.vocab),
        d_ff=v.get("model.d_ff", m.d_ff), seed=v.get("model.seed", m.seed),
        rope_base=v.get("model.rope_base", m.rope_base),
    )
    default_local = base.echo.local_dim if geom.d_kv == base.echo.d_kv else geom.d_head
    echo = EchoConfig(
        v.get("echo.group_size", base.echo.group_size), v.get("echo.local_dim", default_local),
        geom.d_kv, v.get("echo.sink_tokens", base.echo.sink_tokens), v.get("echo.window", base.echo.window),
    )
    t = base.train
    train = TrainConfig(
        lr=v.get("train.lr", t.lr), steps_stage1=v.get("train.steps_stage1", t.steps_stage1),
        steps_stage2=v.get("train.steps_stage2", t.steps_stage2), batch=v.get("train.batch", t.batch),
        seed=v.get("train.seed", t.seed),
        betas=(v.get("train.beta1", t.betas[0]), v.get("train.beta2", t.betas[1])),
        eps=v.get("train.eps", t.eps), weight_decay=v.get("train.weight_decay", t.weight_decay),
        loss_stage2=v.get("train.loss_stage2", t.loss_stage2), max_len=v.get("train.max_len", t.max_len),
        compounding=v.get("train.compounding", t.compounding),
    )
    return RunConfig(model, echo, train, v.get("hybrid.key_keep_ratio"), v.get("run.corpus"),
                     v.get("run.out", base.out), v.get("run.mode", base.mode),
                     v.get("run.features", base.features))


def load_run_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return run_config_from_mapping(values)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ECHOKV_THREADS", "1")))
    except ValueError:
        raise ConfigError("ECHOKV_THREADS must be an integer") from None


# --------------------------------------------------------------------------- #
# Fidelity evaluation
# --------------------------------------------------------------------------- #
def evaluate(model: Model, docs, predictor, echo: EchoConfig, mode: str = "echo",
             features: str = "combined", hybrid: HybridConfig = None, max_len: int = 512) -> dict:
    """Per-layer O-MSE plus logit MSE and argmax agreement against the full cache."""
    n_layers = model.config.n_layers
    per_layer = np.zeros(n_layers)
    logit_mse, agree, n_tok = 0.0, 0, 0
    for d in docs:
        d = list(d)[:max_len]
        full = prefill(model, d)
        if mode == "full":
            other = full
        elif mode == "echo":
            other = echo_forward(model, d, predictor, echo, features)
            for i, v in layer_omse(model, full, predictor, echo, features).items():
                per_layer[i] += v
        elif mode == "hybrid":
            other = hybrid_forward(model, d, hybrid, predictor, features)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        if mode == "hybrid":
            for i in range(n_layers):
                per_layer[i] += mse(full.attn_out[i], other.attn_out[i])
        logit_mse += mse(full.logits, other.logits) * len(d)
        agree += int(np.sum(full.logits.argmax(-1) == other.logits.argmax(-1)))
        n_tok += len(d)
    per_layer /= max(1, len(docs))
    scored = [i for i in range(n_layers) if i % echo.group_size] if mode == "echo" else list(range(n_layers))
    return {
        "mode": mode,
        "features": features,
        "per_layer_omse": [float(x) for x in per_layer],
        "omse": float(per_layer[scored].mean()) if scored else 0.0,
        "logit_mse": logit_mse / max(1, n_tok),
        "argmax_agreement": agree / max(1, n_tok),
        "n_sequences": len(docs),
    }


# --------------------------------------------------------------------------- #
# Benchmark
# --------------------------------------------------------------------------- #
def select_mode(n_tokens: int, cap_bytes, n_layers: int, d_kv: int) -> str:
    """Full cache iff it fits under the cap."""
    if cap_bytes is None or full_bytes(n_layers, n_tokens, d_kv) <= cap_bytes:
        return "full"
    return "echo"


def token_stream(n: int, seed: int = 0) -> list:
    text = " ".join(synthetic_text(n_docs=max(1, n // 500 + 2), seed=seed))
    ids = tokenize(text)
    while len(ids) < n:
        ids = ids + ids
    return ids[:n]


def _decode(model, cache, tokens):
    t0 = time.perf_counter()
    logits = []
    for t in tokens:
        row, cache = decode_step(model, cache, t)
        logits.append(row)
    return np.stack(logits), max(time.perf_counter() - t0, 1e-9)


def bench_length(model: Model, predictor, echo: EchoConfig, n_tokens: int, decode_tokens: int = 8,
                 cap_bytes=None, seed: int = 0, features: str = "combined") -> dict:
    cfg = model.config
    stream = token_stream(n_tokens + decode_tokens, seed)
    prompt, cont = stream[:n_tokens], stream[n_tokens:]
    trace = prefill(model, prompt)
    b_full = full_bytes(cfg.n_layers, n_tokens, cfg.d_kv)
    mode = select_mode(n_tokens, cap_bytes, cfg.n_layers, cfg.d_kv)
    # unconstrained full-cache reference; under a cap this is the run that would not fit
    ref_logits, _ = _decode(model, FullCache.from_trace(trace), cont)
    cache = FullCache.from_trace(trace)
    if mode == "echo":
        cache = switch_mode(cache, "echo", predictor, echo, features)
    b_comp = compute_bytes(cache.store) if mode == "echo" else cache.nbytes()
    logits, elapsed = _decode(model, cache, cont)
    return {
        "tokens": n_tokens,
        "mode": mode,
        "bytes_full": b_full,
        "bytes_compressed": b_comp,
        "achieved_ratio": b_comp / b_full,
        "configured_ratio": 1.0 if mode == "full" else compute_ratio(echo),
        "decode_tokens_per_sec": len(cont) / elapsed,
        "output_mse_vs_full": mse(ref_logits, logits),
        "logit_argmax_agreement": float(np.mean(ref_logits.argmax(-1) == logits.argmax(-1))),
        "logits_sha256": hashlib.sha256(np.ascontiguousarray(logits, "<f4").tobytes()).hexdigest(),
        "oom_simulated": mode == "echo",
        "fits_cap": cap_bytes is None or b_comp <= cap_bytes,
    }


def run_bench(model: Model, predictor, echo: EchoConfig, lengths, decode_tokens: int = 8, cap_bytes=None,
              seed: int = 0, features: str = "combined", threads: int = None) -> list:
    threads = threads or worker_count()

    def one(n):
        pred = OraclePredictor(echo) if isinstance(predictor, OraclePredictor) else predictor
        return bench_length(model, pred, echo, n, decode_tokens, cap_bytes, seed, features)

    if threads == 1:
        return [one(n) for n in lengths]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(one, lengths))


# --------------------------------------------------------------------------- #
# Needle agreement
# --------------------------------------------------------------------------- #
def needle_sequence(context_len: int, depth: float, rng) -> list:
    digits = "".join(str(int(x)) for x in rng.integers(0, 10, 5))
    needle = tokenize(f" The secret code is {digits}. ")
    probe = tokenize(" The secret code is")
    hay_len = context_len - len(needle) - len(probe)
    if hay_len < 1:
        raise ConfigError(f"context_len={context_len} too short for the needle")
    hay = token_stream(hay_len, seed=int(rng.integers(1 << 31)))
    at = int(round(depth * hay_len))
    return hay[:at] + needle + hay[at:] + probe


def needle_task(model: Model, predictor, echo: EchoConfig, context_len: int = 512,
                depths=NEEDLE_DEPTHS, trials: int = 4, seed: int = 0, features: str = "combined") -> dict:
    """Agreement of full vs compressed next-token argmax at the probe position."""
    rng = np.random.default_rng(seed)
    per_depth = []
    for depth in depths:
        hits = 0
        for _ in range(trials):
            seq = needle_sequence(context_len, depth, rng)
            trace = prefill(model, seq[:-1])
            full_row, _ = decode_step(model, FullCache.from_trace(trace), seq[-1])
            pred = OraclePredictor(echo) if isinstance(predictor, OraclePredictor) else predictor
            cache = switch_mode(FullCache.from_trace(trace), "echo", pred, echo, features)
            echo_row, _ = decode_step(model, cache, seq[-1])
            hits += int(full_row.argmax() == echo_row.argmax())
        per_depth.append({"depth": depth, "agreement": hits / trials, "trials": trials})
    return {
        "context_len": context_len,
        "per_depth": per_depth,
        "mean_agreement": float(np.mean([r["agreement"] for r in per_depth])),
    }


def with_seed(cfg: RunConfig, seed) -> RunConfig:
    if seed is None:
        return cfg
    return replace(cfg, train=replace(cfg.train, seed=seed))
