"""Two-stage predictor training against a frozen backbone.

Stage 1 fits the dropped channels directly (reconstruction MSE). Stage 2
minimizes the mean squared difference between each compressed layer's
attention output under true and reconstructed K/V, using the layer's own
true queries; gradients flow through the streaming attention backward. The
QK-KL objective is available as an alternative stage 2 for comparison.

All predictors are updated together by one AdamW step per sampled sequence.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .cache import EchoConfig, LayerKV, PredictorBank, assemble_features, evict, echo_forward
from .errors import InputError, TrainingError
from .kernel import (
    MemoryMeter,
    adamw_step,
    attend,
    attend_backward,
    causal_attention,
    cosine_lr,
    expand_kv,
    merge_heads,
    qk_kl_heads,
    reduce_kv,
    rope_apply,
    split_heads,
)
from .model import Model, prefill


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    steps_stage1: int = 600
    steps_stage2: int = 1000
    batch: int = 1
    seed: int = 42
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss_stage2: str = "o_mse"
    max_len: int = 512
    compounding: bool = False


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_time: dict = field(default_factory=dict)
    peak_aux_bytes: dict = field(default_factory=dict)
    checksum: str = ""

    def losses(self, stage: int) -> list:
        return [r["loss"] for r in self.rows if r["stage"] == stage]

    def lrs(self, stage: int) -> list:
        return [r["lr"] for r in self.rows if r["stage"] == stage]

    def extend(self, other: "TrainReport"):
        self.rows += other.rows
        self.wall_time.update(other.wall_time)
        self.peak_aux_bytes.update(other.peak_aux_bytes)
        self.checksum = other.checksum

    def to_jsonl(self, timing: bool = True) -> str:
        """One JSON object per step. ``timing=False`` drops elapsed_ms, the
        only field that differs between otherwise identical runs."""
        rows = self.rows if timing else [{k: v for k, v in r.items() if k != "elapsed_ms"} for r in self.rows]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


# --------------------------------------------------------------------------- #
# Per-sequence training tensors
# --------------------------------------------------------------------------- #
class Prepared:
    """Everything a training step needs for one sequence, stacked over the
    compressed layers (leading axis)."""

    def __init__(self, trace, config: EchoConfig, layers, geometry, rope_base, features="combined",
                 reference=None):
        self.config = config
        self.geometry = geometry
        self.rope_base = rope_base
        self.layers = list(layers)
        store = evict(trace.kv, config)
        L = trace.kv[0].n_tokens
        self.L = L
        self.mid = store.mid_range(self.layers[0]) if self.layers else (L, L)
        a, b = self.mid
        self.pos = np.arange(L)
        self.feats = {w: np.stack([assemble_features(store, i, w, a, b, features) for i in self.layers])
                      for w in ("key", "value")}
        D = config.local_dim
        self.target = {
            "key": np.stack([trace.kv[i].k_pre_rope[a:b, D:] for i in self.layers]),
            "value": np.stack([trace.kv[i].v[a:b, D:] for i in self.layers]),
        }
        self.k_pre = np.stack([trace.kv[i].k_pre_rope for i in self.layers])
        self.v = np.stack([trace.kv[i].v for i in self.layers])
        self.q3 = np.stack([split_heads(trace.q[i], geometry.n_q_heads) for i in self.layers])
        ref = reference if reference is not None else trace
        self.out_true = np.stack([split_heads(ref.attn_out[i], geometry.n_q_heads) for i in self.layers])
        self.k_true_post = np.stack([rope_apply(ref.kv[i].k_pre_rope, self.pos, geometry, rope_base)
                                     for i in self.layers])

    @property
    def n_mid(self) -> int:
        return self.mid[1] - self.mid[0]

    def astype(self, dtype) -> "Prepared":
        p = object.__new__(Prepared)
        p.__dict__.update(self.__dict__)
        for name in ("k_pre", "v", "q3", "out_true", "k_true_post"):
            setattr(p, name, getattr(self, name).astype(dtype))
        p.feats = {w: a.astype(dtype) for w, a in self.feats.items()}
        p.target = {w: a.astype(dtype) for w, a in self.target.items()}
        return p


def _rope_stack(x, pos, geometry, base, sign=1):
    n, L, w = x.shape
    return rope_apply(x.reshape(n * L, w), np.tile(sign * pos, n), geometry, base).reshape(n, L, w)


def _predict(w, feats):
    return feats @ np.swapaxes(w, -1, -2)


def _weight_grad(d_pred, feats):
    return np.swapaxes(d_pred, -1, -2) @ feats


def stage1_loss_grad(wk, wv, prep: Prepared):
    """Mean of key and value reconstruction MSE over all compressed layers."""
    loss, grads = 0.0, []
    for w, which in ((wk, "key"), (wv, "value")):
        feats = prep.feats[which]
        err = _predict(w, feats) - prep.target[which]
        loss += 0.5 * float(np.mean(err.astype(np.float64) ** 2))
        grads.append(_weight_grad(err * (2.0 * 0.5 / err.size), feats).astype(w.dtype))
    return loss, grads[0], grads[1]


def _reconstructed(wk, wv, prep: Prepared):
    a, b = prep.mid
    D = prep.config.local_dim
    k = prep.k_pre.copy()
    v = prep.v.copy()
    k[:, a:b, D:] = _predict(wk, prep.feats["key"])
    v[:, a:b, D:] = _predict(wv, prep.feats["value"])
    return k, v


def omse_loss_grad(wk, wv, prep: Prepared, meter=None):
    """Attention-output MSE and its gradients wrt the stacked key/value weights."""
    g = prep.geometry
    a, b = prep.mid
    D = prep.config.local_dim
    k_pre, v = _reconstructed(wk, wv, prep)
    k_post = _rope_stack(k_pre, prep.pos, g, prep.rope_base)
    k3 = expand_kv(split_heads(k_post, g.n_kv_heads), g.gqa_group)
    v3 = expand_kv(split_heads(v, g.n_kv_heads), g.gqa_group)
    out, lse = attend(prep.q3, k3, v3, meter=meter)
    err = out - prep.out_true
    loss = float(np.mean(err.astype(np.float64) ** 2))
    d_out = err * (2.0 / err.size)
    dk3, dv3 = attend_backward(prep.q3, k3, v3, out, lse, d_out, meter=meter)
    dk_post = merge_heads(reduce_kv(dk3, g.gqa_group))
    dv = merge_heads(reduce_kv(dv3, g.gqa_group))
    dk_pre = _rope_stack(dk_post, prep.pos, g, prep.rope_base, sign=-1)
    gk = _weight_grad(dk_pre[:, a:b, D:], prep.feats["key"]).astype(wk.dtype)
    gv = _weight_grad(dv[:, a:b, D:], prep.feats["value"]).astype(wv.dtype)
    return loss, gk, gv


def qkkl_loss_grad(wk, prep: Prepared, meter=None):
    """QK-KL loss and its gradient wrt the stacked key weights."""
    g = prep.geometry
    a, b = prep.mid
    D = prep.config.local_dim
    k_pre = prep.k_pre.copy()
    k_pre[:, a:b, D:] = _predict(wk, prep.feats["key"])
    k_post = _rope_stack(k_pre, prep.pos, g, prep.rope_base)
    kt3 = expand_kv(split_heads(prep.k_true_post, g.n_kv_heads), g.gqa_group)
    kr3 = expand_kv(split_heads(k_post, g.n_kv_heads), g.gqa_group)
    loss, dkr3 = qk_kl_heads(prep.q3, kt3, kr3, meter=meter, with_grad=True)
    dk_post = merge_heads(reduce_kv(dkr3, g.gqa_group))
    dk_pre = _rope_stack(dk_post, prep.pos, g, prep.rope_base, sign=-1)
    return loss, _weight_grad(dk_pre[:, a:b, D:], prep.feats["key"]).astype(wk.dtype)


# --------------------------------------------------------------------------- #
# Training loops
# --------------------------------------------------------------------------- #
class TraceCache:
    """Memoized prefill traces and stacked tensors for a frozen model."""

    def __init__(self, model: Model, docs, config: EchoConfig, features="combined", max_len=512):
        self.model = model
        self.config = config
        self.features = features
        self.docs = [list(d)[:max_len] for d in docs]
        self.layers = [i for i in range(model.config.n_layers) if i % config.group_size]
        self._traces = {}
        self._prepared = {}

    def trace(self, idx: int):
        if idx not in self._traces:
            self._traces[idx] = prefill(self.model, self.docs[idx])
        return self._traces[idx]

    def prepared(self, idx: int) -> Prepared:
        if idx not in self._prepared:
            self._prepared[idx] = self._prepare(self.trace(idx))
        return self._prepared[idx]

    def _prepare(self, trace, reference=None):
        m = self.model.config
        return Prepared(trace, self.config, self.layers, m.geometry, m.rope_base, self.features, reference)

    def compounded(self, idx: int, bank) -> Prepared:
        """Inputs taken from an echo-mode forward with ``bank``; targets from the clean trace."""
        tr = echo_forward(self.model, self.docs[idx], bank, self.config, bank.features)
        return self._prepare(tr, reference=self.trace(idx))

    def trainable(self) -> list:
        """Indices of documents long enough to have at least one evicted row."""
        c = self.config
        idx = [i for i, d in enumerate(self.docs) if len(d) > c.sink_tokens + c.window]
        if not idx:
            raise InputError(
                f"no training sequence is longer than sinks+window={c.sink_tokens + c.window} tokens"
            )
        return idx


def _stacked(bank: PredictorBank, layers):
    wk = np.stack([bank.predictors[i].w_key for i in layers])
    wv = np.stack([bank.predictors[i].w_value for i in layers])
    return wk, wv


def _write_back(bank: PredictorBank, layers, wk, wv) -> PredictorBank:
    out = bank.copy()
    for j, i in enumerate(layers):
        out.predictors[i].w_key = wk[j].astype(np.float32)
        out.predictors[i].w_value = wv[j].astype(np.float32)
    return out


def _run(stage: int, kind: str, model, docs, bank, cfg: TrainConfig, steps: int, traces=None):
    traces = traces or TraceCache(model, docs, bank.config, bank.features, cfg.max_len)
    layers = traces.layers
    report = TrainReport()
    if steps == 0 or not layers:
        report.checksum = bank.checksum()
        report.wall_time[stage] = 0.0
        return bank.copy(), report
    pool = traces.trainable()
    rng = np.random.default_rng([cfg.seed, stage])
    wk, wv = _stacked(bank, layers)
    mk, vk = np.zeros_like(wk), np.zeros_like(wk)
    mv, vv = np.zeros_like(wv), np.zeros_like(wv)
    meter = MemoryMeter()
    t0 = time.perf_counter()
    for step in range(steps):
        idx = pool[int(rng.integers(len(pool)))]
        if kind == "o_mse" and cfg.compounding:
            prep = traces.compounded(idx, _write_back(bank, layers, wk, wv))
        else:
            prep = traces.prepared(idx)
        if kind == "kv_mse":
            loss, gk, gv = stage1_loss_grad(wk, wv, prep)
        elif kind == "o_mse":
            loss, gk, gv = omse_loss_grad(wk, wv, prep, meter)
        elif kind == "qk_kl":
            loss, gk = qkkl_loss_grad(wk, prep, meter)
            gv = None
        else:
            raise ValueError(kind)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at stage {stage} step {step}")
        lr = cosine_lr(step, steps, cfg.lr)
        wk, mk, vk = adamw_step(wk, gk, mk, vk, step + 1, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        if gv is not None:
            wv, mv, vv = adamw_step(wv, gv, mv, vv, step + 1, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        report.rows.append({
            "step": step, "stage": stage, "loss": loss, "lr": lr,
            "elapsed_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        })
    report.wall_time[stage] = time.perf_counter() - t0
    report.peak_aux_bytes[stage] = meter.peak
    out = _write_back(bank, layers, wk, wv)
    report.checksum = out.checksum()
    return out, report


def stage1_train(model, docs, bank, cfg: TrainConfig = TrainConfig(), traces=None, steps=None):
    steps = cfg.steps_stage1 if steps is None else steps
    return _run(1, "kv_mse", model, docs, bank, cfg, steps, traces)


def stage2_train(model, docs, bank, cfg: TrainConfig = TrainConfig(), traces=None, steps=None):
    steps = cfg.steps_stage2 if steps is None else steps
    return _run(2, "o_mse", model, docs, bank, cfg, steps, traces)


def stage2_train_qkkl(model, docs, bank, cfg: TrainConfig = TrainConfig(), traces=None, steps=None):
    steps = cfg.steps_stage2 if steps is None else steps
    return _run(2, "qk_kl", model, docs, bank, cfg, steps, traces)


def train_two_stage(model, docs, bank, cfg: TrainConfig = TrainConfig(), traces=None):
    traces = traces or TraceCache(model, docs, bank.config, bank.features, cfg.max_len)
    bank, report = stage1_train(model, docs, bank, cfg, traces)
    second = stage2_train_qkkl if cfg.loss_stage2 == "qk_kl" else stage2_train
    bank, r2 = second(model, docs, bank, cfg, traces)
    report.extend(r2)
    return bank, report


# --------------------------------------------------------------------------- #
# Evaluation and memory accounting
# --------------------------------------------------------------------------- #
def layer_omse(model: Model, trace, predictor, config: EchoConfig, features="combined") -> dict:
    """Teacher-forced per-layer attention-output MSE, rebuilt through the store."""
    g = model.geometry
    base = model.config.rope_base
    store = evict(trace.kv, config)
    observe = getattr(predictor, "observe", None)
    if observe is not None:
        for kv in trace.kv:
            observe(kv.layer, 0, kv.k_pre_rope, kv.v)
    pos = np.arange(trace.kv[0].n_tokens)
    result = {}
    for i in store.layout.compressed:
        k, v = store.materialize(i, predictor, features)
        out = causal_attention(trace.q[i], rope_apply(k, pos, g, base), v, g)
        d = out.astype(np.float64) - trace.attn_out[i]
        result[i] = float(np.mean(d * d))
    return result


def heldout_omse(model: Model, docs, predictor, config: EchoConfig, features="combined",
                 max_len: int = 512) -> float:
    """Mean teacher-forced O-MSE over documents and compressed layers."""
    vals = []
    for d in docs:
        per_layer = layer_omse(model, prefill(model, list(d)[:max_len]), predictor, config, features)
        vals.extend(per_layer.values())
    return float(np.mean(vals)) if vals else 0.0


def peak_aux_bytes(loss: str, L: int, geometry, seed: int = 0, config: EchoConfig = None) -> int:
    """Accounted peak scratch memory of one loss+gradient evaluation on a
    single compressed layer of length ``L`` (random stand-in tensors)."""
    from types import SimpleNamespace

    rng = np.random.default_rng(seed)
    config = config or EchoConfig(2, 0, geometry.d_kv)

    def rand(w):
        return rng.standard_normal((L, w)).astype(np.float32)

    kv = [LayerKV(i, rand(geometry.d_kv), rand(geometry.d_kv)) for i in range(2)]
    trace = SimpleNamespace(kv=kv, q=[rand(geometry.d_q)] * 2, attn_out=[rand(geometry.d_q)] * 2)
    prep = Prepared(trace, config, [1], geometry, 10000.0)
    w = np.zeros((1, config.drop_dim, config.feature_dim()), np.float32)
    meter = MemoryMeter()
    if loss == "o_mse":
        omse_loss_grad(w, w.copy(), prep, meter)
    elif loss == "qk_kl":
        qkkl_loss_grad(w, prep, meter)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return meter.peak
