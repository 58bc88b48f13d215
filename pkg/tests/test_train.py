import numpy as np
import pytest

from echokv.cache import EchoConfig, OraclePredictor, init_bank
from echokv.corpus import tokenize
from echokv.errors import TrainingError
from echokv.kernel import MemoryMeter
from echokv.model import forward, prefill
from echokv.train import (
    Prepared,
    TraceCache,
    TrainConfig,
    heldout_omse,
    layer_omse,
    omse_loss_grad,
    peak_aux_bytes,
    qkkl_loss_grad,
    stage1_loss_grad,
    stage1_train,
    stage2_train,
    stage2_train_qkkl,
    train_two_stage,
)

TOY = EchoConfig(2, 4, 8, sink_tokens=1, window=1)


def toy_prepared(model, n_tokens=6, seed=0):
    toks = list(np.random.default_rng(seed).integers(0, 256, n_tokens))
    tr = prefill(model, toks)
    g = model.geometry
    return Prepared(tr, TOY, [1, 3], g, model.config.rope_base).astype(np.float64)


def toy_weights(prep, seed):
    rng = np.random.default_rng(seed)
    shape = (2, TOY.drop_dim, TOY.feature_dim())
    return rng.normal(0, 0.3, shape), rng.normal(0, 0.3, shape)


def finite_diff(f, w, h=1e-3):
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        g[idx] = (f(wp) - f(wm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric):
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-3, rel
    big = np.abs(numeric) > 1e-3 * np.abs(numeric).max()
    assert np.all(np.abs(analytic - numeric)[big] <= 1e-3 * np.abs(numeric)[big] + 1e-9)


def test_toy_instance_shape(tiny_model):
    prep = toy_prepared(tiny_model)
    assert prep.L == 6 and prep.geometry.d_head == 4 and prep.mid == (1, 5)


@pytest.mark.parametrize("seed", [0, 1])
def test_stage1_gradient(tiny_model, seed):
    prep = toy_prepared(tiny_model, seed=seed)
    wk, wv = toy_weights(prep, seed)
    _, gk, gv = stage1_loss_grad(wk, wv, prep)
    assert_grad_close(gk, finite_diff(lambda w: stage1_loss_grad(w, wv, prep)[0], wk))
    assert_grad_close(gv, finite_diff(lambda w: stage1_loss_grad(wk, w, prep)[0], wv))


def test_stage1_loss_is_mean_of_key_and_value_mse(tiny_model):
    prep = toy_prepared(tiny_model)
    wk, wv = toy_weights(prep, 3)
    loss, _, _ = stage1_loss_grad(wk, wv, prep)
    mk = np.mean((prep.feats["key"] @ np.swapaxes(wk, 1, 2) - prep.target["key"]) ** 2)
    mv = np.mean((prep.feats["value"] @ np.swapaxes(wv, 1, 2) - prep.target["value"]) ** 2)
    assert loss == pytest.approx((mk + mv) / 2, rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_omse_gradient(tiny_model, seed):
    prep = toy_prepared(tiny_model, seed=seed)
    wk, wv = toy_weights(prep, seed + 10)
    _, gk, gv = omse_loss_grad(wk, wv, prep)
    assert_grad_close(gk, finite_diff(lambda w: omse_loss_grad(w, wv, prep)[0], wk))
    assert_grad_close(gv, finite_diff(lambda w: omse_loss_grad(wk, w, prep)[0], wv))


@pytest.mark.parametrize("seed", [0, 1])
def test_qkkl_gradient(tiny_model, seed):
    prep = toy_prepared(tiny_model, seed=seed)
    wk, _ = toy_weights(prep, seed + 20)
    wk = wk * 5  # push the distributions apart so the loss is not ~0
    _, gk = qkkl_loss_grad(wk, prep)
    assert_grad_close(gk, finite_diff(lambda w: qkkl_loss_grad(w, prep)[0], wk))


def test_qkkl_gradient_three_tokens(tiny_model):
    cfg = EchoConfig(2, 4, 8, sink_tokens=0, window=0)
    tr = prefill(tiny_model, [5, 77, 201])
    prep = Prepared(tr, cfg, [1, 3], tiny_model.geometry, 10000.0).astype(np.float64)
    wk = np.random.default_rng(4).normal(0, 1.0, (2, 4, 12))
    _, gk = qkkl_loss_grad(wk, prep)
    assert_grad_close(gk, finite_diff(lambda w: qkkl_loss_grad(w, prep)[0], wk))


def copy_leader_trace(model, tokens):
    """Trace in which each compressed layer's K/V equals its leader's."""
    saved = {}

    def hook(layer, k, v):
        if layer % 2 == 0:
            saved[layer] = (k, v)
            return k, v
        return saved[layer - 1]

    return forward(model, tokens, hook)


def test_perfect_weights_give_zero_losses(desk_model, docs):
    cfg = EchoConfig(2, 0, 64)
    tr = copy_leader_trace(desk_model, docs[0][:300])
    prep = Prepared(tr, cfg, [1, 3, 5, 7], desk_model.geometry, 10000.0)
    eye = np.broadcast_to(np.eye(64, dtype=np.float32), (4, 64, 64)).copy()
    assert stage1_loss_grad(eye, eye, prep)[0] == 0.0
    assert omse_loss_grad(eye, eye, prep)[0] < 1e-12
    assert qkkl_loss_grad(eye, prep)[0] < 1e-9


def test_oracle_has_zero_omse(desk_model, split):
    train, held = split
    cfg = EchoConfig(2, 16, 64)
    assert heldout_omse(desk_model, held, OraclePredictor(cfg), cfg) == 0.0
    per = layer_omse(desk_model, prefill(desk_model, held[0]), OraclePredictor(cfg), cfg)
    assert sorted(per) == [1, 3, 5, 7] and all(v == 0.0 for v in per.values())


# ---- training runs ----

@pytest.fixture(scope="module")
def setup(desk_model, split):
    train, _ = split
    cfg = EchoConfig(2, 16, 64)
    bank = init_bank(8, desk_model.geometry, cfg, seed=42)
    return desk_model, train, cfg, bank, TraceCache(desk_model, train, cfg)


def test_zero_steps_leaves_bank(setup):
    model, train, cfg, bank, traces = setup
    for fn in (stage1_train, stage2_train, stage2_train_qkkl):
        out, rep = fn(model, train, bank, TrainConfig(), traces, steps=0)
        assert out.checksum() == bank.checksum() and rep.rows == []


def test_first_loss_is_initial_bank_loss(setup):
    model, train, cfg, bank, traces = setup
    _, rep = stage1_train(model, train, bank, TrainConfig(), traces, steps=3)
    rng = np.random.default_rng([42, 1])
    idx = traces.trainable()[int(rng.integers(len(traces.trainable())))]
    wk = np.stack([bank.predictors[i].w_key for i in traces.layers])
    wv = np.stack([bank.predictors[i].w_value for i in traces.layers])
    assert rep.rows[0]["loss"] == stage1_loss_grad(wk, wv, traces.prepared(idx))[0]


def test_report_shape_and_schedule(setup):
    model, train, cfg, bank, traces = setup
    tc = TrainConfig(steps_stage1=30, steps_stage2=4)
    out, rep = train_two_stage(model, train, bank, tc, traces)
    assert len(rep.losses(1)) == 30 and len(rep.losses(2)) == 4
    assert all(np.isfinite(rep.losses(1) + rep.losses(2)))
    assert rep.lrs(1)[0] == rep.lrs(2)[0] == tc.lr
    assert rep.lrs(1)[-1] < 1e-2 * tc.lr
    assert rep.checksum == out.checksum()
    assert set(rep.rows[0]) == {"step", "stage", "loss", "lr", "elapsed_ms"}


def test_training_is_deterministic_and_backbone_frozen(setup):
    model, train, cfg, bank, traces = setup
    before = model.checksum()
    tc = TrainConfig(steps_stage1=5, steps_stage2=5)
    a, ra = train_two_stage(model, train, bank, tc, TraceCache(model, train, cfg))
    b, rb = train_two_stage(model, train, bank, tc, TraceCache(model, train, cfg))
    assert a.checksum() == b.checksum()
    assert ra.to_jsonl(timing=False) == rb.to_jsonl(timing=False)
    assert model.checksum() == before


def test_training_does_not_mutate_input_bank(setup):
    model, train, cfg, bank, traces = setup
    before = bank.checksum()
    stage2_train(model, train, bank, TrainConfig(), traces, steps=2)
    assert bank.checksum() == before


def test_qkkl_trains_keys_only(setup):
    model, train, cfg, bank, traces = setup
    out, _ = stage2_train_qkkl(model, train, bank, TrainConfig(), traces, steps=3)
    for i in traces.layers:
        np.testing.assert_array_equal(out.predictors[i].w_value, bank.predictors[i].w_value)
        assert not np.array_equal(out.predictors[i].w_key, bank.predictors[i].w_key)


def test_compounding_variant_runs(setup):
    model, train, cfg, bank, _ = setup
    out, rep = stage2_train(model, train, bank, TrainConfig(compounding=True), None, steps=2)
    assert len(rep.rows) == 2 and out.checksum() != bank.checksum()


def test_non_finite_weights_abort(setup):
    model, train, cfg, bank, traces = setup
    bad = bank.copy()
    bad.predictors[1].w_key[0, 0] = np.nan
    with pytest.raises(TrainingError):
        stage1_train(model, train, bad, TrainConfig(), traces, steps=1)


def test_short_corpus_is_rejected(desk_model):
    from echokv.errors import InputError
    cfg = EchoConfig(2, 16, 64)
    bank = init_bank(8, desk_model.geometry, cfg)
    with pytest.raises(InputError):
        stage1_train(desk_model, [tokenize("too short")], bank, TrainConfig(), steps=1)


def test_qkkl_scratch_is_quadratic(desk_model):
    g = desk_model.geometry
    small = peak_aux_bytes("qk_kl", 256, g), peak_aux_bytes("o_mse", 256, g)
    large = peak_aux_bytes("qk_kl", 512, g), peak_aux_bytes("o_mse", 512, g)
    assert large[0] / small[0] > 3.5
    assert large[1] / small[1] < 2.5


def test_meter_tracks_peak():
    m = MemoryMeter()
    a, b = np.zeros(10), np.zeros(5)
    m.charge(a)
    m.charge(b)
    m.release(b)
    m.release(a)
    assert m.peak == 120 and m.current == 0
