"""Desk-scale KV-cache compression by layer-grouped eviction and learned
linear reconstruction of the dropped heads."""

from .cache import (
    EchoCache,
    EchoConfig,
    EchoStore,
    MeanPredictor,
    OraclePredictor,
    Predictor,
    PredictorBank,
    assemble_features,
    compute_bytes,
    compute_ratio,
    count_params,
    echo_forward,
    evict,
    init_bank,
    partition_layers,
    predict_dropped,
    reconstruct_layer,
    switch_mode,
)
from .checkpoint import load_bank, load_scores, save_bank, save_scores
from .corpus import load_corpus, split_heldout, synthetic_text, write_synthetic_corpus
from .errors import ConfigError, DimensionError, InputError, TrainingError, UsageError
from .hybrid import HybridConfig, calibrate_key_channels, hybrid_forward, prune_keys
from .kernel import AttentionGeometry
from .model import FullCache, LayerKV, ModelConfig, decode_step, init_model, prefill
from .train import (
    TrainConfig,
    TrainReport,
    heldout_omse,
    stage1_train,
    stage2_train,
    stage2_train_qkkl,
    train_two_stage,
)

__version__ = "0.1.0"
