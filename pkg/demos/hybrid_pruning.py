"""
Key-channel pruning combined with echo values
=============================================
"""

from echokv import EchoConfig, OraclePredictor
from echokv.corpus import synthetic_text, tokenize
from echokv.hybrid import HybridConfig, calibrate_key_channels, hybrid_report
from echokv.model import ModelConfig, init_model

model = init_model(ModelConfig())
docs = [tokenize(t)[:512] for t in synthetic_text()]

# Channel importance from a few calibration documents
scores = calibrate_key_channels(model, docs[:4])
print("layer 1 top channels:", scores[1].argsort()[::-1][:8])

# Oracle values isolate the error that key pruning alone introduces.
echo = EchoConfig(2, 0, 64)
for keep in (1.0, 0.75, 0.5, 0.25):
    rep = hybrid_report(model, docs[-1], HybridConfig(keep, echo, scores), OraclePredictor(echo))
    worst = max(rep["per_layer_output_mse"])
    print(f"keep {keep:.2f}  overall ratio {rep['overall_ratio']:.3f}  worst layer O-MSE {worst:.2e}")
