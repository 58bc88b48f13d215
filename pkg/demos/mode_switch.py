"""
Switching a live cache between full and echo mode
=================================================
"""

import numpy as np

from echokv import EchoConfig, OraclePredictor, switch_mode
from echokv.harness import run_bench, token_stream
from echokv.model import FullCache, ModelConfig, decode_step, init_model, prefill

model = init_model(ModelConfig())
echo = EchoConfig(2, 16, 64, window=64)
stream = token_stream(600, seed=0)

# Prefill into a full cache, then compress it in place of the original.
cache = FullCache.from_trace(prefill(model, stream[:596]))
print("full bytes", cache.nbytes())
oracle = OraclePredictor(echo)
small = switch_mode(cache, "echo", oracle, echo)
print("echo bytes", small.nbytes())

# With an oracle the reconstruction is exact, so decoding agrees with full mode.
ref = FullCache.from_trace(prefill(model, stream[:596]))
for t in stream[596:]:
    a, ref = decode_step(model, ref, t)
    b, small = decode_step(model, small, t)
    print(f"token {t:3d}  max |logit diff| {np.max(np.abs(a - b)):.2e}")

# Converting back restores the exact full cache, including the decoded tokens.
back = switch_mode(small, "full", oracle)
print("round trip identical:", all(np.array_equal(x, y) for x, y in zip(back.k, ref.k)))

# The benchmark picks the mode per input length under a byte cap.
for row in run_bench(model, OraclePredictor(echo), echo, [128, 1024], decode_tokens=4, cap_bytes=3_000_000):
    print(row["tokens"], row["mode"], f"ratio {row['achieved_ratio']:.3f}", "fits" if row["fits_cap"] else "over")
