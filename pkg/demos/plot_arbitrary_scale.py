"""
Arbitrary-scale upsampling versus bicubic
=========================================

One network serves every upsampling factor, including non-integer ones. This
script trains a small model on synthetic scenes for a short while and
compares it with bicubic interpolation at several scales. Expect about a
minute of CPU time.
"""

# %%
# Data
# ----
# The synthetic generator draws piecewise-smooth depth with a guide image
# whose edges line up with the depth discontinuities.

import time

from geodsr import tensor as T
from geodsr.evaluation import EvalItem, benchmark, format_table
from geodsr.network import GeoDsrNetwork, NetworkConfig
from geodsr.synthetic import SyntheticSceneSpec, gen_synthetic
from geodsr.training import TrainConfig, run_stage

train = gen_synthetic(SyntheticSceneSpec(count=100, seed=1, size=64))
test = [EvalItem(d, g) for d, g in gen_synthetic(SyntheticSceneSpec(count=10, seed=999, size=64))]
print(f"{len(train)} training scenes, {len(test)} held-out scenes of 64x64")

# %%
# Training
# --------
# Stage one fixes the scale at 8. Stage two draws a fresh real-valued scale
# for every crop, which is what teaches the network to interpolate between
# factors.

net = GeoDsrNetwork(NetworkConfig.desk(seed=0))
t0 = time.perf_counter()
with T.checked(False):
    first = run_stage(net, train, TrainConfig.desk(stage=1, max_steps=200))
    second = run_stage(net, train, TrainConfig.desk(stage=2, max_steps=200))
print(f"trained {net.num_parameters()} parameters in {time.perf_counter() - t0:.0f}s")
print(f"stage 1 loss {first.loss_values()[:10].mean():.4f} -> {first.loss_values()[-20:].mean():.4f}")

# %%
# Evaluation
# ----------
# RMSE is reported in 0-255 depth levels. Integer scales crop the image to a
# multiple of the factor; real-valued scales keep the full frame.

scales = [2.5, 3.7, 4.0, 5.3, 8.0]
reports = [benchmark("bicubic", test, scales), benchmark(net, test, scales)]
print(format_table(reports))
