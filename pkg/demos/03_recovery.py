"""Fill in occluded pixels by learning only from what is visible.

Two settings: one 6x6 hole per frame, and half the frames missing entirely.
The model never reads an occluded pixel; the ground truth is only used to
score the result.
"""
import sys

import numpy as np

from dyngen import LangevinConfig, ModelConfig, SeededRng, TrainConfig, per_pixel_error, recover
from dyngen.synthetic import block_masks, frame_masks, planted_model, sample_sequences, temporal_mean_baseline

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200

# %%
truth = planted_model(ModelConfig(d=4, d_noise=2, frame_shape=(16, 16, 1), emission_hidden=(32,)), seed=7, gain=1.5)
X, _ = sample_sequences(truth, 10, 30, SeededRng(11), noise_std=0.1)

# %%
cfg = TrainConfig(iterations=iterations, langevin=LangevinConfig(sigma=0.5))
for name, M in (("6x6 block", block_masks(X.shape, 6, SeededRng(21))),
                ("50% frames", frame_masks(X.shape, 0.5, SeededRng(22)))):
    filled = recover(np.where(M, X, 0.0), M, ModelConfig(), cfg)
    model_err = per_pixel_error(filled, X, ~M)
    base_err = per_pixel_error(temporal_mean_baseline(X, M), X, ~M)
    print(f"{name:10s}  occluded error: model {model_err:6.2f}   temporal-mean baseline {base_err:6.2f}")
