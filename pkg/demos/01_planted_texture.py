"""Learn a dynamic texture from sequences drawn by a known ("planted") model.

Run with ``python demos/01_planted_texture.py [iterations]``.  Frames of the
synthesized texture are written to ``demo_output/planted/`` as PGM files.
"""
import sys
from pathlib import Path

import numpy as np

from dyngen import LangevinConfig, ModelConfig, SeededRng, TrainConfig, synthesize, train
from dyngen.io import export_frames, write_sequence
from dyngen.synthetic import planted_model, sample_sequences

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path("demo_output/planted")

# %% [markdown]
# The planted model has a 4-d state, 2-d innovations and an MLP decoder.  Its
# weights are drawn with gain 1.5 so that the frames actually move.

# %%
truth = planted_model(ModelConfig(d=4, d_noise=2, frame_shape=(16, 16, 1), emission_hidden=(32,)), seed=7, gain=1.5)
X, _ = sample_sequences(truth, 10, 30, SeededRng(11), noise_std=0.1)
print("data", X.shape, "pixel std", round(float(X.std()), 3))
print("noise floor (mean |noise| on the 0-255 scale):", round(0.1 * np.sqrt(2 / np.pi) * 127.5, 2))

# %% [markdown]
# The learner is the default desk-scale model (10-d state, 5-d noise).  Every
# iteration runs 15 Langevin steps on the latents of each sequence and one
# Adam step on the weights.

# %%
cfg = TrainConfig(iterations=iterations, langevin=LangevinConfig(step_size=0.03, steps=15, sigma=1.0))


def progress(state, row):
    if row.iter % 50 == 0 or row.iter == 1:
        print(f"iter {row.iter:5d}  log joint {row.log_joint:12.1f}  visible error {row.recon_err_visible:6.2f}")


state, rows = train(list(X), cfg, ModelConfig(), callback=progress)

# %% [markdown]
# Once trained, the model generates new textures from fresh noise.  A burn-in
# period lets the state forget its starting point.

# %%
video = synthesize(state.model, SeededRng(1), T=60, burn_in=60)
out.mkdir(parents=True, exist_ok=True)
write_sequence(np.clip(video, -1, 1), out / "synth.dgsq")
export_frames(np.clip(video, -1, 1), out / "frames")
print("frame-to-frame change of the synthesized video:", round(float(np.abs(np.diff(video, axis=0)).mean() * 127.5), 2))
print("frame-to-frame change of the training data:   ", round(float(np.abs(np.diff(X, axis=1)).mean() * 127.5), 2))
print("wrote", out)
