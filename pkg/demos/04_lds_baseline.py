"""The classical linear dynamic texture next to the nonlinear generator.

The linear model projects frames onto their top principal components and fits
a first-order autoregression to the projections.
"""
import sys

import numpy as np

from dyngen import ModelConfig, SeededRng, TrainConfig, synthesize, train
from dyngen.oracles import lds_fit, lds_reconstruct, lds_synthesize
from dyngen.synthetic import planted_model, sample_sequences

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# %%
truth = planted_model(ModelConfig(d=4, d_noise=2, frame_shape=(16, 16, 1), emission_hidden=(32,)), seed=7, gain=1.5)
X, _ = sample_sequences(truth, 1, 60, SeededRng(11), noise_std=0.05)
seq = X[0]

# %%
for d in (2, 4, 8, 16):
    fit = lds_fit(seq, d)
    err = np.abs(lds_reconstruct(fit, seq) - seq).mean() * 127.5
    rho = np.abs(np.linalg.eigvals(fit.A)).max()
    print(f"LDS d={d:2d}: reconstruction error {err:6.2f}, spectral radius {rho:.3f}")

# %%
state, rows = train([seq], TrainConfig(iterations=iterations), ModelConfig())
print(f"dynamic generator after {iterations} iterations: visible error {rows[-1].recon_err_visible:.2f}")

# %% [markdown]
# Both models can then run forward on their own.  A stable linear model decays
# toward the mean frame unless driven by innovations.

# %%
lin = lds_synthesize(lds_fit(seq, 8), 200, SeededRng(3))
dyn = synthesize(state.model, SeededRng(3), T=200, burn_in=60)
for name, v in (("data", seq), ("LDS", lin), ("dynamic generator", dyn)):
    print(f"{name:18s} pixel std {v.std():.3f}, mean frame-to-frame change {np.abs(np.diff(v, axis=0)).mean() * 127.5:.2f}")
