"""Check Langevin posterior sampling against the exact answer on a linear model.

With identity activations the dynamic generator is a linear-Gaussian state
space model, whose posterior the Kalman/RTS smoother gives in closed form.
"""
import numpy as np

from dyngen import SeededRng
from dyngen.oracles import compare_langevin_to_smoother, dense_posterior, kalman_smoother, random_stable_ssm

# %%
rng = SeededRng(2)
ssm = random_stable_ssm(d=2, d_noise=2, D=3, sigma=0.5, rng=rng)
X, s0, xi = ssm.sample(10, rng)
exact = kalman_smoother(ssm, X)
mean, cov = dense_posterior(ssm, X)
print("smoother vs dense solve, max mean difference:", float(np.abs(exact.mean - mean).max()))

# %% [markdown]
# Unadjusted Langevin trades two errors.  A large step is biased (and past a
# point diverges); a small step is nearly unbiased but mixes slowly, so a
# short run is dominated by Monte Carlo error.  Longer runs shrink the latter.

# %%
for delta, steps in ((0.5, 2000), (0.05, 5000), (0.01, 5000), (0.01, 20000)):
    res = compare_langevin_to_smoother(ssm, X, step_size=delta, steps=steps, burn_in=steps // 4, chains=100)
    print(f"delta {delta:5.3f}, {steps:5d} steps: mean RMSE {res.rmse:.4f}, worst variance error {res.max_var_rel_error:.3f}")

# %%
print("exact s0 mean:  ", np.round(exact.s0_mean, 3))
print("sampled s0 mean:", np.round(res.sample_mean[:2], 3))
