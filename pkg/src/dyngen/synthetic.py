"""Planted models and the datasets they generate, for tests and demos."""
from __future__ import annotations

import numpy as np

from .diffcore import SeededRng
from .model import DynamicGenerator, LatentTrajectory, ModelConfig, rollout


def planted_model(cfg: ModelConfig, seed: int = 0, gain: float = 1.0) -> DynamicGenerator:
    """Random model whose weights are ``N(0, gain^2 / fan_in)``.

    Unlike the small default initialisation, this keeps hidden signals of
    order one, so the generated frames actually move.
    """
    model = DynamicGenerator(cfg, seed=seed)
    rng = SeededRng(seed, (0x91A,))
    for p in model.parameters():
        if p.name.endswith(".W"):
            p.data = gain * rng.standard_normal(p.shape) / np.sqrt(p.shape[1])
        elif p.name.endswith(".K"):
            k, _, cin, _ = p.shape
            p.data = gain * rng.standard_normal(p.shape) / np.sqrt(cin * k * k / 4)
    return model


def sample_sequences(model: DynamicGenerator, n: int, T: int, rng: SeededRng, noise_std: float = 0.0):
    """Draw ``n`` sequences from the model's prior; returns ``(X, latents)``.

    ``X`` has shape ``[n, T, H, W, C]`` and is clipped to ``[-1, 1]`` after
    adding ``N(0, noise_std^2)`` observation noise.
    """
    lat = LatentTrajectory.from_prior(model.cfg, T, rng, batch=(n,))
    X = rollout(lat, model)
    if noise_std:
        X = X + noise_std * rng.standard_normal(X.shape)
    return np.clip(X, -1.0, 1.0), lat


def block_masks(shape, block: int, rng: SeededRng) -> np.ndarray:
    """One randomly placed ``block x block`` hole per frame (True = visible)."""
    n, T, H, W, C = shape
    mask = np.ones(shape, dtype=bool)
    u = rng.uniform(2 * n * T).reshape(n, T, 2)
    for i in range(n):
        for t in range(T):
            r = int(u[i, t, 0] * (H - block + 1))
            c = int(u[i, t, 1] * (W - block + 1))
            mask[i, t, r : r + block, c : c + block, :] = False
    return mask


def frame_masks(shape, fraction: float, rng: SeededRng) -> np.ndarray:
    """Hide ``round(fraction * T)`` whole frames per sequence, chosen at random."""
    n, T = shape[:2]
    mask = np.ones(shape, dtype=bool)
    k = int(round(fraction * T))
    for i in range(n):
        order = np.argsort(rng.uniform(T), kind="stable")
        mask[i, order[:k]] = False
    return mask


def temporal_mean_baseline(X, mask) -> np.ndarray:
    """Per-pixel mean over the visible frames, broadcast back over time.

    Pixels never visible fall back to the sequence's global visible mean.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    w = mask.astype(np.float64)
    num = (X * w).sum(axis=-4, keepdims=True)
    den = w.sum(axis=-4, keepdims=True)
    glob = (X * w).sum(axis=(-4, -3, -2, -1), keepdims=True) / np.maximum(w.sum(axis=(-4, -3, -2, -1), keepdims=True), 1)
    mean = np.where(den > 0, num / np.maximum(den, 1), glob)
    return np.broadcast_to(mean, X.shape).copy()
