"""Independent numpy reference implementations used as test oracles.

Nothing here imports the autodiff core; every function works on plain
float64 arrays.
"""
import math

import numpy as np


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def affine(x, p, name):
    return x @ p[f"{name}.weight"] + p[f"{name}.bias"]


def feed_forward(x, p, prefix, eps=1e-5):
    h = layer_norm(x, p[f"{prefix}.ln_ff.gamma"], p[f"{prefix}.ln_ff.beta"], eps)
    return affine(gelu(affine(h, p, f"{prefix}.ff1")), p, f"{prefix}.ff2")


def masked_softmax(scores, keep):
    """Softmax over the last axis; rows without a kept entry give zeros."""
    z = np.where(keep, scores, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(z - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def full_cross_attention(latent, inputs, mask, p, n_heads, prefix="wca.cross", eps=1e-5):
    """Cross attention of every latent token over all ``T*V`` input tokens.

    A block-diagonal keep-mask confines the query at hour ``t`` to the
    observations of hour ``t``. Residual, feed-forward and the pass-through
    of fully masked hours follow the windowed block's definition.
    """
    B, T, H_l = latent.shape
    V = inputs.shape[2]
    H_a = p[f"{prefix}.q.weight"].shape[1]
    d = H_a // n_heads
    q = affine(layer_norm(latent, p[f"{prefix}.ln_q.gamma"], p[f"{prefix}.ln_q.beta"], eps), p, f"{prefix}.q")
    kv_in = layer_norm(inputs, p[f"{prefix}.ln_kv.gamma"], p[f"{prefix}.ln_kv.beta"], eps).reshape(B, T * V, -1)
    k = affine(kv_in, p, f"{prefix}.k")
    v = affine(kv_in, p, f"{prefix}.v")
    hour_of_key = np.repeat(np.arange(T), V)
    block = hour_of_key[None, :] == np.arange(T)[:, None]                 # (T, T*V)
    keep = block[None] & mask.reshape(B, 1, T * V)                        # (B, T, T*V)
    out = np.zeros((B, T, H_a))
    for h in range(n_heads):
        sl = slice(h * d, (h + 1) * d)
        scores = q[..., sl] @ k[..., sl].transpose(0, 2, 1) / math.sqrt(d)
        out[..., sl] = masked_softmax(scores, keep) @ v[..., sl]
    out = affine(out, p, f"{prefix}.o")
    observed = mask.any(axis=-1)[..., None]
    latent = latent + np.where(observed, out, 0.0)
    return latent + np.where(observed, feed_forward(latent, p, prefix, eps), 0.0)


def nse(pred, obs):
    pred, obs = np.asarray(pred, float), np.asarray(obs, float)
    return 1.0 - np.sum((obs - pred) ** 2) / np.sum((obs - obs.mean()) ** 2)


def circular_mean_deg(a, b):
    r = np.radians([a, b])
    return math.degrees(math.atan2(np.sin(r).sum(), np.cos(r).sum())) % 360.0
