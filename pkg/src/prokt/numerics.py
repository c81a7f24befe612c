"""Stable primitives on the probability simplex.

All functions reduce along the last axis, so a 1-D input yields a scalar and a
2-D batch yields one value per row. Arithmetic is float64 throughout and all
logarithms are natural (nats).
"""

from __future__ import annotations

import numpy as np

CLAMP_EPS = 1e-12


def _as_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def log_sum_exp(v) -> np.ndarray | float:
    """log(sum(exp(v))) along the last axis, computed with a max shift."""
    v = _as_float(v)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("empty vector")
    m = np.max(v, axis=-1, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=-1, keepdims=True)) + m
    out = np.squeeze(out, axis=-1)
    return float(out) if out.ndim == 0 else out


def softmax_t(u, T: float = 1.0) -> np.ndarray:
    """Temperature softmax ``exp(u_i / T) / sum_j exp(u_j / T)``."""
    if not T > 0:
        raise ValueError("nonpositive temperature")
    z = _as_float(u) / T
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("empty vector")
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _as_float(p), _as_float(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def cross_entropy(p, q):
    """H(p, q) = -sum_i p_i log q_i. ``p`` may be one-hot or a distribution."""
    p, q = _check_pair(p, q)
    out = -np.sum(p * np.log(np.maximum(q, CLAMP_EPS)), axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(p, q):
    """KL(p || q) = sum_i p_i log(p_i / q_i); entries with p_i = 0 contribute 0."""
    p, q = _check_pair(p, q)
    logp = np.log(np.maximum(p, CLAMP_EPS))
    logq = np.log(np.maximum(q, CLAMP_EPS))
    terms = np.where(p > 0, p * (logp - logq), 0.0)
    out = np.maximum(np.sum(terms, axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    out = np.zeros((labels.shape[0], K), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def derive_rng(seed: int, tag: str, *extra: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, tag, *extra)``.

    Streams with different tags never share state, so e.g. changing how many
    batches are drawn cannot perturb parameter initialisation.
    """
    key = [int(b) for b in tag.encode("utf-8")]
    return np.random.default_rng(np.random.SeedSequence([int(seed), len(key), *key, *map(int, extra)]))
