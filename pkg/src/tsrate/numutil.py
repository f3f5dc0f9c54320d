"""Shared numerically-stable primitives used across fitting and training."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-stream seed from a base seed and a string tag."""
    return (seed * 0x1F1F1F1F + zlib.crc32(tag.encode())) % (2**63)


def sigmoid(x):
    """Stable logistic function, elementwise."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if scalar:
        return float(out[0])
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) via the softplus identity, safe for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def logit(p: float) -> float:
    """Inverse of sigmoid for scalar p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit undefined for p={p}")
    return float(np.log(p) - np.log1p(-p))


def oriented_sigmoid(delta: float, sharpness: float) -> float:
    """sigmoid(sharpness * delta) with exact complement symmetry.

    Computed so that oriented_sigmoid(-d, k) == 1 - oriented_sigmoid(d, k)
    bitwise, which plain sigmoid does not guarantee.
    """
    if delta >= 0.0:
        return float(sigmoid(sharpness * delta))
    return 1.0 - float(sigmoid(sharpness * -delta))
