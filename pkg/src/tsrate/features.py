"""Frozen deterministic feature encoder for fixed-length blocks.

Produces a 24-dimensional summary of one block: raw location/scale plus
shape statistics computed on the within-block z-normalized values.  The
encoder is versioned so serialized rater weights can reject features they
were not trained on.
"""

from __future__ import annotations

import numpy as np

from tsrate.core import Block

ENCODER_VERSION = "tsfeat-v1"
FEATURE_DIM = 24

FEATURE_NAMES = (
    "mean",
    "std",
    "min",
    "max",
    "median",
    "iqr",
    "ols_slope",
    "ols_r2",
    "mean_abs_diff",
    "std_diff",
    "autocorr_lag1",
    "autocorr_lag2",
    "autocorr_lag4",
    "autocorr_lag8",
    "fft_share_1",
    "fft_freq_1",
    "fft_share_2",
    "fft_freq_2",
    "fft_share_3",
    "fft_freq_3",
    "spectral_entropy",
    "zero_cross_rate",
    "skewness",
    "kurtosis",
)


def _autocorr(z: np.ndarray, lag: int) -> float:
    """Autocorrelation of a zero-mean series at ``lag``; 0 when undefined."""
    n = z.size
    if lag >= n:
        return 0.0
    denom = float(np.dot(z, z))
    if denom == 0.0:
        return 0.0
    return float(np.dot(z[:-lag], z[lag:]) / denom)


def _ols_line(z: np.ndarray):
    """Least-squares fit of z against time normalized to [0, 1].

    Returns (slope, r_squared, fitted_line).
    """
    n = z.size
    t = np.linspace(0.0, 1.0, n)
    t_centered = t - t.mean()
    tt = float(np.dot(t_centered, t_centered))
    slope = float(np.dot(t_centered, z) / tt)
    fitted = slope * t_centered + z.mean()
    zz = float(np.dot(z - z.mean(), z - z.mean()))
    if zz == 0.0:
        r2 = 0.0
    else:
        explained = slope * slope * tt
        r2 = min(1.0, explained / zz)
    return slope, r2, fitted


def encode(block: Block) -> np.ndarray:
    """Encode one block into the fixed 24-entry feature vector.

    Raw mean and std are kept as-is; every other statistic is computed on
    the z-normalized values so scale does not leak into the shape features.
    Degenerate inputs (constant blocks, zero spectra) map to zeros instead
    of NaN.
    """
    x = np.asarray(block.values, dtype=np.float64)
    n = x.size
    if n < 4:
        raise ValueError(f"block {block.block_id!r} has {n} points; encoder needs >= 4")

    mean = float(x.mean())
    std = float(x.std())
    constant = std == 0.0
    z = np.zeros_like(x) if constant else (x - mean) / std

    q1, med, q3 = np.percentile(z, [25.0, 50.0, 75.0])
    slope, r2, fitted = _ols_line(z)
    detrended = z - fitted

    diffs = np.diff(z)
    mean_abs_diff = float(np.abs(diffs).mean())
    std_diff = float(diffs.std())

    ac = [_autocorr(z, lag) for lag in (1, 2, 4, 8)]

    spectrum = np.abs(np.fft.rfft(z))[1:]  # drop the DC bin
    mag_total = float(spectrum.sum())
    n_bins = spectrum.size
    if mag_total == 0.0 or n_bins == 0:
        top = [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]
        entropy = 0.0
    else:
        shares = spectrum / mag_total
        order = np.argsort(-shares, kind="stable")[:3]
        top = [(float(shares[k]), float((k + 1) / n)) for k in order]
        while len(top) < 3:
            top.append((0.0, 0.0))
        power = spectrum * spectrum
        p = power / power.sum()
        nz = p[p > 0]
        entropy = float(-(nz * np.log(nz)).sum())
        if n_bins > 1:
            entropy /= np.log(n_bins)

    signs = np.sign(detrended)
    signs = signs[signs != 0]
    crossings = int(np.count_nonzero(np.diff(signs))) if signs.size > 1 else 0
    zcr = crossings / (n - 1)

    if constant:
        skew = 0.0
        kurt = 0.0
    else:
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4) - 3.0)

    features = np.array(
        [
            mean,
            std,
            float(z.min()),
            float(z.max()),
            float(med),
            float(q3 - q1),
            slope,
            r2,
            mean_abs_diff,
            std_diff,
            ac[0],
            ac[1],
            ac[2],
            ac[3],
            top[0][0],
            top[0][1],
            top[1][0],
            top[1][1],
            top[2][0],
            top[2][1],
            entropy,
            zcr,
            skew,
            kurt,
        ],
        dtype=np.float64,
    )
    if features.shape != (FEATURE_DIM,) or not np.isfinite(features).all():
        raise AssertionError(f"encoder produced invalid features for {block.block_id!r}")
    return features


def encode_many(blocks) -> np.ndarray:
    """Stack feature vectors for a sequence of blocks, in input order."""
    return np.stack([encode(b) for b in blocks], axis=0)
