"""Pairwise comparison prompt templates, one per quality criterion.

The wording is part of the judge contract: cache keys include
TEMPLATE_VERSION, so any edit here must bump it.
"""

from __future__ import annotations

import numpy as np

from tsrate.core import CriterionKind

TEMPLATE_VERSION = "prompts-v1"

_COMMON_TAIL = """
Aspects that should NOT influence your judgement:
The source or origin of the time series data.
The length of the time series.
The order in which the time series are presented.

The time series may have similar characteristics, but you should still make a relative judgment and choose the label of the preferred time series.

[Option {label_a}]
{series_a}

[Option {label_b}]
{series_b}

Now you have to choose between either {label_a} or {label_b}. Respond only with a single word."""

_TREND_TEMPLATE = """Compare two time series and choose the one which exhibits a more significant and well-defined trend, e.g., a clear directional movement (upward or downward) over time that is sustained across the series, with minimal noise, anomalies, or random fluctuations.

For example:
A time series with a steady upward trend, such as [10, 15, 20, 25, 30], would be considered significant and well-defined.
Conversely, a time series with frequent random spikes or drops, such as [10, 50, 20, 5, 30], is less likely to exhibit a well-defined trend.
A flat time series with little to no change, such as [10, 10, 10, 10, 10], would generally be considered to lack a significant trend.
""" + _COMMON_TAIL

_FREQUENCY_TEMPLATE = """Compare two time series and choose the one which exhibits more significant and well-defined frequency or cyclical patterns, e.g., regular oscillations, periodic behavior, or repetitive cycles that are consistent across the series, with minimal noise or randomness.

For example:
A time series with a consistent cyclical pattern, such as [10, 20, 10, 20, 10, 20], would be considered significant and well-defined.
Conversely, a time series with irregular peaks or inconsistent cycles, such as [10, 50, 20, 5, 30], is less likely to exhibit a well-defined cyclical pattern.
A flat time series with little to no change, such as [10, 10, 10, 10, 10], would generally be considered to lack significant frequency or cyclical behavior.
""" + _COMMON_TAIL

_AMPLITUDE_TEMPLATE = """Compare two time series and choose the one which exhibits more significant and well-defined amplitude, e.g., consistent and large variations in the range of values across the series, reflecting strong oscillations or signal intensity with minimal noise or randomness.

For example:
A time series with a large and consistent amplitude, such as [0, 10, -10, 10, -10, 10], would be considered significant and well-defined.
Conversely, a time series with small or inconsistent amplitude, such as [1, 2, 1, 2, 3, 2], is less likely to exhibit well-defined amplitude behavior.
A flat time series with minimal changes, such as [5, 5, 5, 5, 5], would generally be considered to lack significant amplitude.
""" + _COMMON_TAIL

_PATTERN_TEMPLATE = """Compare two time series and choose the one that demonstrates a clearer and more consistent pattern, exhibiting regular fluctuations, trends, or cycles, while avoiding excessive noise, random fluctuations, or sudden irregularities. Look for data that reflects some form of underlying structure, such as trend, seasonality, or cyclical behavior.

For example:
Trend Pattern: A time series with a clear and steady upward or downward trend, such as [5, 8, 11, 14, 17] and [43, 36, 29, 22, 15, 8, 1], demonstrates a well-defined, consistent direction.
Cyclic Pattern: A time series showing periodic cycles, like [30, 25, 20, 25, 30, 35, 40, 35, 30] and [1, 3, 1, 3, 1], repeating every few steps, suggests cyclical behavior over time.
Stationary Pattern: A time series where the values fluctuate around a stable mean without a clear upward or downward trend, such as [10, 12, 11, 10, 13] and [10, 10, 10, 10, 10], shows consistent, predictable variation.
Mixed Pattern: A time series that combines trends with cyclical or seasonal behavior, such as [10, 15, 20, 25, 30, 28, 25, 23, 28, 33, 38, 43, 41, 38, 36], where both a rising trend and periodic fluctuations are visible, would indicate a complex but structured pattern.

On the other hand, avoid time series with the following characteristics:
Random or Irregular Fluctuations: A time series with large, unpredictable jumps, such as [10, 50, 20, 5, 80], is erratic and lacks consistent patterns.
Noise-Dominant Data: A time series filled with random noise or frequent outliers, like [20, 5, 15, 100, 3], introduces significant unpredictability that makes it hard to discern any underlying trend or pattern.
Missing or Incomplete Patterns: A time series with large gaps or inconsistent segments, such as [15, ?, ?, 30, 40], is incomplete and might mislead pattern identification.

Remember, focus on time series that show clear, repeatable patterns of behavior. Even if the series contains some minor fluctuations, the overall trend, cycle, or stationary nature should be identifiable.

Aspects that should NOT influence your judgment:
The source or origin of the time series data.
The length of the time series.
The order in which the time series are presented.

[Option {label_a}]
{series_a}

[Option {label_b}]
{series_b}

Now you have to choose between either {label_a} or {label_b}. Respond only with a single word."""

TEMPLATES = {
    CriterionKind.TREND: _TREND_TEMPLATE,
    CriterionKind.FREQUENCY: _FREQUENCY_TEMPLATE,
    CriterionKind.AMPLITUDE: _AMPLITUDE_TEMPLATE,
    CriterionKind.PATTERN: _PATTERN_TEMPLATE,
}


def format_series(values, max_points: int = 128) -> str:
    """Render values as a comma-separated list, 4 significant digits.

    Truncation keeps the first ``max_points`` values.
    """
    arr = np.asarray(values, dtype=np.float64)[:max_points]
    return ", ".join(f"{v:.4g}" for v in arr)


def render_prompt(
    criterion: CriterionKind,
    series_a,
    series_b,
    label_a: str = "A",
    label_b: str = "B",
    max_series_points: int = 128,
) -> str:
    """Fill the criterion template with two rendered series and their labels."""
    if criterion not in TEMPLATES:
        raise ValueError(f"unknown criterion: {criterion!r}")
    if label_a == label_b:
        raise ValueError("labels must be distinct")
    if len(series_a) < 2 or len(series_b) < 2:
        raise ValueError("series need at least 2 points")
    return TEMPLATES[criterion].format(
        label_a=label_a,
        label_b=label_b,
        series_a=format_series(series_a, max_series_points),
        series_b=format_series(series_b, max_series_points),
    )
