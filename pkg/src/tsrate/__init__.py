"""tsrate: quality rating for time series data.

Converts pairwise quality judgments (LLM, oracle, or statistical heuristic)
into scalar block/point/sample scores via Bradley-Terry fitting, and trains
a meta-learned neural rater for cheap scoring of unseen data.
"""

__version__ = "0.1.0"

from tsrate.core import (
    Block,
    CriterionKind,
    ScoreTable,
    SegmentationConfig,
    TimeSeriesSample,
    aggregate_channels,
    aggregate_sample_score,
    distribute_point_scores,
    fuse_criteria,
    segment,
)

__all__ = [
    "Block",
    "CriterionKind",
    "ScoreTable",
    "SegmentationConfig",
    "TimeSeriesSample",
    "aggregate_channels",
    "aggregate_sample_score",
    "distribute_point_scores",
    "fuse_criteria",
    "segment",
    "__version__",
]
