"""Domain types, block segmentation, score distribution, and criteria fusion.

All operations here are pure functions of their inputs and safe to call
concurrently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimeSeriesSample",
    "Block",
    "SegmentationConfig",
    "CriterionKind",
    "ScoreTable",
    "segment",
    "distribute_point_scores",
    "aggregate_sample_score",
    "aggregate_channels",
    "fuse_criteria",
]


class CriterionKind(enum.Enum):
    """The four axes along which block quality is compared."""

    TREND = "trend"
    FREQUENCY = "frequency"
    AMPLITUDE = "amplitude"
    PATTERN = "pattern"

    def __str__(self) -> str:
        return self.value


ALL_CRITERIA = tuple(CriterionKind)


def make_block_id(sample_id: str, channel: int, start: int, length: int) -> str:
    """Deterministic block identifier."""
    return f"{sample_id}/c{channel}/s{start}/l{length}"


@dataclass(frozen=True, eq=False)
class TimeSeriesSample:
    """A multichannel series with an optional label; the unit of selection.

    ``channels`` is a list of D equal-length float sequences.  Values must be
    finite; the label is opaque to the rating pipeline.
    """

    id: str
    channels: list
    label: object = None
    domain_tag: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("sample id must be non-empty")
        if len(self.channels) < 1:
            raise ValueError(f"sample {self.id!r}: needs at least one channel")
        arrays = []
        length = None
        for d, ch in enumerate(self.channels):
            arr = np.asarray(ch, dtype=np.float64)
            if arr.ndim != 1 or arr.size < 1:
                raise ValueError(
                    f"sample {self.id!r}: channel {d} must be a non-empty 1-d sequence"
                )
            if length is None:
                length = arr.size
            elif arr.size != length:
                raise ValueError(
                    f"sample {self.id!r}: channel {d} has length {arr.size}, expected {length}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"sample {self.id!r}: channel {d} contains non-finite values")
            arr.flags.writeable = False
            arrays.append(arr)
        object.__setattr__(self, "channels", arrays)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def length(self) -> int:
        return int(self.channels[0].size)


@dataclass(frozen=True, eq=False)
class Block:
    """A fixed-length contiguous slice of one channel; the unit of judging."""

    block_id: str
    sample_id: str
    channel: int
    start: int
    length: int
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size != self.length:
            raise ValueError(
                f"block {self.block_id!r}: values length {arr.size} != declared {self.length}"
            )
        if self.start < 0:
            raise ValueError(f"block {self.block_id!r}: negative start")
        if not np.isfinite(arr).all():
            raise ValueError(f"block {self.block_id!r}: non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def end(self) -> int:
        """One past the last covered time index."""
        return self.start + self.length


@dataclass(frozen=True)
class SegmentationConfig:
    """Sliding-window parameters: block length L and stride S (S <= L)."""

    block_length: int
    stride: int | None = None

    def __post_init__(self):
        if self.block_length < 2:
            raise ValueError(f"block_length must be >= 2, got {self.block_length}")
        stride = self.stride
        if stride is None:
            # Default half-overlap keeps point-level averaging nontrivial.
            stride = max(1, self.block_length // 2)
            object.__setattr__(self, "stride", stride)
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if stride > self.block_length:
            raise ValueError(
                f"stride {stride} > block_length {self.block_length} would leave gaps"
            )


def segment(sample: TimeSeriesSample, config: SegmentationConfig) -> list[Block]:
    """Cut every channel of ``sample`` into overlapping fixed-length blocks.

    Starts run 0, S, 2S, ... while start + L <= T; if the last regular block
    does not end at T, one tail block at start T - L is appended so every
    time index is covered.  Blocks are ordered by (channel, start).
    """
    L = config.block_length
    S = config.stride
    T = sample.length
    if T < L:
        raise ValueError(
            f"sample {sample.id!r} shorter than block length ({T} < {L}); no padding is applied"
        )
    starts = list(range(0, T - L + 1, S))
    if starts[-1] + L < T:
        starts.append(T - L)
    blocks = []
    for d, channel_values in enumerate(sample.channels):
        for start in starts:
            blocks.append(
                Block(
                    block_id=make_block_id(sample.id, d, start, L),
                    sample_id=sample.id,
                    channel=d,
                    start=start,
                    length=L,
                    values=channel_values[start : start + L],
                )
            )
    return blocks


def distribute_point_scores(
    block_scores: dict[str, float],
    sample: TimeSeriesSample,
    blocks: list[Block],
) -> list[np.ndarray]:
    """Spread block scores back onto time points.

    Each point's score is the arithmetic mean over all scored blocks that
    contain it on that channel.  Returns one length-T array per channel.
    Raises if any point of the sample is covered by no scored block.
    """
    T = sample.length
    totals = np.zeros((sample.n_channels, T))
    counts = np.zeros((sample.n_channels, T), dtype=np.int64)
    for block in blocks:
        if block.sample_id != sample.id:
            raise ValueError(
                f"block {block.block_id!r} belongs to sample {block.sample_id!r}, "
                f"not {sample.id!r}"
            )
        score = block_scores.get(block.block_id)
        if score is None:
            continue
        totals[block.channel, block.start : block.end] += score
        counts[block.channel, block.start : block.end] += 1
    if (counts == 0).any():
        ch, idx = np.argwhere(counts == 0)[0]
        raise ValueError(
            f"coverage violated: sample {sample.id!r} channel {ch} index {idx} "
            "is covered by no scored block"
        )
    per_point = totals / counts
    return [per_point[d] for d in range(sample.n_channels)]


def aggregate_sample_score(point_scores) -> float:
    """Mean of per-point scores (one channel's worth, or any flat sequence)."""
    arr = np.asarray(point_scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty score sequence")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite point scores")
    return float(arr.mean())


def aggregate_channels(channel_scores) -> float:
    """Mean across the D per-channel scores."""
    arr = np.asarray(channel_scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate zero channels")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite channel scores")
    return float(arr.mean())


@dataclass
class ScoreTable:
    """Per-criterion block scores with an optional fused column.

    ``per_criterion`` maps each criterion to {block_id: score}; ``fused`` is
    populated by :func:`fuse_criteria`.  ``provenance`` names the producer
    (e.g. "bt" or "rater").
    """

    per_criterion: dict[CriterionKind, dict[str, float]]
    fused: dict[str, float] | None = None
    provenance: str = ""

    def __post_init__(self):
        for criterion, scores in self.per_criterion.items():
            for block_id, value in scores.items():
                if not math.isfinite(value):
                    raise ValueError(
                        f"non-finite score for block {block_id!r} under {criterion}"
                    )
        if self.fused is not None:
            expected = None
            for scores in self.per_criterion.values():
                keys = set(scores)
                expected = keys if expected is None else expected & keys
            if expected is not None and set(self.fused) != expected:
                raise ValueError("fused key set must equal the per-criterion intersection")

    def to_dict(self) -> dict:
        doc = {
            "provenance": self.provenance,
            "per_criterion": {
                str(c): {k: float(v) for k, v in sorted(scores.items())}
                for c, scores in sorted(self.per_criterion.items(), key=lambda kv: str(kv[0]))
            },
        }
        if self.fused is not None:
            doc["fused"] = {k: float(v) for k, v in sorted(self.fused.items())}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreTable":
        per_criterion = {
            CriterionKind(name): dict(scores)
            for name, scores in doc["per_criterion"].items()
        }
        return cls(
            per_criterion=per_criterion,
            fused=dict(doc["fused"]) if "fused" in doc else None,
            provenance=doc.get("provenance", ""),
        )


def _zscores(values: np.ndarray) -> np.ndarray:
    """Population z-scores; an all-equal input maps to all zeros."""
    mean = values.mean()
    std = values.std()
    if std == 0.0:
        return np.zeros_like(values)
    return (values - mean) / std


def fuse_criteria(table: ScoreTable) -> ScoreTable:
    """Z-normalize each criterion over the block set and average them.

    Every criterion map must cover the same blocks.  A constant criterion
    contributes zeros rather than erroring, so degenerate fits stay usable.
    """
    if not table.per_criterion:
        raise ValueError("score table has no criteria to fuse")
    key_sets = {c: set(scores) for c, scores in table.per_criterion.items()}
    universe = set.union(*key_sets.values())
    problems = []
    for criterion, keys in key_sets.items():
        missing = universe - keys
        if missing:
            shown = ", ".join(sorted(missing)[:5])
            problems.append(f"{criterion}: missing {len(missing)} blocks ({shown}...)")
    if problems:
        raise ValueError("criterion maps cover different blocks: " + "; ".join(problems))

    block_ids = sorted(universe)
    fused = np.zeros(len(block_ids))
    for scores in table.per_criterion.values():
        raw = np.array([scores[b] for b in block_ids], dtype=np.float64)
        fused += _zscores(raw)
    fused /= len(table.per_criterion)
    return ScoreTable(
        per_criterion=table.per_criterion,
        fused={b: float(v) for b, v in zip(block_ids, fused)},
        provenance=table.provenance,
    )
