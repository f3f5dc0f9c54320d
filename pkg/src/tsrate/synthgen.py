"""Synthetic validation corpus: tagged high/low-quality blocks per criterion.

High-quality blocks are clean constructs (lines, sines, mixtures) with a
whisper of noise; low-quality blocks are fresh constructs from the same
family drowned in Gaussian noise scaled to the construct's own spread.
Every draw comes from a counter-based 64-bit stream (SplitMix64 feeding
Box-Muller), so the corpus is bit-reproducible across platforms and
per-pair substreams can be generated in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tsrate.core import Block, CriterionKind
from tsrate.judge import JudgeConfig, judge_pair

CORPUS_VERSION = "synth-v1"

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over uint64 values (vectorized)."""
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> np.uint64(30))) * _M1) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * _M2) & _MASK
    return z ^ (z >> np.uint64(31))


class CounterStream:
    """Deterministic random stream addressed by (seed, stream tag, counter)."""

    def __init__(self, seed: int, stream: int):
        base = np.atleast_1d(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        salt = (np.atleast_1d(np.uint64(stream)) * _GAMMA) & _MASK
        self._key = _splitmix64((base ^ salt) & _MASK)[0]
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        counters = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        return _splitmix64((counters * _M2 + self._key) & _MASK)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on (0, 1]."""
        bits = self._raw(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * (2.0**-53)

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller."""
        half = (n + 1) // 2
        u1 = self.uniforms(half)
        u2 = self.uniforms(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return out[:n]

    def uniform(self, lo: float, hi: float) -> float:
        return float(lo + (hi - lo) * self.uniforms(1)[0])

    def randint(self, n: int) -> int:
        """Integer uniform on [0, n)."""
        return int(self._raw(1)[0] % np.uint64(n))


@dataclass(frozen=True)
class SynthConfig:
    length: int = 128
    pairs_per_criterion: int = 200
    seed: int = 0
    high_noise_sigma: float = 0.05
    low_quality_noise_sigma: float = 1.5
    slope_range: tuple = (0.5, 2.0)
    freq_cycles: tuple = (2.0, 8.0)
    amplitude_range: tuple = (0.5, 3.0)

    def __post_init__(self):
        if self.pairs_per_criterion < 1:
            raise ValueError("pairs_per_criterion must be >= 1")
        if self.high_noise_sigma < 0 or self.low_quality_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.length < 8:
            raise ValueError("length must be >= 8")

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "pairs_per_criterion": self.pairs_per_criterion,
            "seed": self.seed,
            "high_noise_sigma": self.high_noise_sigma,
            "low_quality_noise_sigma": self.low_quality_noise_sigma,
            "slope_range": list(self.slope_range),
            "freq_cycles": list(self.freq_cycles),
            "amplitude_range": list(self.amplitude_range),
        }


@dataclass(frozen=True)
class TaggedBlock:
    """A corpus block plus its ground-truth tag and generator provenance."""

    block: Block
    quality_tag: str
    criterion: CriterionKind
    generator_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.quality_tag not in ("high", "low"):
            raise ValueError(f"quality_tag must be high/low, got {self.quality_tag!r}")

    def to_dict(self) -> dict:
        return {
            "block_id": self.block.block_id,
            "criterion": str(self.criterion),
            "quality_tag": self.quality_tag,
            "values": [float(v) for v in self.block.values],
            "generator_params": self.generator_params,
            "corpus_version": CORPUS_VERSION,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TaggedBlock":
        values = np.asarray(doc["values"], dtype=np.float64)
        block = Block(
            block_id=doc["block_id"],
            sample_id=doc["block_id"],
            channel=0,
            start=0,
            length=values.size,
            values=values,
        )
        return cls(
            block=block,
            quality_tag=doc["quality_tag"],
            criterion=CriterionKind(doc["criterion"]),
            generator_params=doc.get("generator_params", {}),
        )


_CRITERION_STREAM = {
    CriterionKind.TREND: 1,
    CriterionKind.FREQUENCY: 2,
    CriterionKind.AMPLITUDE: 3,
    CriterionKind.PATTERN: 4,
}


def _construct(criterion: CriterionKind, config: SynthConfig, stream: CounterStream):
    """Draw one clean construct (values, params) for the criterion family."""
    n = config.length
    t = np.arange(n, dtype=np.float64)
    if criterion is CriterionKind.TREND:
        sign = 1.0 if stream.uniforms(1)[0] < 0.5 else -1.0
        n_segments = 1 + stream.randint(3)  # 1..3 same-sign linear segments
        slopes = [
            sign * stream.uniform(*config.slope_range) / n for _ in range(n_segments)
        ]
        breaks = sorted(stream.randint(n - 2) + 1 for _ in range(n_segments - 1))
        values = np.zeros(n)
        level = stream.uniform(-1.0, 1.0)
        edges = [0, *breaks, n]
        for slope, lo, hi in zip(slopes, edges[:-1], edges[1:]):
            seg = level + slope * (t[lo:hi] - lo)
            values[lo:hi] = seg
            level = seg[-1] + slope if hi > lo else level
        params = {"family": "linear", "slopes": slopes, "breaks": breaks}
    elif criterion is CriterionKind.FREQUENCY:
        cycles = float(
            int(config.freq_cycles[0]) + stream.randint(
                int(config.freq_cycles[1]) - int(config.freq_cycles[0]) + 1
            )
        )  # integer cycle counts: fixed, leakage-free frequencies
        phase = stream.uniform(0.0, 2.0 * math.pi)
        values = np.sin(2.0 * math.pi * cycles * t / n + phase)
        params = {"family": "sine", "cycles": cycles, "phase": phase, "amplitude": 1.0}
    elif criterion is CriterionKind.AMPLITUDE:
        cycles = stream.uniform(*config.freq_cycles)
        phase = stream.uniform(0.0, 2.0 * math.pi)
        a0 = stream.uniform(*config.amplitude_range)
        a1 = stream.uniform(*config.amplitude_range)
        envelope = a0 + (a1 - a0) * t / (n - 1)
        values = envelope * np.sin(2.0 * math.pi * cycles * t / n + phase)
        params = {
            "family": "modulated-sine",
            "cycles": cycles,
            "phase": phase,
            "amplitude_start": a0,
            "amplitude_end": a1,
        }
    elif criterion is CriterionKind.PATTERN:
        n_components = 2 + stream.randint(2)  # 2..3 sines plus a line
        comps = []
        values = np.zeros(n)
        for _ in range(n_components):
            cycles = stream.uniform(*config.freq_cycles)
            phase = stream.uniform(0.0, 2.0 * math.pi)
            amp = stream.uniform(0.5, 1.5)
            values += amp * np.sin(2.0 * math.pi * cycles * t / n + phase)
            comps.append({"cycles": cycles, "phase": phase, "amplitude": amp})
        slope = stream.uniform(0.25, 1.0) / n * (1.0 if stream.uniforms(1)[0] < 0.5 else -1.0)
        values += slope * t
        params = {"family": "mixture", "components": comps, "slope": slope}
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    return values, params


def _make_tagged(
    criterion: CriterionKind,
    config: SynthConfig,
    pair_index: int,
    tag: str,
    stream: CounterStream,
) -> TaggedBlock:
    values, params = _construct(criterion, config, stream)
    if tag == "high":
        amp_scale = (values.max() - values.min()) / 2.0
        sigma = config.high_noise_sigma * (amp_scale if amp_scale > 0 else 1.0)
    else:
        spread = values.std()
        sigma = config.low_quality_noise_sigma * (spread if spread > 0 else 1.0)
    noisy = values + sigma * stream.normals(config.length)
    block_id = f"synth/{criterion}/{pair_index:04d}/{tag}"
    block = Block(
        block_id=block_id,
        sample_id=block_id,
        channel=0,
        start=0,
        length=config.length,
        values=noisy,
    )
    return TaggedBlock(
        block=block,
        quality_tag=tag,
        criterion=criterion,
        generator_params={**params, "noise_sigma": sigma, "pair_index": pair_index},
    )


def gen_criterion_pairs(
    criterion: CriterionKind, config: SynthConfig
) -> list[tuple[TaggedBlock, TaggedBlock]]:
    """Generate (high, low) tagged pairs for one criterion."""
    pairs = []
    base = _CRITERION_STREAM[criterion]
    for k in range(config.pairs_per_criterion):
        stream = CounterStream(config.seed, base * 1_000_003 + k)
        high = _make_tagged(criterion, config, k, "high", stream)
        low = _make_tagged(criterion, config, k, "low", stream)
        pairs.append((high, low))
    return pairs


def gen_corpus(config: SynthConfig) -> dict[CriterionKind, list[tuple[TaggedBlock, TaggedBlock]]]:
    """The full corpus: pairs_per_criterion (high, low) pairs per criterion."""
    return {criterion: gen_criterion_pairs(criterion, config) for criterion in CriterionKind}


def corpus_blocks(corpus) -> list[TaggedBlock]:
    """Flatten a corpus into its tagged blocks, highs before lows per pair."""
    out = []
    for criterion in CriterionKind:
        for high, low in corpus[criterion]:
            out.append(high)
            out.append(low)
    return out


def oracle_tags(tagged_blocks) -> dict[str, dict[CriterionKind, str]]:
    """Tag lookup for OracleJudge, keyed by block id then criterion."""
    tags: dict[str, dict[CriterionKind, str]] = {}
    for tb in tagged_blocks:
        tags.setdefault(tb.block.block_id, {})[tb.criterion] = tb.quality_tag
    return tags


def validate_judge(
    judge,
    pairs_by_criterion,
    config: JudgeConfig | None = None,
    cache=None,
) -> dict:
    """Score a judge against tagged pairs; returns per-criterion accuracy.

    A pair counts correct when the debiased confidence points at the
    high-tagged block; an exact 0.5 earns half credit.  Pair presentation
    order alternates so positional handling is exercised.
    """
    config = config or JudgeConfig()
    table = {}
    for criterion, pairs in pairs_by_criterion.items():
        if not pairs:
            continue
        credit = 0.0
        for k, (high, low) in enumerate(pairs):
            if high.quality_tag != "high" or low.quality_tag != "low":
                raise ValueError(f"pair {k} for {criterion} is not (high, low) tagged")
            if k % 2 == 0:
                record = judge_pair(judge, high.block, low.block, criterion, config, cache)
                p_high = record.confidence_p
            else:
                record = judge_pair(judge, low.block, high.block, criterion, config, cache)
                p_high = 1.0 - record.confidence_p
            if p_high > 0.5:
                credit += 1.0
            elif p_high == 0.5:
                credit += 0.5
        table[str(criterion)] = {"accuracy": credit / len(pairs), "pairs": len(pairs)}
    return table
