"""Pairwise preference elicitation: judges, debiasing, filtering, and cache.

Three judge flavors share one record format:

* ``LLMJudge``      — votes collected from a chat-completions endpoint.
* ``OracleJudge``   — ground-truth tags from the synthetic corpus.
* ``HeuristicJudge``— offline per-criterion statistics, no network needed.

Deterministic judges return graded preferences and are evaluated once per
ordering; the LLM judge is queried ``repeats_m`` times per ordering and the
vote shares estimate the preference.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from tsrate.core import Block, CriterionKind
from tsrate.numutil import oriented_sigmoid
from tsrate.prompts import TEMPLATE_VERSION, render_prompt

logger = logging.getLogger(__name__)

API_KEY_ENV = "TSRATE_API_KEY"


class JudgeError(RuntimeError):
    """Raised when a judgment cannot be produced; carries partial counts."""

    def __init__(self, message: str, partial: dict | None = None):
        super().__init__(message)
        self.partial = partial or {}


class UnparseableVerdict(ValueError):
    """The judge's reply matched neither label (or matched both)."""


@dataclass(frozen=True)
class JudgeConfig:
    """Knobs for vote collection and confidence filtering."""

    repeats_m: int = 20
    swap_debias: bool = True
    confidence_threshold_tau: float = 0.5
    max_series_points: int = 128
    request_concurrency: int = 4
    judge_kind: str = "heuristic"

    def __post_init__(self):
        if self.repeats_m < 1:
            raise ValueError("repeats_m must be >= 1")
        if not 0.0 <= self.confidence_threshold_tau <= 1.0:
            raise ValueError("confidence threshold must lie in [0, 1]")
        if self.max_series_points < 2:
            raise ValueError("max_series_points must be >= 2")
        if self.request_concurrency < 1:
            raise ValueError("request_concurrency must be >= 1")
        if self.judge_kind not in ("llm", "oracle", "heuristic"):
            raise ValueError(f"unknown judge_kind {self.judge_kind!r}")


@dataclass(frozen=True)
class JudgmentRecord:
    """One debiased pairwise judgment.

    ``votes_forward`` counts preferences for block_i with block_i listed
    first; ``votes_reverse`` counts preferences for block_i with block_j
    listed first (None when order-swap debiasing was off).
    """

    block_i: str
    block_j: str
    criterion: CriterionKind
    votes_forward: int
    votes_reverse: int | None
    repeats_per_order: int
    confidence_p: float
    judge_id: str

    def __post_init__(self):
        if self.block_i == self.block_j:
            raise ValueError("cannot judge a block against itself")
        if not 0 <= self.votes_forward <= self.repeats_per_order:
            raise ValueError("votes_forward out of range")
        if self.votes_reverse is not None and not (
            0 <= self.votes_reverse <= self.repeats_per_order
        ):
            raise ValueError("votes_reverse out of range")
        if not 0.0 <= self.confidence_p <= 1.0:
            raise ValueError("confidence_p must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "block_i": self.block_i,
            "block_j": self.block_j,
            "criterion": str(self.criterion),
            "votes_forward": self.votes_forward,
            "votes_reverse": self.votes_reverse,
            "repeats_per_order": self.repeats_per_order,
            "confidence_p": self.confidence_p,
            "judge_id": self.judge_id,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "JudgmentRecord":
        return cls(
            block_i=doc["block_i"],
            block_j=doc["block_j"],
            criterion=CriterionKind(doc["criterion"]),
            votes_forward=int(doc["votes_forward"]),
            votes_reverse=None if doc["votes_reverse"] is None else int(doc["votes_reverse"]),
            repeats_per_order=int(doc["repeats_per_order"]),
            confidence_p=float(doc["confidence_p"]),
            judge_id=doc["judge_id"],
        )


def content_hash(values) -> str:
    """Content hash of a block's values; independent of ids."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    h = hashlib.sha256()
    h.update(str(arr.size).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def parse_choice(response: str, label_a: str, label_b: str) -> str:
    """Map a free-form reply onto one of the two labels.

    Exact match after trimming whitespace/punctuation wins; otherwise a
    whole-word scan must find exactly one label.
    """
    if label_a == label_b:
        raise ValueError("labels must be distinct")
    trimmed = response.strip(string.whitespace + string.punctuation)
    for label in (label_a, label_b):
        if trimmed.casefold() == label.casefold():
            return label
    words = set(re.findall(r"\w+", response.casefold()))
    hits = [label for label in (label_a, label_b) if label.casefold() in words]
    if len(hits) == 1:
        return hits[0]
    raise UnparseableVerdict(f"unparseable verdict: {response!r}")


class DeterministicJudge(ABC):
    """A judge whose graded preference is a pure function of the blocks."""

    judge_id: str = "deterministic"

    @abstractmethod
    def preference(self, block_i: Block, block_j: Block, criterion: CriterionKind) -> float:
        """P(block_i preferred over block_j) with block_i listed first."""


class OracleJudge(DeterministicJudge):
    """Ground-truth judge backed by per-criterion quality tags."""

    judge_id = "oracle"

    def __init__(self, tags: dict[str, dict[CriterionKind, str]]):
        self._tags = tags

    def _tag(self, block: Block, criterion: CriterionKind) -> str:
        by_criterion = self._tags.get(block.block_id)
        if by_criterion is None or criterion not in by_criterion:
            raise JudgeError(
                f"block {block.block_id!r} carries no quality tag for {criterion}"
            )
        return by_criterion[criterion]

    def preference(self, block_i, block_j, criterion):
        tag_i = self._tag(block_i, criterion)
        tag_j = self._tag(block_j, criterion)
        if tag_i == tag_j:
            return 0.5
        return 1.0 if tag_i == "high" else 0.0


class HeuristicJudge(DeterministicJudge):
    """Statistical stand-in for the LLM so pipelines run with no API key.

    Per criterion it computes a scalar structure statistic on each block and
    squashes the difference through a sigmoid of fixed sharpness.  The
    statistics are original to this package and documented inline.
    """

    def __init__(self, sharpness: float = 10.0):
        self.sharpness = float(sharpness)
        self.judge_id = f"heuristic-k{self.sharpness:g}-v1"

    # -- statistics ------------------------------------------------------

    @staticmethod
    def _trend_stat(x: np.ndarray) -> float:
        """Total fitted rise over residual spread."""
        n = x.size
        if x.std() == 0.0:
            return 0.0
        t = np.arange(n, dtype=np.float64)
        tc = t - t.mean()
        slope = float(np.dot(tc, x) / np.dot(tc, tc))
        resid = x - x.mean() - slope * tc
        resid_std = float(resid.std())
        return abs(slope) * n / max(resid_std, 1e-12)

    @staticmethod
    def _spectral_power(x: np.ndarray) -> np.ndarray:
        """Per-bin power in variance units, DC excluded."""
        n = x.size
        spec = np.abs(np.fft.rfft(x - x.mean())) ** 2 * 2.0 / (n * n)
        if n % 2 == 0:
            spec[-1] *= 0.5
        return spec[1:]

    @classmethod
    def _frequency_stat(cls, x: np.ndarray) -> float:
        """Share of variance held by the single dominant frequency bin."""
        power = cls._spectral_power(x)
        total = float(power.sum())
        if total == 0.0:
            return 0.0
        return float(power.max() / total)

    @classmethod
    def _amplitude_stat(cls, x: np.ndarray) -> float:
        """Low-band signal amplitude discounted by high-band roughness.

        Structured oscillations of the corpus live well below a quarter of
        the sampling rate, while broadband noise spreads half its power
        above it, so the ratio rewards strong clean oscillation.
        """
        power = cls._spectral_power(x)
        n_bins = power.size
        if n_bins == 0:
            return 0.0
        low = float(power[: max(1, n_bins // 4)].sum())
        high = float(power[n_bins // 2 :].sum())
        return float(np.sqrt(low) / (1.0 + 6.0 * np.sqrt(high)))

    @staticmethod
    def _pattern_stat(x: np.ndarray) -> float:
        """Max |autocorrelation| of the detrended series over short lags."""
        n = x.size
        t = np.arange(n, dtype=np.float64)
        tc = t - t.mean()
        slope = float(np.dot(tc, x) / np.dot(tc, tc))
        resid = x - x.mean() - slope * tc
        denom = float(np.dot(resid, resid))
        if denom == 0.0:
            return 0.0
        best = 0.0
        for lag in range(1, max(1, n // 4) + 1):
            if lag >= n:
                break
            r = abs(float(np.dot(resid[:-lag], resid[lag:]) / denom))
            best = max(best, r)
        return best

    def statistic(self, block: Block, criterion: CriterionKind) -> float:
        x = np.asarray(block.values, dtype=np.float64)
        if x.size < 4:
            raise ValueError(f"heuristic judge needs >= 4 points, got {x.size}")
        if criterion is CriterionKind.TREND:
            return self._trend_stat(x)
        if criterion is CriterionKind.FREQUENCY:
            return self._frequency_stat(x)
        if criterion is CriterionKind.AMPLITUDE:
            return self._amplitude_stat(x)
        if criterion is CriterionKind.PATTERN:
            return self._pattern_stat(x)
        raise ValueError(f"unknown criterion {criterion!r}")

    def preference(self, block_i, block_j, criterion):
        stat_i = self.statistic(block_i, criterion)
        stat_j = self.statistic(block_j, criterion)
        return oriented_sigmoid(stat_i - stat_j, self.sharpness)


class LLMJudge:
    """Vote-collecting judge over an OpenAI-compatible chat endpoint."""

    def __init__(self, client, parse_retries: int = 2):
        self.client = client
        self.parse_retries = parse_retries
        self.judge_id = f"llm:{client.model}"

    def collect_votes(
        self,
        series_first,
        series_second,
        criterion: CriterionKind,
        config: JudgeConfig,
    ) -> tuple[int, int]:
        """Issue ``repeats_m`` queries; return (votes_for_first, valid_count).

        Replies that stay unparseable after the retry budget are abstentions
        and drop out of the denominator.
        """
        prompt = render_prompt(
            criterion,
            series_first,
            series_second,
            label_a="A",
            label_b="B",
            max_series_points=config.max_series_points,
        )

        def one_vote(_: int) -> str | None:
            for _attempt in range(self.parse_retries + 1):
                reply = self.client.complete(prompt)
                try:
                    return parse_choice(reply, "A", "B")
                except UnparseableVerdict:
                    continue
            return None

        if config.request_concurrency > 1:
            with ThreadPoolExecutor(max_workers=config.request_concurrency) as pool:
                outcomes = list(pool.map(one_vote, range(config.repeats_m)))
        else:
            outcomes = [one_vote(k) for k in range(config.repeats_m)]
        valid = [v for v in outcomes if v is not None]
        votes_first = sum(1 for v in valid if v == "A")
        return votes_first, len(valid)


def _round_half_even(x: float) -> int:
    return int(round(x))


def _deterministic_record(
    judge: DeterministicJudge,
    block_i: Block,
    block_j: Block,
    criterion: CriterionKind,
    config: JudgeConfig,
) -> JudgmentRecord:
    m = config.repeats_m
    q_fwd = judge.preference(block_i, block_j, criterion)
    if config.swap_debias:
        q_rev_for_j = judge.preference(block_j, block_i, criterion)
        share_i_reverse = 1.0 - q_rev_for_j
        confidence = (q_fwd + share_i_reverse) / 2.0
        votes_reverse = _round_half_even(share_i_reverse * m)
    else:
        confidence = q_fwd
        votes_reverse = None
    return JudgmentRecord(
        block_i=block_i.block_id,
        block_j=block_j.block_id,
        criterion=criterion,
        votes_forward=_round_half_even(q_fwd * m),
        votes_reverse=votes_reverse,
        repeats_per_order=m,
        confidence_p=confidence,
        judge_id=judge.judge_id,
    )


def _llm_record(
    judge: LLMJudge,
    block_i: Block,
    block_j: Block,
    criterion: CriterionKind,
    config: JudgeConfig,
) -> JudgmentRecord:
    votes_fwd, valid_fwd = judge.collect_votes(
        block_i.values, block_j.values, criterion, config
    )
    if valid_fwd == 0:
        raise JudgeError(
            "all forward-ordering queries failed to parse",
            partial={"votes_forward": votes_fwd, "valid_forward": 0},
        )
    p_fwd = votes_fwd / valid_fwd
    if not config.swap_debias:
        return JudgmentRecord(
            block_i=block_i.block_id,
            block_j=block_j.block_id,
            criterion=criterion,
            votes_forward=votes_fwd,
            votes_reverse=None,
            repeats_per_order=config.repeats_m,
            confidence_p=p_fwd,
            judge_id=judge.judge_id,
        )
    votes_j_rev, valid_rev = judge.collect_votes(
        block_j.values, block_i.values, criterion, config
    )
    if valid_rev == 0:
        raise JudgeError(
            "all swapped-ordering queries failed to parse",
            partial={"votes_forward": votes_fwd, "valid_forward": valid_fwd},
        )
    share_i_reverse = (valid_rev - votes_j_rev) / valid_rev
    return JudgmentRecord(
        block_i=block_i.block_id,
        block_j=block_j.block_id,
        criterion=criterion,
        votes_forward=votes_fwd,
        votes_reverse=valid_rev - votes_j_rev,
        repeats_per_order=config.repeats_m,
        confidence_p=(p_fwd + share_i_reverse) / 2.0,
        judge_id=judge.judge_id,
    )


def flip_record(record: JudgmentRecord, block_i: str, block_j: str) -> JudgmentRecord:
    """The same judgment seen from the opposite orientation."""
    if record.votes_reverse is None:
        raise ValueError("cannot flip a record judged without order-swap debiasing")
    return JudgmentRecord(
        block_i=block_i,
        block_j=block_j,
        criterion=record.criterion,
        votes_forward=record.repeats_per_order - record.votes_reverse,
        votes_reverse=record.repeats_per_order - record.votes_forward,
        repeats_per_order=record.repeats_per_order,
        confidence_p=1.0 - record.confidence_p,
        judge_id=record.judge_id,
    )


def judge_pair(
    judge,
    block_i: Block,
    block_j: Block,
    criterion: CriterionKind,
    config: JudgeConfig,
    cache: "JudgmentCache | None" = None,
) -> JudgmentRecord:
    """Judge one unordered pair, order-swapped and cached.

    With debiasing on, the pair is evaluated in a canonical content-hash
    orientation and flipped on return if needed, which makes the cache hit
    either presentation order and keeps confidence antisymmetry exact.
    """
    if block_i.length < 2 or block_j.length < 2:
        raise ValueError("blocks must have at least 2 points to be judged")
    if block_i.block_id == block_j.block_id:
        raise ValueError("cannot judge a block against itself")

    judge_id = judge.judge_id
    hash_i = content_hash(block_i.values)
    hash_j = content_hash(block_j.values)
    flipped = config.swap_debias and hash_j < hash_i
    first, second = (block_j, block_i) if flipped else (block_i, block_j)
    key_hashes = (hash_j, hash_i) if flipped else (hash_i, hash_j)

    cached = None
    if cache is not None:
        cached = cache.lookup(judge_id, criterion, key_hashes[0], key_hashes[1])
    if cached is not None:
        record = replace(cached, block_i=first.block_id, block_j=second.block_id)
    else:
        if isinstance(judge, DeterministicJudge):
            record = _deterministic_record(judge, first, second, criterion, config)
        elif isinstance(judge, LLMJudge):
            record = _llm_record(judge, first, second, criterion, config)
        else:
            raise TypeError(f"unsupported judge type: {type(judge).__name__}")
        if cache is not None:
            cache.store(record, key_hashes[0], key_hashes[1])

    if flipped:
        record = flip_record(record, block_i.block_id, block_j.block_id)
    return record


def sample_pairs(blocks: list[Block], n_pairs: int, seed: int) -> list[tuple[Block, Block]]:
    """Draw unordered pairs uniformly, distinct until the pool runs out."""
    if len(blocks) < 2:
        raise ValueError("need at least 2 blocks to form pairs")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    n = len(blocks)
    rows, cols = np.triu_indices(n, k=1)
    pool = rows.size
    rng = np.random.default_rng(seed)
    if n_pairs <= pool:
        chosen = rng.choice(pool, size=n_pairs, replace=False)
    else:
        extra = rng.choice(pool, size=n_pairs - pool, replace=True)
        chosen = np.concatenate([rng.permutation(pool), extra])
    return [(blocks[rows[k]], blocks[cols[k]]) for k in chosen]


def filter_judgments(records, tau: float) -> list[JudgmentRecord]:
    """Keep judgments with |2p - 1| >= tau, preserving order."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return [r for r in records if abs(2.0 * r.confidence_p - 1.0) >= tau]


class JudgmentCache:
    """Append-only JSON-lines judgment cache keyed by content hashes.

    One line per stored judgment; a trailing partial line (crash during a
    write) is ignored on load.  Writes are serialized through a lock.
    """

    def __init__(self, path):
        self.path = str(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple, JudgmentRecord] = {}
        self._load()

    @staticmethod
    def _key(judge_id: str, criterion: CriterionKind, hash_i: str, hash_j: str) -> tuple:
        return (judge_id, str(criterion), hash_i, hash_j, TEMPLATE_VERSION)

    def _load(self):
        if not os.path.exists(self.path):
            return
        with open(self.path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        for lineno, line in enumerate(lines):
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError:
                if lineno == len(lines) - 1 or not any(lines[lineno + 1 :]):
                    logger.warning("ignoring truncated trailing cache line in %s", self.path)
                    break
                raise
            if doc.get("template_version") != TEMPLATE_VERSION:
                continue
            record = JudgmentRecord(
                block_i=f"cache:{doc['hash_i'][:12]}",
                block_j=f"cache:{doc['hash_j'][:12]}",
                criterion=CriterionKind(doc["criterion"]),
                votes_forward=int(doc["votes_forward"]),
                votes_reverse=None
                if doc["votes_reverse"] is None
                else int(doc["votes_reverse"]),
                repeats_per_order=int(doc["repeats_per_order"]),
                confidence_p=float(doc["confidence_p"]),
                judge_id=doc["judge_id"],
            )
            key = self._key(doc["judge_id"], record.criterion, doc["hash_i"], doc["hash_j"])
            self._entries[key] = record

    def lookup(self, judge_id, criterion, hash_i, hash_j) -> JudgmentRecord | None:
        return self._entries.get(self._key(judge_id, criterion, hash_i, hash_j))

    def store(self, record: JudgmentRecord, hash_i: str, hash_j: str):
        key = self._key(record.judge_id, record.criterion, hash_i, hash_j)
        line = json.dumps(
            {
                "judge_id": record.judge_id,
                "criterion": str(record.criterion),
                "hash_i": hash_i,
                "hash_j": hash_j,
                "votes_forward": record.votes_forward,
                "votes_reverse": record.votes_reverse,
                "repeats_per_order": record.repeats_per_order,
                "confidence_p": record.confidence_p,
                "template_version": TEMPLATE_VERSION,
                "timestamp": time.time(),
            },
            sort_keys=True,
        )
        with self._lock:
            self._entries[key] = record
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
