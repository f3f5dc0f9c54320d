import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrate.core import Block, CriterionKind
from tsrate.judge import (
    HeuristicJudge,
    JudgeConfig,
    JudgmentCache,
    JudgmentRecord,
    OracleJudge,
    UnparseableVerdict,
    content_hash,
    filter_judgments,
    judge_pair,
    parse_choice,
    sample_pairs,
)
from tsrate.prompts import format_series, render_prompt


def block_of(values, bid):
    arr = np.asarray(values, dtype=np.float64)
    return Block(bid, bid, 0, 0, arr.size, arr)


RNG = np.random.default_rng(99)
LINE = block_of(np.linspace(0.0, 2.0, 64), "line")
NOISE = block_of(RNG.normal(0, 1, 64), "noise")
SINE = block_of(np.sin(2 * np.pi * 5 * np.arange(64) / 64), "sine")


class TestPrompts:
    def test_trend_template_phrases(self):
        text = render_prompt(CriterionKind.TREND, [1.0, 2.0], [2.0, 1.0], "A", "B")
        assert "exhibits a more significant and well-defined trend" in text
        assert "[Option A]" in text and "[Option B]" in text
        assert text.rstrip().endswith("Respond only with a single word.")

    def test_pattern_template_phrase(self):
        text = render_prompt(CriterionKind.PATTERN, [1.0, 2.0], [2.0, 1.0], "A", "B")
        assert "clearer and more consistent pattern" in text

    def test_frequency_and_amplitude_phrases(self):
        assert "well-defined frequency or cyclical patterns" in render_prompt(
            CriterionKind.FREQUENCY, [1.0, 2.0], [2.0, 1.0], "A", "B"
        )
        assert "well-defined amplitude" in render_prompt(
            CriterionKind.AMPLITUDE, [1.0, 2.0], [2.0, 1.0], "A", "B"
        )

    def test_truncation_to_max_points(self):
        series = list(range(200))
        rendered = format_series(series, max_points=128)
        assert len(rendered.split(", ")) == 128

    def test_four_significant_digits(self):
        assert format_series([3.14159265, 1234567.0]) == "3.142, 1.235e+06"

    def test_identical_labels_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            render_prompt(CriterionKind.TREND, [1.0, 2.0], [2.0, 1.0], "A", "A")


class TestParseChoice:
    @pytest.mark.parametrize(
        "reply,expected",
        [
            ("A", "A"),
            (" b.\n", "B"),
            ("B!", "B"),
            ("The answer is A", "A"),
            ("option b", "B"),
        ],
    )
    def test_parses(self, reply, expected):
        assert parse_choice(reply, "A", "B") == expected

    @pytest.mark.parametrize("reply", ["both are similar", "", "A or B", "neither"])
    def test_unparseable(self, reply):
        with pytest.raises(UnparseableVerdict):
            parse_choice(reply, "A", "B")


class FixedVotesJudge:
    """Vote-level judge stub: deterministic per-ordering vote counts."""

    judge_id = "stub"

    def __init__(self, forward_votes, reverse_votes_for_first):
        self.by_first = {
            "i": forward_votes,
            "j": reverse_votes_for_first,
        }

    def preference(self, block_i, block_j, criterion):
        raise NotImplementedError


class TestJudgePair:
    def test_debias_arithmetic_from_votes(self):
        # forward 18/20 for i; swapped ordering 6/20 for j, i.e. 14/20 for i
        record = JudgmentRecord(
            block_i="i",
            block_j="j",
            criterion=CriterionKind.TREND,
            votes_forward=18,
            votes_reverse=14,
            repeats_per_order=20,
            confidence_p=(18 / 20 + 14 / 20) / 2,
            judge_id="stub",
        )
        assert record.confidence_p == pytest.approx(0.8)

    def test_oracle_high_vs_low_is_one(self):
        tags = {
            "line": {CriterionKind.TREND: "high"},
            "noise": {CriterionKind.TREND: "low"},
        }
        record = judge_pair(
            OracleJudge(tags), LINE, NOISE, CriterionKind.TREND, JudgeConfig()
        )
        assert record.confidence_p == 1.0
        assert record.votes_forward == 20
        assert record.votes_reverse == 20

    def test_heuristic_self_copy_is_half(self):
        twin = block_of(LINE.values.copy(), "line-copy")
        record = judge_pair(
            HeuristicJudge(), LINE, twin, CriterionKind.TREND, JudgeConfig()
        )
        assert record.confidence_p == 0.5

    def test_same_block_rejected(self):
        with pytest.raises(ValueError, match="itself"):
            judge_pair(HeuristicJudge(), LINE, LINE, CriterionKind.TREND, JudgeConfig())

    def test_swap_antisymmetry_exact(self):
        judge = HeuristicJudge()
        config = JudgeConfig()
        for criterion in CriterionKind:
            p_ij = judge_pair(judge, LINE, NOISE, criterion, config).confidence_p
            p_ji = judge_pair(judge, NOISE, LINE, criterion, config).confidence_p
            assert p_ij + p_ji == 1.0

    def test_oracle_transitive(self):
        tags = {
            "line": {CriterionKind.TREND: "high"},
            "noise": {CriterionKind.TREND: "low"},
            "sine": {CriterionKind.TREND: "low"},
        }
        judge = OracleJudge(tags)
        config = JudgeConfig()
        p_ln = judge_pair(judge, LINE, NOISE, CriterionKind.TREND, config).confidence_p
        p_ns = judge_pair(judge, NOISE, SINE, CriterionKind.TREND, config).confidence_p
        p_ls = judge_pair(judge, LINE, SINE, CriterionKind.TREND, config).confidence_p
        assert p_ln == 1.0 and p_ns == 0.5 and p_ls == 1.0


class TestHeuristicJudge:
    def test_trend_line_beats_noise(self):
        judge = HeuristicJudge()
        assert judge.preference(LINE, NOISE, CriterionKind.TREND) > 0.95

    def test_frequency_sine_beats_noise(self):
        judge = HeuristicJudge()
        assert judge.preference(SINE, NOISE, CriterionKind.FREQUENCY) > 0.95

    def test_identical_sequences_tie(self):
        judge = HeuristicJudge()
        twin = block_of(SINE.values.copy(), "sine2")
        for criterion in CriterionKind:
            assert judge.preference(SINE, twin, criterion) == 0.5

    def test_constant_block_stat_zero(self):
        judge = HeuristicJudge()
        flat = block_of(np.full(32, 2.0), "flat")
        for criterion in CriterionKind:
            assert judge.statistic(flat, criterion) == 0.0

    def test_deterministic_across_runs(self):
        j1, j2 = HeuristicJudge(), HeuristicJudge()
        for criterion in CriterionKind:
            assert j1.preference(LINE, SINE, criterion) == j2.preference(
                LINE, SINE, criterion
            )


class TestSamplePairs:
    def test_exhaustive_pool(self):
        blocks = [LINE, NOISE, SINE]
        pairs = sample_pairs(blocks, 3, seed=1)
        keys = {frozenset((a.block_id, b.block_id)) for a, b in pairs}
        assert len(keys) == 3

    def test_deterministic_under_seed(self):
        blocks = [LINE, NOISE, SINE]
        p1 = sample_pairs(blocks, 3, seed=42)
        p2 = sample_pairs(blocks, 3, seed=42)
        assert [(a.block_id, b.block_id) for a, b in p1] == [
            (a.block_id, b.block_id) for a, b in p2
        ]

    def test_overflow_reuses_pool(self):
        blocks = [LINE, NOISE, SINE]
        pairs = sample_pairs(blocks, 10, seed=0)
        assert len(pairs) == 10
        distinct = {frozenset((a.block_id, b.block_id)) for a, b in pairs}
        assert len(distinct) == 3

    def test_validation(self):
        with pytest.raises(ValueError):
            sample_pairs([LINE], 1, seed=0)
        with pytest.raises(ValueError):
            sample_pairs([LINE, NOISE], 0, seed=0)


class TestFilter:
    def make(self, p):
        return JudgmentRecord("a", "b", CriterionKind.TREND, 10, 10, 20, p, "t")

    def test_kept_and_dropped(self):
        kept = filter_judgments([self.make(0.8), self.make(0.6)], tau=0.5)
        assert [r.confidence_p for r in kept] == [0.8]

    def test_boundary_inclusive(self):
        assert len(filter_judgments([self.make(0.75)], tau=0.5)) == 1

    def test_zero_tau_identity(self):
        records = [self.make(0.5), self.make(0.9)]
        assert filter_judgments(records, tau=0.0) == records

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_filter_rule(self, p, tau):
        kept = filter_judgments([self.make(p)], tau)
        assert bool(kept) == (abs(2 * p - 1) >= tau)


class CountingJudge(HeuristicJudge):
    """Heuristic judge that counts preference evaluations."""

    def __init__(self):
        super().__init__()
        self.calls = 0

    def preference(self, block_i, block_j, criterion):
        self.calls += 1
        return super().preference(block_i, block_j, criterion)


class TestCache:
    def test_idempotent_warm_cache(self, tmp_path):
        cache_path = tmp_path / "cache.jsonl"
        judge = CountingJudge()
        config = JudgeConfig()
        cache = JudgmentCache(cache_path)
        first = judge_pair(judge, LINE, NOISE, CriterionKind.TREND, config, cache)
        calls_after_first = judge.calls
        assert calls_after_first > 0

        warm = JudgmentCache(cache_path)
        again = judge_pair(judge, LINE, NOISE, CriterionKind.TREND, config, warm)
        assert judge.calls == calls_after_first
        assert again == first

    def test_flipped_orientation_hits_cache(self, tmp_path):
        judge = CountingJudge()
        config = JudgeConfig()
        cache = JudgmentCache(tmp_path / "cache.jsonl")
        record = judge_pair(judge, LINE, NOISE, CriterionKind.TREND, config, cache)
        calls = judge.calls
        flipped = judge_pair(judge, NOISE, LINE, CriterionKind.TREND, config, cache)
        assert judge.calls == calls
        assert flipped.confidence_p == 1.0 - record.confidence_p
        assert flipped.block_i == "noise" and flipped.block_j == "line"

    def test_trailing_partial_line_tolerated(self, tmp_path):
        cache_path = tmp_path / "cache.jsonl"
        judge = HeuristicJudge()
        cache = JudgmentCache(cache_path)
        judge_pair(judge, LINE, NOISE, CriterionKind.TREND, JudgeConfig(), cache)
        with open(cache_path, "a", encoding="utf-8") as fh:
            fh.write('{"judge_id": "heuristic-k10-v1", "criterion": "tr')
        recovered = JudgmentCache(cache_path)
        assert len(recovered._entries) == 1

    def test_content_hash_id_independent(self):
        twin = block_of(LINE.values.copy(), "renamed")
        assert content_hash(LINE.values) == content_hash(twin.values)
        assert content_hash(LINE.values) != content_hash(NOISE.values)

    def test_cache_line_schema(self, tmp_path):
        cache_path = tmp_path / "cache.jsonl"
        judge_pair(
            HeuristicJudge(), LINE, NOISE, CriterionKind.TREND, JudgeConfig(),
            JudgmentCache(cache_path),
        )
        line = cache_path.read_text().strip().splitlines()[0]
        doc = json.loads(line)
        assert set(doc) == {
            "judge_id", "criterion", "hash_i", "hash_j", "votes_forward",
            "votes_reverse", "repeats_per_order", "confidence_p",
            "template_version", "timestamp",
        }


class TestRecordValidation:
    def test_votes_bounded(self):
        with pytest.raises(ValueError):
            JudgmentRecord("a", "b", CriterionKind.TREND, 25, 10, 20, 0.5, "t")

    def test_self_pair_rejected(self):
        with pytest.raises(ValueError):
            JudgmentRecord("a", "a", CriterionKind.TREND, 10, 10, 20, 0.5, "t")

    def test_round_trip(self):
        record = JudgmentRecord("a", "b", CriterionKind.PATTERN, 12, None, 20, 0.6, "t")
        assert JudgmentRecord.from_dict(record.to_dict()) == record
