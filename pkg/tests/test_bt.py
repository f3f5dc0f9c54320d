import numpy as np
import pytest

from tsrate.bt import BTOptions, fit_bt
from tsrate.core import CriterionKind
from tsrate.judge import JudgmentRecord
from tsrate.numutil import log_sigmoid, logit, sigmoid


def rec(i, j, p):
    return JudgmentRecord(i, j, CriterionKind.TREND, 10, 10, 20, p, "t")


class TestClosedForm:
    def test_single_pair_matches_logit(self):
        fit = fit_bt([rec("i", "j", 0.731)])
        delta = fit.scores["i"] - fit.scores["j"]
        assert delta == pytest.approx(logit(0.731), abs=1e-6)
        assert fit.converged

    def test_tie_gives_zeros(self):
        fit = fit_bt([rec("i", "j", 0.5)])
        assert fit.scores == {"i": 0.0, "j": 0.0}

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="zero judgments"):
            fit_bt([])


class TestChainVsGridSearch:
    def test_three_block_chain(self):
        judgments = [rec("b1", "b2", 0.8), rec("b2", "b3", 0.8), rec("b1", "b3", 0.9)]
        fit = fit_bt(judgments)
        d12 = fit.scores["b1"] - fit.scores["b2"]
        d23 = fit.scores["b2"] - fit.scores["b3"]

        # independent oracle: dense grid over the two score differences
        grid = np.arange(-2.0, 2.0 + 1e-12, 1e-3)
        best_value, best_a, best_b = -np.inf, None, None
        for a in grid:
            values = (
                0.8 * log_sigmoid(a)
                + 0.2 * log_sigmoid(-a)
                + 0.8 * log_sigmoid(grid)
                + 0.2 * log_sigmoid(-grid)
                + 0.9 * log_sigmoid(a + grid)
                + 0.1 * log_sigmoid(-a - grid)
            )
            k = int(np.argmax(values))
            if values[k] > best_value:
                best_value, best_a, best_b = float(values[k]), float(a), float(grid[k])
        assert d12 == pytest.approx(best_a, abs=1e-3)
        assert d23 == pytest.approx(best_b, abs=1e-3)


class TestRecovery:
    def test_complete_graph_recovers_ground_truth(self):
        rng = np.random.default_rng(11)
        truth = rng.normal(0, 1, 8)
        truth -= truth.mean()
        judgments = [
            rec(f"x{i}", f"x{j}", float(sigmoid(truth[i] - truth[j])))
            for i in range(8)
            for j in range(i + 1, 8)
        ]
        fit = fit_bt(judgments)
        fitted = np.array([fit.scores[f"x{k}"] for k in range(8)])
        np.testing.assert_allclose(fitted, truth, atol=1e-3)


class TestInvariants:
    def test_monotone_ascent_trace(self):
        judgments = [rec("a", "b", 0.9), rec("b", "c", 0.7), rec("a", "c", 0.6)]
        fit = fit_bt(judgments)
        diffs = np.diff(fit.trace)
        assert (diffs >= 0).all()

    def test_anchoring_mean_zero(self):
        judgments = [rec("a", "b", 0.9), rec("b", "c", 0.7)]
        fit = fit_bt(judgments)
        assert sum(fit.scores.values()) == pytest.approx(0.0, abs=1e-12)

    def test_shifted_initialization_same_anchored_scores(self):
        judgments = [rec("a", "b", 0.8), rec("b", "c", 0.65), rec("a", "c", 0.7)]
        fit0 = fit_bt(judgments)
        for shift in (5.0, -3.0, 100.0):
            shifted = fit_bt(
                judgments, init_scores={k: shift for k in ("a", "b", "c")}
            )
            for key in fit0.scores:
                assert shifted.scores[key] == pytest.approx(fit0.scores[key], abs=1e-6)
        # any other start still reaches the same anchored optimum (concavity),
        # up to the stopping tolerance
        mixed = fit_bt(judgments, init_scores={"a": -2.0, "b": 1.0, "c": 0.5})
        for key in fit0.scores:
            assert mixed.scores[key] == pytest.approx(fit0.scores[key], abs=1e-4)

    def test_antisymmetry_bitwise(self):
        base = [rec("b1", "b2", 0.8), rec("b2", "b3", 0.8), rec("b1", "b3", 0.9)]
        flipped = [rec("b2", "b1", 1 - 0.8), rec("b2", "b3", 0.8), rec("b1", "b3", 0.9)]
        f1, f2 = fit_bt(base), fit_bt(flipped)
        assert f1.scores == f2.scores
        low = [rec("b1", "b2", 0.3), rec("b2", "b3", 0.8)]
        low_flipped = [rec("b2", "b1", 1 - 0.3), rec("b2", "b3", 0.8)]
        assert fit_bt(low).scores == fit_bt(low_flipped).scores

    def test_confidence_range_validated(self):
        bad = JudgmentRecord.__new__(JudgmentRecord)
        object.__setattr__(bad, "block_i", "a")
        object.__setattr__(bad, "block_j", "b")
        object.__setattr__(bad, "criterion", CriterionKind.TREND)
        object.__setattr__(bad, "votes_forward", 10)
        object.__setattr__(bad, "votes_reverse", 10)
        object.__setattr__(bad, "repeats_per_order", 20)
        object.__setattr__(bad, "confidence_p", 1.5)
        object.__setattr__(bad, "judge_id", "t")
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            fit_bt([bad])


class TestComponents:
    def test_disconnected_components_anchored_separately(self, caplog):
        judgments = [rec("a", "b", 0.8), rec("c", "d", 0.7)]
        with caplog.at_level("WARNING"):
            fit = fit_bt(judgments)
        assert "2 connected components" in caplog.text
        assert sorted(map(sorted, fit.components)) == [["a", "b"], ["c", "d"]]
        assert fit.scores["a"] + fit.scores["b"] == pytest.approx(0.0, abs=1e-12)
        assert fit.scores["c"] + fit.scores["d"] == pytest.approx(0.0, abs=1e-12)

    def test_serialization_shape(self):
        fit = fit_bt([rec("a", "b", 0.8)])
        doc = fit.to_dict(criterion="trend")
        assert set(doc) == {
            "criterion", "scores", "log_likelihood", "iterations", "converged",
        }
        assert doc["criterion"] == "trend"


class TestSeparableData:
    def test_extreme_confidence_stays_finite(self):
        # p = 1.0 exactly is separable; scores drift but must remain finite
        judgments = [rec("hi", "lo", 1.0), rec("hi", "lo2", 1.0)]
        options = BTOptions(max_iterations=500)
        fit = fit_bt(judgments, options)
        assert np.isfinite(list(fit.scores.values())).all()
        assert fit.scores["hi"] > fit.scores["lo"]
