import numpy as np
import pytest

from tsrate.core import Block, CriterionKind
from tsrate.judge import JudgeConfig, LLMJudge, judge_pair
from tsrate.llm import LLMClient, TransportError


def block_of(values, bid):
    arr = np.asarray(values, dtype=np.float64)
    return Block(bid, bid, 0, 0, arr.size, arr)


BLOCK_A = block_of(np.linspace(0, 1, 16), "a")
BLOCK_B = block_of(np.linspace(1, 0, 16), "b")


def chat_response(text):
    return {"choices": [{"message": {"content": text}}]}


class ScriptedTransport:
    """Returns queued responses; exceptions in the queue are raised."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def __call__(self, url, headers, payload, timeout):
        self.calls.append({"url": url, "headers": headers, "payload": payload})
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def make_client(script, **kwargs):
    transport = ScriptedTransport(script)
    client = LLMClient(
        endpoint="https://example.test/v1",
        model="judge-model",
        api_key="sk-test",
        backoff_base=0.0,
        transport=transport,
        **kwargs,
    )
    return client, transport


class TestClient:
    def test_url_and_payload(self):
        client, transport = make_client([chat_response("A")])
        assert client.complete("hello") == "A"
        call = transport.calls[0]
        assert call["url"] == "https://example.test/v1/chat/completions"
        assert call["payload"]["model"] == "judge-model"
        assert call["payload"]["messages"] == [{"role": "user", "content": "hello"}]
        assert call["headers"]["Authorization"] == "Bearer sk-test"
        assert "temperature" not in call["payload"]

    def test_retry_then_success(self):
        client, transport = make_client(
            [TransportError("503"), TransportError("503"), chat_response("B")]
        )
        assert client.complete("x") == "B"
        assert len(transport.calls) == 3

    def test_budget_exhaustion_raises(self):
        client, _ = make_client([TransportError("500")] * 4, max_retries=2)
        with pytest.raises(TransportError, match="after 3 attempts"):
            client.complete("x")

    def test_api_key_from_environment(self, monkeypatch):
        monkeypatch.setenv("TSRATE_API_KEY", "sk-env")
        transport = ScriptedTransport([chat_response("A")])
        client = LLMClient(
            endpoint="https://example.test/v1", model="m", transport=transport
        )
        client.complete("x")
        assert transport.calls[0]["headers"]["Authorization"] == "Bearer sk-env"


class TestLLMJudge:
    def config(self, repeats=4, concurrency=1):
        return JudgeConfig(
            repeats_m=repeats,
            swap_debias=True,
            request_concurrency=concurrency,
            judge_kind="llm",
        )

    @staticmethod
    def canonical_order():
        from tsrate.judge import content_hash

        if content_hash(BLOCK_A.values) <= content_hash(BLOCK_B.values):
            return BLOCK_A, BLOCK_B
        return BLOCK_B, BLOCK_A

    def test_vote_counting_and_debias(self):
        first, _second = self.canonical_order()
        # queried ordering 1 (first listed first): 3 of 4 prefer first;
        # queried ordering 2 (second listed first): 1 of 4 prefer second.
        script = [chat_response(v) for v in ["A", "A", "B", "A", "A", "B", "B", "B"]]
        client, _ = make_client(script)
        judge = LLMJudge(client)
        record = judge_pair(
            judge, BLOCK_A, BLOCK_B, CriterionKind.TREND, self.config(), cache=None
        )
        p_first = (
            record.confidence_p
            if record.block_i == first.block_id
            else 1 - record.confidence_p
        )
        assert p_first == pytest.approx((3 / 4 + 3 / 4) / 2)

    def test_abstentions_excluded_from_denominator(self):
        first, _second = self.canonical_order()
        # ordering 1: one vote abstains after its retry -> 2 valid, both for first
        script = [chat_response(v) for v in ["A", "hmm", "??", "A"]]
        # ordering 2: 3 valid, all for the block listed first there (= second)
        script += [chat_response(v) for v in ["A", "A", "A"]]
        client, _ = make_client(script)
        judge = LLMJudge(client, parse_retries=1)
        config = JudgeConfig(
            repeats_m=3, swap_debias=True, request_concurrency=1, judge_kind="llm"
        )
        record = judge_pair(judge, BLOCK_A, BLOCK_B, CriterionKind.TREND, config)
        p_first = (
            record.confidence_p
            if record.block_i == first.block_id
            else 1 - record.confidence_p
        )
        assert p_first == pytest.approx((2 / 2 + 0 / 3) / 2)

    def test_all_unparseable_raises_with_partial(self):
        script = [chat_response("??")] * 8
        client, _ = make_client(script)
        judge = LLMJudge(client, parse_retries=0)
        with pytest.raises(Exception, match="failed to parse"):
            judge_pair(
                judge, BLOCK_A, BLOCK_B, CriterionKind.TREND,
                JudgeConfig(repeats_m=4, swap_debias=False, judge_kind="llm"),
            )

    def test_position_bias_cancels_exactly(self):
        # a judge that always answers "A" is pure positional bias; the
        # order swap must cancel it to exactly 0.5 (concurrent collection)
        script = [chat_response("A")] * 8
        client, _ = make_client(script)
        judge = LLMJudge(client)
        record = judge_pair(
            judge, BLOCK_A, BLOCK_B, CriterionKind.TREND,
            self.config(repeats=4, concurrency=4),
        )
        assert record.confidence_p == 0.5
