"""
Gateway behaviour over scripted backends
"""
import numpy as np
import pytest
from pydantic import BaseModel

from refaudit.models.llm import ChatMessage, TokenLedger
from refaudit.models.schemas import TokenUsage
from refaudit.services.llm_client import (
    HashingEmbeddingBackend,
    HttpChatBackend,
    LLMGateway,
    ScriptedChatBackend,
    ScriptedEmbeddingBackend,
    ScriptedFixture,
    estimate_tokens,
    extract_json,
    prompt_digest,
)
from refaudit.services.tool_handlers import ToolRegistry
from refaudit.utils.error_handler import (
    BackendError,
    EmbeddingError,
    RequestTooLargeError,
    SchemaViolationError,
)

from conftest import json_reply, make_gateway


class EchoArgs(BaseModel):
    text: str


class Verdict(BaseModel):
    answer: str
    score: int


def echo_registry() -> ToolRegistry:
    registry = ToolRegistry()

    async def echo(args: EchoArgs) -> str:
        return args.text

    registry.register_function("echo", "Echo the text back", EchoArgs, echo)
    return registry


def user(text: str):
    return [ChatMessage(role="user", content=text)]


def test_estimate_tokens_over_estimates():
    assert estimate_tokens("") == 0
    assert estimate_tokens("a" * 35) >= 11
    assert estimate_tokens("x") == 1


def test_extract_json_tolerates_code_fences():
    assert extract_json('```json\n{"a": 1}\n```') == {"a": 1}
    assert extract_json(' {"a": 2} ') == {"a": 2}


async def test_scripted_entries_are_selected_by_key_then_contains_then_default():
    digest = prompt_digest("p", "exact question")
    gateway = make_gateway(
        {"prompt_id": "p", "replies": [{"content": "default"}]},
        {"prompt_id": "p", "contains": "alpha", "replies": [{"content": "contains"}]},
        {"prompt_id": "p", "key": digest, "replies": [{"content": "keyed"}]},
    )
    assert (await gateway.chat(user("exact question"), "p", "profiling")).message.content == "keyed"
    assert (await gateway.chat(user("about alpha"), "p", "profiling")).message.content == "contains"
    assert (await gateway.chat(user("anything"), "p", "profiling")).message.content == "default"
    with pytest.raises(BackendError):
        await gateway.chat(user("anything"), "unknown", "profiling")


async def test_malformed_tool_calls_get_one_correction_round():
    gateway = make_gateway({"prompt_id": "tools", "replies": [
        {"tool_calls": [{"id": "a", "name": "echo", "arguments": {}},
                        {"id": "b", "name": "echo", "arguments": {"text": "ok"}}]},
        {"tool_calls": [{"id": "c", "name": "echo", "arguments": {"text": "fixed"}},
                        {"id": "d", "name": "teleport", "arguments": {}}]},
    ]})
    result = await gateway.chat(user("go"), "tools", "inspection", tools=echo_registry())

    assert [c.id for c in result.tool_calls] == ["c"]
    assert result.tool_calls[0].arguments == {"text": "fixed"}
    assert [c.id for c in result.message.tool_calls] == ["c"]
    assert len(result.diagnostics) == 1 and "teleport" in result.diagnostics[0]
    # assistant + two tool replies from the correction, then the final message
    assert [m.role for m in result.transcript] == ["assistant", "tool", "tool", "assistant"]
    assert len(gateway.ledger.snapshot().exchanges) == 2


async def test_complete_json_retries_once_with_the_schema_error():
    gateway = make_gateway(
        {"prompt_id": "judge", "replies": [{"content": '{"answer": "yes"}'}]},
        {"prompt_id": "judge", "contains": "did not follow the required JSON schema",
         "replies": [json_reply({"answer": "yes", "score": 3})]},
    )
    verdict, usage = await gateway.complete_json(user("judge this"), "judge", "verification", Verdict)
    assert verdict == Verdict(answer="yes", score=3)
    assert usage.input_tokens > 0


async def test_complete_json_gives_up_with_the_raw_output():
    gateway = make_gateway({"prompt_id": "judge", "replies": [{"content": "not json at all"}]},
                           {"prompt_id": "judge", "contains": "did not follow",
                            "replies": [{"content": "still not json"}]})
    with pytest.raises(SchemaViolationError) as excinfo:
        await gateway.complete_json(user("judge this"), "judge", "verification", Verdict)
    assert excinfo.value.raw_output == "still not json"
    assert excinfo.value.exit_code == 3


async def test_oversized_requests_are_refused_before_sending():
    gateway = make_gateway({"prompt_id": "p", "replies": [{"content": "x"}]}, context_window=50)
    with pytest.raises(RequestTooLargeError):
        await gateway.chat(user("word " * 200), "p", "profiling")
    assert gateway.ledger.snapshot().exchanges == []


async def test_fallback_backend_takes_over_on_backend_errors():
    primary = ScriptedChatBackend(ScriptedFixture())
    fallback = ScriptedChatBackend(ScriptedFixture.model_validate(
        {"chat": [{"prompt_id": "p", "replies": [{"content": "from fallback"}]}]}))
    gateway = LLMGateway(primary, TokenLedger(), fallback)
    result = await gateway.chat(user("hello"), "p", "profiling")
    assert result.message.content == "from fallback"


async def test_unreachable_http_endpoint_falls_back_after_retries():
    # discard port: every attempt is refused
    primary = HttpChatBackend("http://127.0.0.1:9/v1", "audit-model", timeout_s=5.0)
    fallback = ScriptedChatBackend(ScriptedFixture.model_validate(
        {"chat": [{"prompt_id": "p", "replies": [{"content": "from fallback"}]}]}))

    gateway = LLMGateway(primary, TokenLedger(), fallback)
    result = await gateway.chat(user("hello"), "p", "profiling")
    assert result.message.content == "from fallback"


async def test_ledger_stage_totals_equal_the_sum_of_exchanges():
    gateway = make_gateway(
        {"prompt_id": "a", "replies": [{"content": "one", "usage": {"input_tokens": 10, "output_tokens": 2}}]},
        {"prompt_id": "b", "replies": [{"content": "two"}]},
    )
    for stage in ("profiling", "selection", "profiling"):
        await gateway.chat(user("q"), "a", stage)
    await gateway.chat(user("q"), "b", "inspection")

    snapshot = gateway.ledger.snapshot()
    assert snapshot.stages["profiling"] == TokenUsage(input_tokens=20, output_tokens=4)
    total_in = sum(e.input_tokens for e in snapshot.exchanges)
    total_out = sum(e.output_tokens for e in snapshot.exchanges)
    assert snapshot.total == TokenUsage(input_tokens=total_in, output_tokens=total_out)


def test_ledger_rejects_unknown_stages():
    with pytest.raises(ValueError):
        TokenLedger().record("lunch", "p", TokenUsage())


async def test_hashing_embeddings_are_unit_vectors_and_deterministic():
    embedder = HashingEmbeddingBackend()
    result = await embedder.embed(["load a checkpoint", "load a checkpoint", ""])
    vectors = np.asarray(result.vectors)
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0)
    assert np.allclose(vectors[0], vectors[1])
    with pytest.raises(ValueError):
        await embedder.embed([])


async def test_scripted_embeddings_validate_vectors():
    embedder = ScriptedEmbeddingBackend({"a": [3.0, 4.0], "zero": [0.0, 0.0]})
    result = await embedder.embed(["a"])
    assert result.vectors[0] == pytest.approx([0.6, 0.8])
    with pytest.raises(EmbeddingError):
        await embedder.embed(["zero"])
    with pytest.raises(EmbeddingError):
        await embedder.embed(["unknown"])
