"""
Prioritization, inspection memory, compaction and the inspection loop
"""
import json
import random

import pytest

from refaudit.config import RunConfig
from refaudit.models.inspection import FileState, InspectionMemory, PriorityPartition, PromotionReason
from refaudit.models.llm import ChatMessage, RawToolCall
from refaudit.services.code_facts import CodeFacts
from refaudit.services.inspection import (
    compact_context,
    distill_shared_memory,
    init_memory,
    inspect_target,
    partition_modules,
    prioritize,
    run_iteration,
)
from refaudit.services.llm_client import estimate_request
from refaudit.services.tool_handlers import InspectionToolbox
from refaudit.utils.error_handler import MemoryExistsError

from conftest import PIPELINE_FIXTURE, json_reply, make_gateway

ROLES = [("A", "x"), ("A", "y"), ("B", "x"), ("B", "z"), ("C", "w")]


def inspection_replies():
    document = json.loads(PIPELINE_FIXTURE.read_text())
    [entry] = [e for e in document["chat"] if e["prompt_id"] == "inspection"]
    return entry["replies"]


def brute_force_tiers(module_roles, edges, affected, similarities, tau):
    first = {m for m, role in module_roles.items()
             if role in affected or similarities.get(m, 0.0) >= tau}
    second = set()
    for m in module_roles:
        if m in first:
            continue
        if any((m, p) in edges or (p, m) in edges for p in first):
            second.add(m)
    third = set(module_roles) - first - second
    return first, second, third


def test_partition_agrees_with_brute_force_on_random_graphs():
    rng = random.Random(20241018)
    for _ in range(1000):
        count = rng.randint(0, 9)
        modules = [f"m{i}" for i in range(count)]
        module_roles = {m: rng.choice(ROLES) for m in modules}
        edges = {(rng.choice(modules), rng.choice(modules)) for _ in range(rng.randint(0, 15))} if modules else set()
        affected = set(rng.sample(ROLES, rng.randint(0, 2)))
        similarities = {m: round(rng.random(), 2) for m in modules}
        tau = rng.choice([0.5, 0.8, 0.95])

        partition = partition_modules(module_roles, sorted(edges), sorted(affected), similarities, tau)
        first, second, third = brute_force_tiers(module_roles, edges, affected, similarities, tau)
        assert (set(partition.p1), set(partition.p2), set(partition.p3)) == (first, second, third)
        assert sorted(partition.p1 + partition.p2 + partition.p3) == sorted(modules)
        logged = {entry.module for entry in partition.promotion_log}
        assert logged == set(modules)


def test_partition_logs_promotion_reasons():
    partition = partition_modules(
        {"ui": ("A", "x"), "loader": ("B", "z"), "helper": ("C", "w"), "docs": ("A", "y")},
        [("ui", "loader"), ("loader", "helper")],
        [("A", "x")],
        {"loader": 0.8, "helper": 0.79},
        tau=0.8,
        include_unassigned=True,
    )
    assert partition.p1 == ["loader", "ui"]
    assert partition.p2 == ["helper"]
    assert partition.p3 == ["docs", "unassigned"]
    reasons = {(e.module, e.reason) for e in partition.promotion_log}
    assert ("ui", PromotionReason.NAME_MATCH) in reasons
    assert ("loader", PromotionReason.EMBEDDING) in reasons
    assert ("helper", PromotionReason.CALLEE_OF_P1) in reasons


def test_partition_rejects_overlapping_tiers():
    with pytest.raises(ValueError):
        PriorityPartition(p1=["a"], p3=["a"])


async def test_init_memory_orders_scope_by_tier(target_semantics, vuln_semantics, embedder, store):
    partition, _ = await prioritize(target_semantics, vuln_semantics, embedder)
    memory = init_memory(target_semantics, vuln_semantics, partition)

    order = memory.scope_boundary.scope_order
    tiers = [memory.file_tier[f] for f in order]
    assert tiers == sorted(tiers)
    assert all(s.state == FileState.PENDING for s in memory.file_status.values())
    assert memory.candidates == [] and memory.iteration_count == 0
    assert "app/webui/launch_page.py" in memory.scope_boundary.critical_files

    store.save_memory(memory)
    with pytest.raises(MemoryExistsError):
        init_memory(target_semantics, vuln_semantics, partition, store=store)
    init_memory(target_semantics, vuln_semantics, partition, store=store, fresh=True)


def empty_memory() -> InspectionMemory:
    return InspectionMemory(advisory_id="ADV", project="p", commit="c", priorities=PriorityPartition())


def test_compaction_fits_the_budget_and_leaves_memory_alone():
    rng = random.Random(7)
    for case in range(50):
        memory = empty_memory()
        before = memory.model_dump()
        messages = [ChatMessage(role="system", content="audit"),
                    ChatMessage(role="user", content="task " * rng.randint(1, 400))]
        for turn in range(rng.randint(0, 6)):
            call = RawToolCall(id=f"c{turn}", name="read_file", arguments=json.dumps({"file": f"f{turn}.py"}))
            messages.append(ChatMessage(role="assistant", tool_calls=[call]))
            body = {"error": "missing"} if rng.random() < 0.3 else {"content": "x = 1\n" * rng.randint(1, 300)}
            messages.append(ChatMessage(role="tool", tool_call_id=call.id, name="read_file", content=json.dumps(body)))
        budget = rng.randint(40, 2000)

        result = compact_context(messages, memory, budget)
        assert estimate_request(result.messages) <= budget, f"case {case}"
        assert memory.model_dump() == before


def test_compaction_keeps_failed_calls_in_the_summary():
    memory = empty_memory()
    call = RawToolCall(id="c1", name="read_file", arguments='{"file": "gone.py"}')
    messages = [
        ChatMessage(role="system", content="audit"),
        ChatMessage(role="user", content="inspect the repo"),
        ChatMessage(role="assistant", tool_calls=[call]),
        ChatMessage(role="tool", tool_call_id="c1", name="read_file", content='{"error": "gone.py not found"}'),
        ChatMessage(role="assistant", content="long reasoning " * 400),
    ]
    result = compact_context(messages, memory, budget=600)
    assert result.compacted and not result.truncated
    summary = result.messages[1].content
    assert "FAILED read_file: gone.py not found" in summary
    assert result.messages[-1].content == "inspect the repo"


def test_repeated_compaction_keeps_the_iteration_task():
    memory = empty_memory()
    task = ChatMessage(role="user", content="TASK: inspect p1 modules for the deserialization variant")

    def turn(n: int, failed: bool = False):
        call = RawToolCall(id=f"c{n}", name="read_file", arguments=json.dumps({"file": f"f{n}.py"}))
        body = {"error": f"f{n}.py not found"} if failed else {"content": "x = 1\n" * 400}
        return [ChatMessage(role="assistant", tool_calls=[call]),
                ChatMessage(role="tool", tool_call_id=call.id, name="read_file", content=json.dumps(body))]

    messages = [ChatMessage(role="system", content="audit"), task] + turn(1, failed=True) + turn(2)
    first = compact_context(messages, memory, budget=600)
    assert first.compacted

    second = compact_context(first.messages + turn(3), memory, budget=600)
    assert second.compacted and not second.truncated
    assert [m.content for m in second.messages if m.content.startswith("TASK")] == [task.content]
    assert second.messages[-1] == task
    summaries = [m for m in second.messages if m.content.startswith("Compact reasoning summary")]
    assert len(summaries) == 1
    assert "FAILED read_file: f1.py not found" in summaries[0].content
    assert summaries[0].content.count("completed files:") == 1


async def test_inspect_target_reports_the_variant(target_checkout, target_semantics, vuln_semantics,
                                                  pipeline_gateway, embedder, store):
    memory = await inspect_target(target_checkout, target_semantics, vuln_semantics, pipeline_gateway,
                                  embedder, store)
    assert memory.finished
    assert memory.candidate_ids == ["C001"]
    candidate = memory.candidates[0]
    assert (candidate.location.file, candidate.location.start_line) == ("scripts/convert.py", 7)
    assert candidate.confidence == "high"
    assert memory.iterations[0].ended_by == "completed"
    assert memory.iteration_count == 1
    assert memory.critical_scope_done()
    assert memory.token_usage.input_tokens > 0

    reloaded = store.load_memory("ADV-2024-0001", "target_app", "v2")
    assert reloaded.candidate_ids == ["C001"]
    shared = store.read_shared("target_app")
    assert [e.scope_key for e in shared] == ["Model Assets and Loading :: Loading Configuration"]

    again = await inspect_target(target_checkout, target_semantics, vuln_semantics, pipeline_gateway,
                                 embedder, store)
    assert again.iteration_count == 1


async def test_interrupted_inspection_resumes_without_repeating_work(target_checkout, target_semantics,
                                                                     vuln_semantics, embedder, store):
    replies = inspection_replies()
    partition, _ = await prioritize(target_semantics, vuln_semantics, embedder)
    memory = init_memory(target_semantics, vuln_semantics, partition)
    store.save_memory(memory)

    first = make_gateway({"prompt_id": "inspection", "replies": replies[:2]})
    toolbox = InspectionToolbox(CodeFacts(target_checkout), target_semantics, memory, store)
    record = await run_iteration(memory, toolbox, first, vuln_semantics, target_semantics, store=store)
    assert record.ended_by == "no_tool_calls"
    assert record.new_candidates == ["C001"]

    second = make_gateway(
        {"prompt_id": "inspection", "contains": "Iteration 2 of", "replies": [replies[2]]},
        {"prompt_id": "shared-memory", "replies": [json_reply({"entries": []})]},
    )
    resumed = await inspect_target(target_checkout, target_semantics, vuln_semantics, second, embedder, store)
    assert resumed.iteration_count == 2
    assert resumed.candidate_ids == ["C001"]
    assert resumed.iterations[0].completed_files == []
    assert sorted(resumed.iterations[1].completed_files) == [
        "app/loading/runner.py", "app/webui/launch_page.py", "scripts/convert.py"]


async def test_turn_budget_stops_an_iteration(target_checkout, target_semantics, vuln_semantics, embedder):
    partition, _ = await prioritize(target_semantics, vuln_semantics, embedder)
    memory = init_memory(target_semantics, vuln_semantics, partition)
    toolbox = InspectionToolbox(CodeFacts(target_checkout), target_semantics, memory)
    gateway = make_gateway({"prompt_id": "inspection", "replies": inspection_replies()})

    record = await run_iteration(memory, toolbox, gateway, vuln_semantics, target_semantics,
                                 config=RunConfig(turn_budget=2))
    assert record.ended_by == "turn_budget"
    assert record.tool_calls == 2
    assert memory.iteration_count == 1


async def test_distilled_observations_keep_known_scopes_only(target_semantics, vuln_semantics, embedder):
    partition, _ = await prioritize(target_semantics, vuln_semantics, embedder)
    memory = init_memory(target_semantics, vuln_semantics, partition)
    assert await distill_shared_memory(memory, [], make_gateway()) == []

    events = [{"tool": "analyze_data_flow", "arguments": {"file": "app/loading/runner.py", "function": "run_conversion"},
               "ok": True, "error": None, "result": '{"edges": []}'}]
    gateway = make_gateway({"prompt_id": "shared-memory", "replies": [json_reply({"entries": [
        {"scope_key": "Model Assets and Loading :: Loading Configuration", "observation": "path forwarded"},
        {"scope_key": "Nowhere :: Nothing", "observation": "dropped"},
    ]})]})
    entries = await distill_shared_memory(memory, events, gateway, run_id="run1")
    assert [(e.scope_key, e.run_id) for e in entries] == [
        ("Model Assets and Loading :: Loading Configuration", "run1")]
