"""
Inspection service
Priority-guided, bounded inspection of one target revision: module priorities,
inspection memory, tool-driven iterations, context compaction and shared memory
"""
import json
import logging
import uuid
from typing import Dict, Iterable, List, Optional, Set, Tuple

from pydantic import BaseModel, Field

from refaudit.config import RunConfig
from refaudit.models.inspection import (
    UNASSIGNED_MODULE,
    FileStatus,
    InspectionMemory,
    IterationRecord,
    PriorityPartition,
    PromotionEntry,
    PromotionReason,
    ScopeBoundary,
    SharedMemoryEntry,
)
from refaudit.models.llm import ChatMessage
from refaudit.models.schemas import (
    RepoCheckout,
    RepositorySemantics,
    Role,
    VulnerabilitySemantics,
    render_role,
)
from refaudit.services.code_facts import CodeFacts
from refaudit.services.llm_client import EmbeddingBackend, LLMGateway, estimate_message, estimate_request
from refaudit.services.similarity import promotes, promotion_similarities
from refaudit.services.state_store import StateStore
from refaudit.services.tool_handlers import InspectionToolbox
from refaudit.utils.error_handler import (
    BackendError,
    Diagnostic,
    DiagnosticsCollector,
    MemoryExistsError,
    log_performance,
)

logger = logging.getLogger(__name__)

STAGE = "inspection"
PENDING_PREVIEW = 40
SUMMARY_RESULT_CHARS = 300
SUMMARY_HEADER = "Compact reasoning summary of earlier turns:\n"

SYSTEM_PROMPT = (
    "You audit a target repository for variants of a known vulnerability. "
    "Work only through the provided tools. Follow data from attacker-controlled sources to dangerous sinks. "
    "Report every plausible variant with report_candidate, giving its location, the source-to-sink path and "
    "the code excerpts that support it. Mark each file you have fully inspected with mark_file_completed. "
    "Inspect priority 1 files first, then priority 2, then priority 3. "
    "Call finish_inspection when this turn's work is done."
)


# --------------------------------------------------------------------------- prioritization

def partition_modules(module_roles: Dict[str, Role], edges: Iterable[Tuple[str, str]],
                      affected_roles: Iterable[Role], similarities: Optional[Dict[str, float]] = None,
                      tau: float = 0.8, include_unassigned: bool = False) -> PriorityPartition:
    """
    Split modules into three priority tiers

    Args:
        module_roles: module id -> role
        edges: (caller module, callee module) pairs of the module call graph
        affected_roles: roles recovered from the reference
        similarities: best promotion similarity per module; None skips embedding promotion
        tau: inclusive promotion threshold
        include_unassigned: add the unassigned-file pseudo-module to the last tier

    Returns:
        PriorityPartition with a promotion log entry for every module
    """
    affected = {tuple(r) for r in affected_roles}
    log: List[PromotionEntry] = []
    p1: Set[str] = set()
    for module_id, role in sorted(module_roles.items()):
        if tuple(role) in affected:
            p1.add(module_id)
            log.append(PromotionEntry(module=module_id, reason=PromotionReason.NAME_MATCH))
        if similarities is not None and module_id in similarities and promotes(similarities[module_id], tau):
            p1.add(module_id)
            log.append(PromotionEntry(module=module_id, reason=PromotionReason.EMBEDDING,
                                      similarity=similarities[module_id]))

    callers: Set[str] = set()
    callees: Set[str] = set()
    for caller, callee in edges:
        if callee in p1 and caller not in p1 and caller in module_roles:
            callers.add(caller)
        if caller in p1 and callee not in p1 and callee in module_roles:
            callees.add(callee)
    p2 = callers | callees
    for module_id in sorted(callers):
        log.append(PromotionEntry(module=module_id, reason=PromotionReason.CALLER_OF_P1))
    for module_id in sorted(callees):
        log.append(PromotionEntry(module=module_id, reason=PromotionReason.CALLEE_OF_P1))

    p3 = set(module_roles) - p1 - p2
    if include_unassigned:
        p3.add(UNASSIGNED_MODULE)
    for module_id in sorted(p3):
        log.append(PromotionEntry(module=module_id, reason=PromotionReason.REMAINDER))

    return PriorityPartition(p1=sorted(p1), p2=sorted(p2), p3=sorted(p3), promotion_log=log)


async def prioritize(target_sem: RepositorySemantics, vuln_sem: VulnerabilitySemantics,
                     embedder: EmbeddingBackend, tau: float = 0.8) -> Tuple[PriorityPartition, List[Diagnostic]]:
    """
    Priority tiers of the target's modules

    An embedder failure skips embedding promotion and flags the partition degraded.
    """
    diagnostics = DiagnosticsCollector(STAGE)
    similarities: Optional[Dict[str, float]] = None
    try:
        similarities = await promotion_similarities(target_sem.modules, vuln_sem.affected_modules, embedder)
    except BackendError as e:
        logger.warning(f"Embedding promotion skipped for {target_sem.checkout.project_name}: {e}")
        diagnostics.add("Embedding promotion skipped; name-only partition", error=e)

    partition = partition_modules(
        {m.module_id: m.role for m in target_sem.modules},
        [(e.caller_module, e.callee_module) for e in target_sem.graph.edges],
        vuln_sem.affected_modules,
        similarities,
        tau,
        include_unassigned=bool(target_sem.unassigned),
    )
    partition.degraded = similarities is None
    logger.info(f"Priorities: p1={partition.p1} p2={partition.p2} p3={len(partition.p3)} module(s)")
    return partition, diagnostics.entries


# --------------------------------------------------------------------------- memory

def init_memory(target_sem: RepositorySemantics, vuln_sem: VulnerabilitySemantics,
                partition: PriorityPartition, max_iterations: int = 3,
                store: Optional[StateStore] = None, fresh: bool = False,
                diagnostics: Optional[List[Diagnostic]] = None) -> InspectionMemory:
    """
    Fresh inspection memory with every scoped file pending, priority 1 files first

    Raises:
        MemoryExistsError: persisted memory exists for this run and fresh is not set
    """
    project, commit = target_sem.checkout.key
    if store is not None and not fresh and store.has_memory(vuln_sem.advisory_id, project, commit):
        raise MemoryExistsError(f"Inspection memory for {vuln_sem.advisory_id} on {project}@{commit} "
                                f"already exists; pass --fresh to start over")

    files_of: Dict[str, List[str]] = {m.module_id: list(m.files) for m in target_sem.modules}
    files_of[UNASSIGNED_MODULE] = list(target_sem.unassigned)

    module_of: Dict[str, List[str]] = {}
    for module_id, files in files_of.items():
        for rel_path in files:
            module_of.setdefault(rel_path, []).append(module_id)

    scope_order: List[str] = []
    file_tier: Dict[str, int] = {}
    for tier, members in ((1, partition.p1), (2, partition.p2), (3, partition.p3)):
        for module_id in members:
            for rel_path in files_of.get(module_id, []):
                if rel_path not in file_tier:
                    file_tier[rel_path] = tier
                    scope_order.append(rel_path)

    return InspectionMemory(
        advisory_id=vuln_sem.advisory_id,
        project=project,
        commit=commit,
        file_status={f: FileStatus() for f in scope_order},
        module_of={f: sorted(module_of.get(f, [])) for f in scope_order},
        file_tier=file_tier,
        priorities=partition,
        scope_boundary=ScopeBoundary(
            critical_files=[f for f in scope_order if file_tier[f] <= 2],
            scope_order=scope_order,
        ),
        max_iterations=max_iterations,
        diagnostics=list(diagnostics or []),
    )


# --------------------------------------------------------------------------- context

def build_task(vuln_sem: VulnerabilitySemantics, target_sem: RepositorySemantics,
               memory: InspectionMemory, index: int) -> str:
    """Context of one iteration: vulnerability semantics, priority tiers and the current memory state"""
    features = vuln_sem.features
    chain = "\n".join(f"  {n}. [{e.role.value}] {e.file} :: {e.function}" + (f" - {e.note}" if e.note else "")
                      for n, e in enumerate(vuln_sem.chain.entries, start=1))
    labels = {m.module_id: m.label for m in target_sem.modules}

    def tier_lines(members: List[str]) -> str:
        if not members:
            return "  (none)"
        return "\n".join(f"  - {m} ({labels.get(m, 'files without a module')})" for m in members)

    pending = memory.remaining_files()
    pending_lines = "\n".join(f"  - [p{memory.file_tier[f]}] {f} ({memory.file_status[f].state.value})"
                              for f in pending[:PENDING_PREVIEW])
    if len(pending) > PENDING_PREVIEW:
        pending_lines += f"\n  ... {len(pending) - PENDING_PREVIEW} more"
    candidates = "\n".join(f"  - {c.id}: {c.location.file}:{c.location.start_line}-{c.location.end_line} "
                           f"sink {c.sink} ({c.confidence})" for c in memory.candidates) or "  (none)"
    coverage = ", ".join(f"{tier} {v['completed']}/{v['total']}" for tier, v in memory.coverage().items())

    return (
        f"Iteration {index} of {memory.max_iterations} for advisory {vuln_sem.advisory_id} "
        f"on {memory.project}@{memory.commit}\n\n"
        f"## Reference vulnerability\n"
        f"family: {features.vuln_family}\n"
        f"trigger condition: {features.trigger_condition}\n"
        f"propagation constraints: {features.propagation_constraints}\n"
        f"exploitable scenario: {features.exploitable_scenario}\n"
        f"missing guard: {features.missing_guard}\n"
        f"trust boundary: {features.trust_boundary}\n"
        f"witness chain:\n{chain}\n"
        f"affected roles: {', '.join(render_role(r) for r in vuln_sem.affected_modules)}\n\n"
        f"## Target priorities\n"
        f"priority 1:\n{tier_lines(memory.priorities.p1)}\n"
        f"priority 2:\n{tier_lines(memory.priorities.p2)}\n"
        f"priority 3:\n{tier_lines(memory.priorities.p3)}\n\n"
        f"## Inspection state\n"
        f"coverage: {coverage}\n"
        f"stop policy: {memory.scope_boundary.stop_policy}\n"
        f"files still to inspect:\n{pending_lines or '  (none)'}\n"
        f"candidates so far:\n{candidates}\n"
        + (f"rejected hypotheses:\n" + "\n".join(f"  - {h}" for h in memory.rejected_hypotheses) + "\n"
           if memory.rejected_hypotheses else "")
    )


class Compaction(BaseModel):
    messages: List[ChatMessage]
    compacted: bool = False
    truncated: bool = False
    predicted_tokens: int = 0


def _summarize_turns(prior: List[ChatMessage], memory: InspectionMemory) -> List[str]:
    """Extractive summary of earlier turns: calls made, failures, shared memory hits, memory state"""
    lines: List[str] = []
    for message in prior:
        if message.role == "assistant":
            for call in message.tool_calls:
                lines.append(f"called {call.name} {call.arguments[:120]}")
        elif message.role == "tool":
            try:
                payload = json.loads(message.content)
            except json.JSONDecodeError:
                payload = None
            if isinstance(payload, dict) and payload.get("error"):
                lines.append(f"FAILED {message.name}: {str(payload['error'])[:SUMMARY_RESULT_CHARS]}")
            elif message.name == "read_shared_memory" and isinstance(payload, dict):
                for entry in payload.get("entries", []):
                    lines.append(f"shared memory [{entry.get('scope_key')}]: "
                                 f"{str(entry.get('observation', ''))[:SUMMARY_RESULT_CHARS]}")
    completed = memory.completed_files()
    lines.append(f"completed files: {', '.join(completed) if completed else 'none'}")
    lines.append(f"candidates: {', '.join(memory.candidate_ids) if memory.candidate_ids else 'none'}")
    return lines


def is_summary(message: ChatMessage) -> bool:
    return message.role == "user" and message.content.startswith(SUMMARY_HEADER)


def compact_context(messages: List[ChatMessage], memory: InspectionMemory, budget: int,
                    tool_schemas: Optional[List[dict]] = None) -> Compaction:
    """
    Replace prior turns with a compact summary when the next request would exceed the budget

    The summary is extractive. Memory is read, never written. The iteration task is the first
    user message that is not itself a summary, so it survives repeated compactions; lines of an
    earlier summary are carried into the new one. If the summary plus the current task still
    exceed the budget, the oldest material is cut and the result flagged truncated.
    """
    predicted = estimate_request(messages, tool_schemas)
    if predicted <= budget:
        return Compaction(messages=list(messages), predicted_tokens=predicted)

    system = [m for m in messages[:1] if m.role == "system"]
    task_index = next((i for i, m in enumerate(messages) if m.role == "user" and not is_summary(m)), None)
    task = messages[task_index] if task_index is not None else ChatMessage(role="user", content="")

    # memory-state lines are recomputed below
    carried = [line for m in messages if is_summary(m)
               for line in m.content[len(SUMMARY_HEADER):].splitlines()
               if line and not line.startswith(("completed files:", "candidates:"))]
    prior = [m for i, m in enumerate(messages[len(system):], start=len(system))
             if i != task_index and not is_summary(m) and (task_index is None or i > task_index)]

    lines = carried + _summarize_turns(prior, memory)
    truncated = False

    def assemble() -> List[ChatMessage]:
        summary = ChatMessage(role="user", content=SUMMARY_HEADER + "\n".join(lines))
        return system + [summary, task]

    compacted = assemble()
    while estimate_request(compacted, tool_schemas) > budget and lines:
        lines.pop(0)
        truncated = True
        compacted = assemble()

    if estimate_request(compacted, tool_schemas) > budget:
        content = task.content
        fixed = estimate_request(system, tool_schemas) + estimate_message(ChatMessage(role="user", content=""))
        while content and fixed + estimate_message(ChatMessage(role="user", content=content)) > budget:
            content = content[:int(len(content) * 0.9)]
        task = ChatMessage(role="user", content=content)
        compacted = system + [task]
        truncated = True

    after = estimate_request(compacted, tool_schemas)
    logger.info(f"Compacted context from ~{predicted} to ~{after} tokens" + (" (truncated)" if truncated else ""))
    return Compaction(messages=compacted, compacted=True, truncated=truncated, predicted_tokens=after)


# --------------------------------------------------------------------------- iterations

async def run_iteration(memory: InspectionMemory, toolbox: InspectionToolbox, gateway: LLMGateway,
                        vuln_sem: VulnerabilitySemantics, target_sem: RepositorySemantics,
                        config: Optional[RunConfig] = None, store: Optional[StateStore] = None) -> IterationRecord:
    """
    One bounded tool-using turn over the target

    The turn ends when the agent emits no tool calls, calls finish_inspection, exhausts the
    turn budget or the backend fails. Memory is persisted afterwards in every case.
    """
    config = config or RunConfig()
    if memory.iteration_count >= memory.max_iterations:
        raise ValueError(f"Iteration cap {memory.max_iterations} already reached")

    index = memory.iteration_count + 1
    toolbox.begin_iteration(index)
    record = IterationRecord(index=index)
    diagnostics = DiagnosticsCollector(STAGE)
    completed_before = set(memory.completed_files())
    candidates_before = set(memory.candidate_ids)
    tool_schemas = toolbox.registry.get_function_schemas()
    budget = min(config.request_budget, gateway.context_window)

    messages = [
        ChatMessage(role="system", content=SYSTEM_PROMPT),
        ChatMessage(role="user", content=build_task(vuln_sem, target_sem, memory, index)),
    ]
    logger.info(f"--- Inspection iteration {index}/{memory.max_iterations} "
                f"for {memory.project}@{memory.commit} ---")

    while True:
        compaction = compact_context(messages, memory, budget, tool_schemas)
        if compaction.compacted:
            record.compactions += 1
            if compaction.truncated:
                diagnostics.add("Context hard-truncated during compaction", context=f"iteration {index}")
            messages = compaction.messages
        try:
            result = await gateway.chat(messages, "inspection", STAGE, tools=toolbox.registry)
        except BackendError as e:
            logger.error(f"Backend failure during iteration {index}: {e}")
            diagnostics.add("Backend failure mid-turn", context=f"iteration {index}", error=e)
            record.ended_by = "backend_error"
            break

        memory.token_usage = memory.token_usage + result.usage
        for note in result.diagnostics:
            diagnostics.add(note, context=f"iteration {index}")
        messages.extend(result.transcript)
        if not result.tool_calls:
            record.ended_by = "no_tool_calls"
            break

        budget_hit = False
        for call in result.tool_calls:
            if record.tool_calls >= config.turn_budget:
                budget_hit = True
                break
            output = await toolbox.dispatch(call)
            record.tool_calls += 1
            messages.append(ChatMessage(role="tool", tool_call_id=call.id, name=call.name, content=output))
        if budget_hit:
            logger.warning(f"Iteration {index} stopped by the turn budget ({config.turn_budget} tool calls)")
            record.ended_by = "turn_budget"
            break
        if toolbox.finish_requested:
            record.ended_by = "completed"
            break

    record.new_candidates = [c for c in memory.candidate_ids if c not in candidates_before]
    record.completed_files = [f for f in memory.completed_files() if f not in completed_before]
    memory.iterations.append(record)
    memory.iteration_count = index
    memory.diagnostics.extend(diagnostics.entries)
    if store is not None:
        store.save_memory(memory)
    logger.info(f"Iteration {index} ended by {record.ended_by}: {record.tool_calls} tool call(s), "
                f"{len(record.new_candidates)} new candidate(s), {len(record.completed_files)} file(s) completed")
    return record


# --------------------------------------------------------------------------- shared memory

class SharedObservation(BaseModel):
    scope_key: str = Field(min_length=1)
    observation: str = Field(min_length=1)


class SharedMemoryReply(BaseModel):
    entries: List[SharedObservation] = Field(default_factory=list)


async def distill_shared_memory(memory: InspectionMemory, events: List[dict], gateway: LLMGateway,
                                config: Optional[RunConfig] = None, run_id: Optional[str] = None
                                ) -> List[SharedMemoryEntry]:
    """
    Compact observations from a finished run, scoped to (project, module)

    A run without tool activity yields nothing; a backend failure yields nothing.
    """
    config = config or RunConfig()
    if not events or config.shared_memory_max_entries == 0:
        return []
    run_id = run_id or uuid.uuid4().hex[:12]
    known_modules = {m for modules in memory.module_of.values() for m in modules}

    observed = []
    for event in events:
        if not event.get("ok") or event["tool"] not in ("analyze_data_flow", "report_candidate", "mark_file_completed"):
            continue
        file = event["arguments"].get("file", "")
        modules = memory.module_of.get(file, [])
        observed.append(f"- {event['tool']} on {file} (modules {modules}): "
                        f"{json.dumps(event['arguments'])[:200]} -> {event['result'][:SUMMARY_RESULT_CHARS]}")
    if not observed:
        return []

    prompt = (
        f"Project {memory.project}@{memory.commit}, advisory {memory.advisory_id}.\n"
        f"Tool activity of the finished run:\n" + "\n".join(observed) + "\n\n"
        f"Distill at most {config.shared_memory_max_entries} short data-flow observations that would save a later "
        f"run from repeating this reasoning. scope_key must be one of: {sorted(known_modules)}. "
        'Reply with JSON: {"entries": [{"scope_key": "...", "observation": "..."}]}'
    )
    messages = [ChatMessage(role="system", content="You condense audit notes."),
                ChatMessage(role="user", content=prompt)]
    try:
        reply, usage = await gateway.complete_json(messages, "shared-memory", STAGE, SharedMemoryReply, retries=1)
    except BackendError as e:
        logger.warning(f"Shared memory distillation failed: {e}")
        memory.diagnostics.append(Diagnostic(stage=STAGE, context="shared-memory",
                                             error_type=type(e).__name__, message=str(e)))
        return []
    memory.token_usage = memory.token_usage + usage

    entries: List[SharedMemoryEntry] = []
    for item in reply.entries:
        if item.scope_key not in known_modules:
            logger.debug(f"Dropping shared observation for unknown scope {item.scope_key}")
            continue
        entries.append(SharedMemoryEntry(
            project=memory.project,
            scope_key=item.scope_key,
            observation=item.observation[:config.shared_memory_entry_chars],
            run_id=run_id,
        ))
        if len(entries) >= config.shared_memory_max_entries:
            break
    return entries


# --------------------------------------------------------------------------- whole run

@log_performance(threshold=600.0)
async def inspect_target(checkout: RepoCheckout, target_sem: RepositorySemantics,
                         vuln_sem: VulnerabilitySemantics, gateway: LLMGateway, embedder: EmbeddingBackend,
                         store: StateStore, config: Optional[RunConfig] = None,
                         fresh: bool = False) -> InspectionMemory:
    """
    Inspect one target revision, resuming persisted memory when present

    Memory is persisted after every iteration; a rerun after a kill continues where it stopped.

    Raises:
        CheckoutError: the checkout cannot be resolved; nothing is emitted
    """
    config = config or RunConfig()
    facts = CodeFacts(checkout)
    project, commit = checkout.key
    logger.info(f"=== Inspecting {project}@{commit} for {vuln_sem.advisory_id} ===")

    if fresh and store.has_memory(vuln_sem.advisory_id, project, commit):
        store.delete_memory(vuln_sem.advisory_id, project, commit)

    if store.has_memory(vuln_sem.advisory_id, project, commit):
        memory = store.load_memory(vuln_sem.advisory_id, project, commit)
        logger.info(f"Resuming inspection memory at iteration {memory.iteration_count}")
    else:
        partition, diagnostics = await prioritize(target_sem, vuln_sem, embedder, config.tau_m)
        memory = init_memory(target_sem, vuln_sem, partition, config.max_iterations,
                             store=store, fresh=fresh, diagnostics=diagnostics)
        store.save_memory(memory)

    if memory.finished:
        logger.info(f"Inspection of {project}@{commit} already finished")
        return memory

    toolbox = InspectionToolbox(facts, target_sem, memory, store)
    run_events: List[dict] = []
    while memory.iteration_count < memory.max_iterations:
        await run_iteration(memory, toolbox, gateway, vuln_sem, target_sem, config, store)
        run_events.extend(toolbox.events)
        critical = memory.scope_boundary.critical_files
        if (critical and memory.critical_scope_done()) or not memory.remaining_files():
            logger.info(f"Critical scope completed after iteration {memory.iteration_count}")
            break

    memory.finished = True
    entries = await distill_shared_memory(memory, run_events, gateway, config)
    if entries:
        store.append_shared(entries)
        logger.info(f"Recorded {len(entries)} shared observation(s) for {project}")
    store.save_memory(memory)
    coverage = memory.coverage()
    logger.info(f"Inspection finished: {len(memory.candidates)} candidate(s), coverage {coverage}")
    return memory
