"""
Verification service
Static claim checking of candidates, four-way classification, sandboxed PoC attempts
and per-target orchestration
"""
import asyncio
import hashlib
import logging
import re
from pathlib import Path, PurePosixPath
from typing import List, Literal, Optional, Set, Tuple

from pydantic import BaseModel, Field

from refaudit.config import RunConfig
from refaudit.models.inspection import Candidate, InspectionMemory, PathStep
from refaudit.models.llm import ChatMessage
from refaudit.models.schemas import (
    CallRelation,
    ChainRole,
    FunctionFact,
    RepoCheckout,
    RepositorySemantics,
    TokenUsage,
    VulnerabilitySemantics,
)
from refaudit.models.verification import (
    EXPLOIT_KINDS,
    ClaimCheck,
    ClaimKind,
    Conclusion,
    ConclusionKind,
    Finding,
    FindingSet,
    PocAttempt,
    PocOutcome,
    PocRecord,
    SandboxResult,
    Verdict,
)
from refaudit.services.code_facts import CodeFacts
from refaudit.services.llm_client import LLMGateway
from refaudit.services.sandbox import SandboxExecutor
from refaudit.services.state_store import StateStore
from refaudit.services.taxonomy import SinkCatalog, SinkFamily, shipped_sink_catalog
from refaudit.utils.error_handler import (
    AuditError,
    BackendError,
    CheckoutError,
    DiagnosticsCollector,
    SandboxUnavailableError,
    VerificationError,
    log_performance,
)

logger = logging.getLogger(__name__)

STAGE = "verification"
SINK_MARKER = "REFAUDIT_SINK_REACHED"
EVIDENCE_CHARS = 240
FEEDBACK_CHARS = 1500

CLASSIFY_PROMPT = (
    "You verify a candidate vulnerability variant. Static claim checks are given. "
    "Decide whether the target is exploitable as-is, or only under explicit input preconditions. "
    "You only answer with the JSON object requested."
)
POC_PROMPT = (
    "You write minimal proof-of-concept scripts that show a sink is reachable. "
    f"Instrument the sink so that it prints {SINK_MARKER} when invoked, then drive the target code path. "
    "Never include a real exploit payload. The target repository is the working directory and is read-only. "
    "You only answer with the JSON object requested."
)


class ClassifyReply(BaseModel):
    kind: Literal["exploitable", "conditionally_exploitable"]
    rationale: str = ""
    preconditions: List[str] = Field(default_factory=list)


class PocScriptReply(BaseModel):
    description: str = Field(min_length=1)
    script: str = Field(min_length=1)


# --------------------------------------------------------------------------- static checks

def _excerpt(text: str) -> str:
    return " ".join(text.split())[:EVIDENCE_CHARS]


def _first_hit(patterns: List[str], text: str, file: str, first_line: int) -> Optional[str]:
    for offset, line in enumerate(text.splitlines()):
        for pattern in patterns:
            if re.search(pattern, line):
                return f"{file}:{first_line + offset}: {_excerpt(line)}"
    return None


class StaticChecker:
    """Decomposes a candidate narrative into claims and checks each against the target checkout"""

    def __init__(self, facts: CodeFacts, target_sem: RepositorySemantics, vuln_sem: VulnerabilitySemantics,
                 catalog: Optional[SinkCatalog] = None, relations: Optional[List[CallRelation]] = None):
        self.facts = facts
        self.target_sem = target_sem
        self.vuln_sem = vuln_sem
        self.catalog = catalog or shipped_sink_catalog()
        self.family: Optional[SinkFamily] = self.catalog.family(vuln_sem.features.vuln_family)
        self.family_name = vuln_sem.features.vuln_family
        self._relations = relations

    @property
    def relations(self) -> List[CallRelation]:
        if self._relations is None:
            self._relations = self.facts.extract_call_relations().relations
        return self._relations

    # ------------------------------------------------------------------ lookups

    def _lookup(self, file: str, function: Optional[str]) -> Tuple[Optional[FunctionFact], Optional[str]]:
        """(fact, failure); failure names the lookup that did not resolve"""
        if not self.facts.exists(file):
            return None, f"lookup failed: file not found: {file}"
        if not function:
            return None, None
        try:
            return self.facts.find_function(file, function), None
        except AuditError:
            return None, f"lookup failed: function {function} not found in {file}"

    def _step_text(self, step: PathStep) -> Tuple[str, int]:
        fact, failure = self._lookup(step.file, step.function)
        if failure:
            return "", 1
        if fact is not None:
            code = self.facts.get_function_code(step.file, fact.qualified_name)
            return code.source, code.start_line
        return self.facts.read_text(step.file), 1

    @staticmethod
    def _matches(fact: FunctionFact, name: Optional[str]) -> bool:
        return name is None or fact.qualified_name == name or fact.simple_name == name.rsplit(".", 1)[-1]

    # ------------------------------------------------------------------ claims

    def check_source(self, step: Optional[PathStep]) -> ClaimCheck:
        statement = (f"{step.function or step.file} in {step.file} receives attacker-controlled input"
                     if step else "the narrative names a source")
        if step is None:
            return ClaimCheck(claim=ClaimKind.SOURCE_EXISTS, statement=statement, verified=Verdict.NO,
                              evidence="lookup failed: no source step in the path")
        fact, failure = self._lookup(step.file, step.function)
        if failure:
            return ClaimCheck(claim=ClaimKind.SOURCE_EXISTS, statement=statement, verified=Verdict.NO,
                              evidence=failure)
        text, first = self._step_text(step)
        where = f"{step.file}:{fact.start_line} {fact.qualified_name}" if fact else step.file
        return ClaimCheck(claim=ClaimKind.SOURCE_EXISTS, statement=statement, verified=Verdict.YES,
                          evidence=f"{where}: {_excerpt(text.splitlines()[0] if text else '')}")

    def check_propagation(self, upstream: PathStep, downstream: PathStep) -> ClaimCheck:
        statement = (f"data flows from {upstream.function or upstream.file} ({upstream.file}) "
                     f"to {downstream.function or downstream.file} ({downstream.file})")
        failures = [f for f in (self._lookup(upstream.file, upstream.function)[1],
                                self._lookup(downstream.file, downstream.function)[1]) if f]
        if failures:
            return ClaimCheck(claim=ClaimKind.PROPAGATION_EXISTS, statement=statement, verified=Verdict.NO,
                              evidence="; ".join(failures))

        if upstream.file == downstream.file and upstream.function == downstream.function:
            return ClaimCheck(claim=ClaimKind.PROPAGATION_EXISTS, statement=statement, verified=Verdict.YES,
                              evidence=f"same function in {upstream.file}")

        for relation in self.relations:
            callee = relation.callee_resolved
            if callee is None:
                continue
            if (relation.caller.file == upstream.file and self._matches(relation.caller, upstream.function)
                    and callee.file == downstream.file and self._matches(callee, downstream.function)):
                return ClaimCheck(
                    claim=ClaimKind.PROPAGATION_EXISTS, statement=statement, verified=Verdict.YES,
                    evidence=f"{relation.caller.qualified_name} calls {callee.qualified_name} "
                             f"at {relation.caller.file}:{relation.call_site_line}")

        text, first = self._step_text(upstream)
        target = PurePosixPath(downstream.file)
        needles = [re.escape(downstream.file), re.escape(target.name),
                   re.escape(".".join(target.with_suffix("").parts))]
        if downstream.function:
            needles.append(rf"\b{re.escape(downstream.function.rsplit('.', 1)[-1])}\s*\(")
        hit = _first_hit(needles, text, upstream.file, first)
        if hit:
            return ClaimCheck(claim=ClaimKind.PROPAGATION_EXISTS, statement=statement, verified=Verdict.YES,
                              evidence=hit)
        return ClaimCheck(claim=ClaimKind.PROPAGATION_EXISTS, statement=statement, verified=Verdict.UNRESOLVED,
                          evidence=f"no call relation or reference from {upstream.file} to {downstream.file}")

    def _location_text(self, candidate: Candidate) -> Tuple[str, int, Optional[str]]:
        location = candidate.location
        if not self.facts.exists(location.file):
            return "", 1, f"lookup failed: file not found: {location.file}"
        lines = self.facts.read_lines(location.file)
        if location.end_line > len(lines):
            return "", 1, f"lookup failed: {location.file} has {len(lines)} lines, span ends at {location.end_line}"
        return "\n".join(lines[location.start_line - 1:location.end_line]), location.start_line, None

    def check_sink(self, candidate: Candidate) -> ClaimCheck:
        location = candidate.location
        statement = f"{candidate.sink} at {location.file}:{location.start_line} is a {self.family_name} sink"
        text, first, failure = self._location_text(candidate)
        if failure:
            return ClaimCheck(claim=ClaimKind.SINK_EXISTS, statement=statement, verified=Verdict.NO,
                              evidence=failure)

        if self.family is None:
            hit = _first_hit([re.escape(candidate.sink)], text, location.file, first)
            return ClaimCheck(claim=ClaimKind.SINK_EXISTS, statement=statement,
                              verified=Verdict.YES if hit else Verdict.UNRESOLVED,
                              evidence=hit or f"no catalog entry for family {self.family_name}")

        hit = _first_hit(self.family.sinks, text, location.file, first)
        if hit is None and location.function:
            fact, failure = self._lookup(location.file, location.function)
            if fact is not None:
                code = self.facts.get_function_code(location.file, fact.qualified_name)
                hit = _first_hit(self.family.sinks, code.source, location.file, code.start_line)
        if hit:
            return ClaimCheck(claim=ClaimKind.SINK_EXISTS, statement=statement, verified=Verdict.YES, evidence=hit)
        return ClaimCheck(claim=ClaimKind.SINK_EXISTS, statement=statement, verified=Verdict.NO,
                          evidence=f"no {self.family_name} sink pattern in {location.file}:"
                                   f"{location.start_line}-{location.end_line}")

    def check_guard(self, candidate: Candidate) -> ClaimCheck:
        statement = f"no {self.family_name} guard protects the path"
        if self.family is None or not self.family.guards:
            return ClaimCheck(claim=ClaimKind.GUARD_MISSING, statement=statement, verified=Verdict.UNRESOLVED,
                              evidence=f"no guard patterns known for {self.family_name}")
        texts: List[Tuple[str, str, int]] = []
        for step in candidate.path:
            text, first = self._step_text(step)
            texts.append((step.file, text, first))
        span, first, failure = self._location_text(candidate)
        if not failure:
            texts.append((candidate.location.file, span, first))
        for file, text, first in texts:
            hit = _first_hit(self.family.guards, text, file, first)
            if hit:
                return ClaimCheck(claim=ClaimKind.GUARD_MISSING, statement=statement, verified=Verdict.NO,
                                  evidence=f"guard found: {hit}")
        return ClaimCheck(claim=ClaimKind.GUARD_MISSING, statement=statement, verified=Verdict.YES,
                          evidence=f"no guard pattern found in {len(texts)} path location(s)")

    def check_trust_boundary(self, step: Optional[PathStep]) -> ClaimCheck:
        statement = "input crosses a trust boundary before reaching the path"
        if step is None:
            return ClaimCheck(claim=ClaimKind.TRUST_BOUNDARY_CROSSED, statement=statement, verified=Verdict.NO,
                              evidence="lookup failed: no source step in the path")
        fact, failure = self._lookup(step.file, step.function)
        if failure:
            return ClaimCheck(claim=ClaimKind.TRUST_BOUNDARY_CROSSED, statement=statement, verified=Verdict.NO,
                              evidence=failure)
        entry_roles = self.catalog.entry_role_set
        for module in self.target_sem.modules:
            if step.file in module.files and tuple(module.role) in entry_roles:
                return ClaimCheck(claim=ClaimKind.TRUST_BOUNDARY_CROSSED, statement=statement,
                                  verified=Verdict.YES,
                                  evidence=f"{step.file} belongs to {module.module_id}, an entry-facing module")
        text, first = self._step_text(step)
        hit = _first_hit(self.catalog.input_patterns, text, step.file, first)
        if hit:
            return ClaimCheck(claim=ClaimKind.TRUST_BOUNDARY_CROSSED, statement=statement, verified=Verdict.YES,
                              evidence=f"input handling: {hit}")
        return ClaimCheck(claim=ClaimKind.TRUST_BOUNDARY_CROSSED, statement=statement,
                          verified=Verdict.UNRESOLVED, evidence=f"no entry role or input handling at {step.file}")

    def static_check(self, candidate: Candidate) -> List[ClaimCheck]:
        """
        Check every claim of the candidate's narrative

        Raises:
            VerificationError: the checkout cannot be read
        """
        if not self.facts.root.is_dir():
            raise VerificationError(f"Checkout {self.facts.root} is not readable")
        try:
            source = next((s for s in candidate.path if s.role == ChainRole.SOURCE), None)
            checks = [self.check_source(source)]
            for upstream, downstream in zip(candidate.path, candidate.path[1:]):
                checks.append(self.check_propagation(upstream, downstream))
            checks.append(self.check_sink(candidate))
            checks.append(self.check_guard(candidate))
            checks.append(self.check_trust_boundary(source))
        except OSError as e:
            raise VerificationError(f"Checkout {self.facts.root} could not be read: {e}")
        return checks

    def risky_dependencies(self, candidate: Candidate) -> Set[str]:
        """Catalog dependencies of the family present in the target"""
        catalog_deps = set(self.family.risky_dependencies) if self.family else self.catalog.all_risky_dependencies()
        present = set(self.target_sem.summary.key_dependencies)
        if self.facts.exists(candidate.location.file):
            present |= {m.split(".")[0] for m in self.facts.get_imports(candidate.location.file).modules}
        return present & catalog_deps


# --------------------------------------------------------------------------- classification

def gate_conclusion(checks: List[ClaimCheck], risky_dependency: bool = False) -> Optional[Conclusion]:
    """
    Deterministic gates applied before any backend call

    Any refuted claim forces non_exploitable. An unresolved attacker-facing exposure
    gives library_risk when a risky dependency or sink is present, non_exploitable otherwise.
    None means the backend decides.
    """
    refuted = [c for c in checks if c.verified == Verdict.NO]
    if refuted:
        return Conclusion(
            kind=ConclusionKind.NON_EXPLOITABLE,
            rationale="Refuted claim(s): " + "; ".join(f"{c.claim.value} ({c.evidence})" for c in refuted),
        )
    exposure = [c for c in checks
                if c.claim in (ClaimKind.SOURCE_EXISTS, ClaimKind.TRUST_BOUNDARY_CROSSED)
                and c.verified == Verdict.UNRESOLVED]
    if exposure:
        sink_present = any(c.claim == ClaimKind.SINK_EXISTS and c.verified == Verdict.YES for c in checks)
        if risky_dependency or sink_present:
            return Conclusion(kind=ConclusionKind.LIBRARY_RISK,
                              rationale="Risky sink or dependency present without a resolved attacker-facing path")
        return Conclusion(kind=ConclusionKind.NON_EXPLOITABLE,
                          rationale="No attacker-controlled source could be established")
    return None


def cap_conclusion(kind: ConclusionKind, rationale: str, preconditions: List[str],
                   checks: List[ClaimCheck], default_precondition: str) -> Conclusion:
    """Keep unresolved claims explicit: any unresolved claim caps the result at conditionally_exploitable"""
    unresolved = [c for c in checks if c.verified == Verdict.UNRESOLVED]
    if kind == ConclusionKind.EXPLOITABLE and unresolved:
        kind = ConclusionKind.CONDITIONALLY_EXPLOITABLE
        rationale = f"{rationale} Capped: {len(unresolved)} claim(s) unresolved.".strip()
    if kind != ConclusionKind.CONDITIONALLY_EXPLOITABLE:
        return Conclusion(kind=kind, rationale=rationale)
    merged = [p for p in preconditions if p.strip()]
    merged.extend(f"{c.statement} (unresolved)" for c in unresolved if f"{c.statement} (unresolved)" not in merged)
    return Conclusion(kind=kind, rationale=rationale, preconditions=merged or [default_precondition])


def _claims_table(checks: List[ClaimCheck]) -> str:
    return "\n".join(f"- {c.claim.value}: {c.verified.value} | {c.statement} | {c.evidence}" for c in checks)


async def classify(candidate: Candidate, checks: List[ClaimCheck], vuln_sem: VulnerabilitySemantics,
                   gateway: LLMGateway, risky_dependency: bool = False) -> Tuple[Conclusion, TokenUsage]:
    """
    One of four conclusions for a statically checked candidate

    Raises:
        SchemaViolationError: the backend reply violated its schema twice
    """
    gated = gate_conclusion(checks, risky_dependency)
    if gated is not None:
        return gated, TokenUsage()

    features = vuln_sem.features
    prompt = (
        f"Advisory {vuln_sem.advisory_id} ({features.vuln_family})\n"
        f"trigger condition: {features.trigger_condition}\n"
        f"missing guard: {features.missing_guard}\n"
        f"exploitable scenario: {features.exploitable_scenario}\n\n"
        f"Candidate {candidate.id} at {candidate.location.file}:{candidate.location.start_line}\n"
        f"path: {candidate.path_narrative}\n\n"
        f"Static claim checks:\n{_claims_table(checks)}\n\n"
        'Reply with JSON: {"kind": "exploitable" | "conditionally_exploitable", "rationale": "...", '
        '"preconditions": ["..."]}. List the input preconditions when the kind is conditionally_exploitable.'
    )
    messages = [ChatMessage(role="system", content=CLASSIFY_PROMPT), ChatMessage(role="user", content=prompt)]
    reply, usage = await gateway.complete_json(messages, "verification-classify", STAGE, ClassifyReply, retries=1)
    conclusion = cap_conclusion(
        ConclusionKind(reply.kind), reply.rationale, reply.preconditions, checks,
        default_precondition=f"attacker controls the input reaching {candidate.sink}",
    )
    return conclusion, usage


# --------------------------------------------------------------------------- PoC

def poc_outcome(result: SandboxResult) -> PocOutcome:
    if SINK_MARKER in result.output:
        return PocOutcome.REACHED_SINK
    if result.timed_out or result.exit_code != 0:
        return PocOutcome.ERROR
    return PocOutcome.BLOCKED


async def attempt_poc(candidate: Candidate, conclusion: Conclusion, sandbox: SandboxExecutor,
                      gateway: LLMGateway, facts: CodeFacts, max_attempts: int = 3,
                      log_dir: Optional[Path] = None) -> Tuple[PocRecord, TokenUsage]:
    """
    Generate and run up to max_attempts PoC scripts, stopping at the first that reaches the sink

    Errors of one attempt are fed into the next prompt.

    Raises:
        SandboxUnavailableError: the sandbox cannot run scripts
    """
    if conclusion.kind not in EXPLOIT_KINDS:
        raise ValueError(f"PoC attempts need an exploitable conclusion, got {conclusion.kind.value}")

    try:
        excerpt = facts.read_file(candidate.location.file, candidate.location.start_line,
                                  candidate.location.end_line - candidate.location.start_line + 1).source
    except AuditError:
        excerpt = "(unavailable)"

    record = PocRecord(max_attempts=max_attempts)
    usage = TokenUsage()
    feedback = ""
    for number in range(1, max_attempts + 1):
        prompt = (
            f"Attempt {number} of {max_attempts} for candidate {candidate.id}\n"
            f"path: {candidate.path_narrative}\n"
            f"sink: {candidate.sink}\n"
            f"sink code:\n{excerpt}\n"
            + (f"preconditions: {'; '.join(conclusion.preconditions)}\n" if conclusion.preconditions else "")
            + (f"\nPrevious attempt:\n{feedback}\n" if feedback else "")
            + '\nReply with JSON: {"description": "...", "script": "..."}'
        )
        messages = [ChatMessage(role="system", content=POC_PROMPT), ChatMessage(role="user", content=prompt)]
        reply, attempt_usage = await gateway.complete_json(messages, "poc-generation", STAGE, PocScriptReply,
                                                           retries=1)
        usage = usage + attempt_usage

        result = await sandbox.run(reply.script, facts.root)
        outcome = poc_outcome(result)
        log_text = f"# {reply.description}\n# outcome: {outcome.value} exit={result.exit_code}\n" \
                   f"--- script ---\n{reply.script}\n--- output ---\n{result.output}\n"
        log_path = None
        if log_dir is not None:
            log_dir.mkdir(parents=True, exist_ok=True)
            log_path = log_dir / f"{candidate.id}-attempt{number}.log"
            log_path.write_text(log_text, encoding="utf-8")
        record.attempts.append(PocAttempt(
            script_description=reply.description,
            log_digest=hashlib.sha256(log_text.encode("utf-8")).hexdigest()[:16],
            outcome=outcome,
            log_path=str(log_path) if log_path else None,
        ))
        logger.info(f"PoC attempt {number}/{max_attempts} for {candidate.id}: {outcome.value}")
        if outcome == PocOutcome.REACHED_SINK:
            break
        feedback = f"outcome {outcome.value}, exit code {result.exit_code}\n{result.output[-FEEDBACK_CHARS:]}"
    return record, usage


def apply_poc(conclusion: Conclusion, record: PocRecord) -> Conclusion:
    """Every attempt blocked downgrades to non_exploitable; otherwise the static conclusion stands"""
    if record.attempts and all(a.outcome == PocOutcome.BLOCKED for a in record.attempts):
        return Conclusion(kind=ConclusionKind.NON_EXPLOITABLE,
                          rationale=f"{conclusion.rationale} PoC blocked in all {len(record.attempts)} attempt(s).".strip())
    return conclusion


# --------------------------------------------------------------------------- orchestration

async def verify_candidate(candidate: Candidate, checker: Optional[StaticChecker], vuln_sem: VulnerabilitySemantics,
                           gateway: LLMGateway, sandbox: Optional[SandboxExecutor], config: RunConfig,
                           log_dir: Optional[Path] = None,
                           diagnostics: Optional[DiagnosticsCollector] = None) -> Tuple[Finding, TokenUsage]:
    """Static check, classification and optional PoC for one candidate"""
    if checker is None:
        return Finding(candidate=candidate, reference_advisory=vuln_sem.advisory_id, unverifiable=True,
                       error="checkout unavailable"), TokenUsage()
    try:
        checks = checker.static_check(candidate)
    except VerificationError as e:
        logger.warning(f"Candidate {candidate.id} is unverifiable: {e}")
        return Finding(candidate=candidate, reference_advisory=vuln_sem.advisory_id, unverifiable=True,
                       error=str(e)), TokenUsage()

    risky = bool(checker.risky_dependencies(candidate))
    try:
        conclusion, usage = await classify(candidate, checks, vuln_sem, gateway, risky)

        poc: Optional[PocRecord] = None
        static_only = False
        if conclusion.kind in EXPLOIT_KINDS:
            if sandbox is None:
                static_only = True
            else:
                try:
                    poc, poc_usage = await attempt_poc(candidate, conclusion, sandbox, gateway, checker.facts,
                                                       config.poc_max_attempts, log_dir)
                    usage = usage + poc_usage
                    conclusion = apply_poc(conclusion, poc)
                except SandboxUnavailableError as e:
                    static_only = True
                    if diagnostics is not None:
                        diagnostics.add("Sandbox unavailable; keeping the static conclusion",
                                        context=candidate.id, error=e)
    except BackendError as e:
        logger.warning(f"Candidate {candidate.id} is unverifiable after a backend failure: {e}")
        if diagnostics is not None:
            diagnostics.add("Backend failure during verification", context=candidate.id, error=e)
        return Finding(candidate=candidate, reference_advisory=vuln_sem.advisory_id, static_checks=checks,
                       unverifiable=True, error=f"{type(e).__name__}: {e}"), TokenUsage()

    finding = Finding(
        candidate=candidate,
        conclusion=conclusion,
        static_checks=checks,
        poc=poc,
        reference_advisory=vuln_sem.advisory_id,
        static_only=static_only,
    )
    logger.info(f"Candidate {candidate.id}: {conclusion.kind.value}" + (" (static-only)" if static_only else ""))
    return finding, usage


@log_performance(threshold=600.0)
async def verify_target(checkout: RepoCheckout, target_sem: RepositorySemantics, vuln_sem: VulnerabilitySemantics,
                        memory: InspectionMemory, gateway: LLMGateway, sandbox: Optional[SandboxExecutor],
                        store: StateStore, config: Optional[RunConfig] = None, fresh: bool = False,
                        catalog: Optional[SinkCatalog] = None) -> FindingSet:
    """
    Verify every candidate of a finished inspection; candidates run concurrently up to verify_concurrency
    """
    config = config or RunConfig()
    project, commit = checkout.key
    if store.has_findings(vuln_sem.advisory_id, project, commit) and not fresh:
        logger.info(f"Findings for {project}@{commit} already exist, skipping verification")
        return store.load_findings(vuln_sem.advisory_id, project, commit)

    logger.info(f"=== Verifying {len(memory.candidates)} candidate(s) on {project}@{commit} ===")
    diagnostics = DiagnosticsCollector(STAGE)
    checker: Optional[StaticChecker] = None
    try:
        checker = StaticChecker(CodeFacts(checkout), target_sem, vuln_sem, catalog)
    except CheckoutError as e:
        diagnostics.add("Checkout unreadable; every candidate is unverifiable", error=e)

    log_dir = store.poc_dir(vuln_sem.advisory_id, project, commit)
    semaphore = asyncio.Semaphore(config.verify_concurrency)

    async def run_one(candidate: Candidate) -> Tuple[Finding, TokenUsage]:
        async with semaphore:
            return await verify_candidate(candidate, checker, vuln_sem, gateway, sandbox, config,
                                          log_dir, diagnostics)

    results = await asyncio.gather(*(run_one(c) for c in memory.candidates))
    usage = TokenUsage()
    for _, candidate_usage in results:
        usage = usage + candidate_usage

    finding_set = FindingSet(
        advisory_id=vuln_sem.advisory_id,
        project=project,
        commit=commit,
        findings=[finding for finding, _ in results],
        sandbox_mode=sandbox.mode if sandbox is not None else "off",
        token_usage=usage,
        diagnostics=diagnostics.entries,
    )
    store.save_findings(finding_set)
    return finding_set
