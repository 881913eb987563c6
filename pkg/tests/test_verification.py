"""
Static claim checks, conclusion gates, PoC attempts and target verification
"""
import random
import shutil

import pytest

from refaudit.config import RunConfig
from refaudit.models.inspection import Candidate, CandidateLocation, InspectionMemory, PathStep, PriorityPartition
from refaudit.models.schemas import ChainRole, RepoCheckout
from refaudit.models.verification import (
    EXPLOIT_KINDS,
    ClaimCheck,
    ClaimKind,
    Conclusion,
    ConclusionKind,
    Finding,
    PocOutcome,
    SandboxResult,
    Verdict,
)
from refaudit.services.code_facts import CodeFacts
from refaudit.services.inspection import inspect_target
from refaudit.services.sandbox import FakeSandbox
from refaudit.services.verification import (
    SINK_MARKER,
    StaticChecker,
    attempt_poc,
    cap_conclusion,
    classify,
    gate_conclusion,
    poc_outcome,
    verify_candidate,
    verify_target,
)
from refaudit.utils.error_handler import VerificationError

from conftest import json_reply, make_gateway

CONFIG = RunConfig(sandbox_mode="fake")
POC_ENTRY = {"prompt_id": "poc-generation", "replies": [json_reply({
    "description": "patch torch.load and call main", "script": "print('sink check')"})]}
CLASSIFY_ENTRY = {"prompt_id": "verification-classify", "replies": [json_reply({
    "kind": "exploitable", "rationale": "path reaches the sink", "preconditions": []})]}


def variant(file: str = "scripts/convert.py", function: str = "main", source_file: str = "app/webui/launch_page.py",
            source_function: str = "on_submit", candidate_id: str = "C001") -> Candidate:
    return Candidate(
        id=candidate_id,
        location=CandidateLocation(file=file, start_line=7, end_line=7, function=function),
        path=[
            PathStep(role=ChainRole.SOURCE, file=source_file, function=source_function),
            PathStep(role=ChainRole.PROPAGATION, file="app/loading/runner.py", function="run_conversion"),
            PathStep(role=ChainRole.SINK, file=file, function=function),
        ],
        sink="torch.load",
        reference_advisory="ADV-2024-0001",
    )


@pytest.fixture
def checker(target_checkout, target_semantics, vuln_semantics) -> StaticChecker:
    return StaticChecker(CodeFacts(target_checkout), target_semantics, vuln_semantics)


async def test_vulnerable_candidate_passes_every_claim(checker):
    checks = checker.static_check(variant())
    assert [c.claim for c in checks] == [
        ClaimKind.SOURCE_EXISTS, ClaimKind.PROPAGATION_EXISTS, ClaimKind.PROPAGATION_EXISTS,
        ClaimKind.SINK_EXISTS, ClaimKind.GUARD_MISSING, ClaimKind.TRUST_BOUNDARY_CROSSED,
    ]
    assert all(c.verified == Verdict.YES for c in checks), [(c.claim, c.evidence) for c in checks]
    assert "scripts/convert.py:7" in checks[3].evidence
    assert "torch" in checker.risky_dependencies(variant())


async def test_guarded_sink_refutes_the_guard_claim(patched_root, target_semantics, vuln_semantics):
    patched = StaticChecker(CodeFacts(RepoCheckout.open(patched_root, "target_app", "v3")),
                            target_semantics, vuln_semantics)
    checks = patched.static_check(variant())
    guard = next(c for c in checks if c.claim == ClaimKind.GUARD_MISSING)
    assert guard.verified == Verdict.NO
    assert "weights_only=True" in guard.evidence

    conclusion, usage = await classify(variant(), checks, vuln_semantics, make_gateway())
    assert conclusion.kind == ConclusionKind.NON_EXPLOITABLE
    assert usage.input_tokens == 0


async def test_hallucinated_locations_are_refuted(checker, vuln_semantics):
    rng = random.Random(99)
    gateway = make_gateway()
    for n in range(100):
        ghost = rng.choice(["file", "function", "sink_file"])
        if ghost == "file":
            candidate = variant(source_file=f"app/ghost_{n}.py")
        elif ghost == "function":
            candidate = variant(source_function=f"ghost_handler_{n}")
        else:
            candidate = variant(file=f"scripts/ghost_{n}.py", function="main")
        checks = checker.static_check(candidate)
        refuted = [c for c in checks if c.verified == Verdict.NO]
        assert refuted, f"case {n}"
        assert any(c.evidence.startswith("lookup failed") for c in refuted)
        conclusion, _ = await classify(candidate, checks, vuln_semantics, gateway)
        assert conclusion.kind == ConclusionKind.NON_EXPLOITABLE


def random_checks(rng: random.Random):
    kinds = [ClaimKind.SOURCE_EXISTS] + [ClaimKind.PROPAGATION_EXISTS] * rng.randint(1, 3) + [
        ClaimKind.SINK_EXISTS, ClaimKind.GUARD_MISSING, ClaimKind.TRUST_BOUNDARY_CROSSED]
    weights = [0.7, 0.1, 0.2]
    return [ClaimCheck(claim=kind, statement=f"claim {i}", evidence="e",
                       verified=rng.choices([Verdict.YES, Verdict.NO, Verdict.UNRESOLVED], weights)[0])
            for i, kind in enumerate(kinds)]


def test_gates_and_caps_over_random_claim_tables():
    rng = random.Random(1234)
    for case in range(10000):
        checks = random_checks(rng)
        risky = rng.random() < 0.5
        backend_kind = rng.choice(list(EXPLOIT_KINDS))
        preconditions = rng.choice([[], ["input is a path"]])

        gated = gate_conclusion(checks, risky)
        if gated is None:
            conclusion = cap_conclusion(backend_kind, "backend", preconditions, checks, "attacker controls input")
        else:
            conclusion = gated

        states = [c.verified for c in checks]
        exposure_unresolved = any(c.verified == Verdict.UNRESOLVED for c in checks
                                  if c.claim in (ClaimKind.SOURCE_EXISTS, ClaimKind.TRUST_BOUNDARY_CROSSED))
        sink_yes = any(c.claim == ClaimKind.SINK_EXISTS and c.verified == Verdict.YES for c in checks)

        if Verdict.NO in states:
            assert conclusion.kind == ConclusionKind.NON_EXPLOITABLE, case
        elif exposure_unresolved:
            expected = ConclusionKind.LIBRARY_RISK if (risky or sink_yes) else ConclusionKind.NON_EXPLOITABLE
            assert conclusion.kind == expected, case
        elif Verdict.UNRESOLVED in states:
            assert conclusion.kind == ConclusionKind.CONDITIONALLY_EXPLOITABLE, case
            assert conclusion.preconditions, case
        else:
            assert conclusion.kind == backend_kind, case

        if conclusion.kind == ConclusionKind.CONDITIONALLY_EXPLOITABLE:
            assert conclusion.preconditions
        else:
            assert conclusion.preconditions == []
        # a consistent finding can always be built from the outcome
        Finding(candidate=variant(), conclusion=conclusion, static_checks=checks,
                reference_advisory="ADV-2024-0001")


def test_conditional_conclusions_need_preconditions():
    with pytest.raises(ValueError):
        Conclusion(kind=ConclusionKind.CONDITIONALLY_EXPLOITABLE)
    with pytest.raises(ValueError):
        Conclusion(kind=ConclusionKind.EXPLOITABLE, preconditions=["x"])


def test_poc_outcomes():
    assert poc_outcome(SandboxResult(output=f"noise\n{SINK_MARKER}\n", exit_code=1)) == PocOutcome.REACHED_SINK
    assert poc_outcome(SandboxResult(exit_code=2, output="Traceback")) == PocOutcome.ERROR
    assert poc_outcome(SandboxResult(timed_out=True, exit_code=124)) == PocOutcome.ERROR
    assert poc_outcome(SandboxResult(exit_code=0, output="done")) == PocOutcome.BLOCKED


async def test_failed_attempts_feed_the_next_prompt(checker, tmp_path):
    sandbox = FakeSandbox([
        SandboxResult(exit_code=1, output="ModuleNotFoundError: No module named 'torch'"),
        SandboxResult(exit_code=0, output=f"{SINK_MARKER}\n"),
    ])
    gateway = make_gateway(POC_ENTRY)
    conclusion = Conclusion(kind=ConclusionKind.EXPLOITABLE)
    record, _ = await attempt_poc(variant(), conclusion, sandbox, gateway, checker.facts, 3, tmp_path / "poc")

    assert [a.outcome for a in record.attempts] == [PocOutcome.ERROR, PocOutcome.REACHED_SINK]
    assert len(sandbox.scripts) == 2
    second_prompt = gateway.primary.calls[-1][1]
    assert "ModuleNotFoundError" in second_prompt
    assert (tmp_path / "poc" / "C001-attempt2.log").exists()


async def test_blocked_attempts_downgrade_to_non_exploitable(checker, vuln_semantics):
    sandbox = FakeSandbox([SandboxResult(exit_code=0, output="handled safely")])
    gateway = make_gateway(POC_ENTRY, CLASSIFY_ENTRY)
    finding, _ = await verify_candidate(variant(), checker, vuln_semantics, gateway, sandbox, CONFIG)
    assert [a.outcome for a in finding.poc.attempts] == [PocOutcome.BLOCKED] * 3
    assert finding.conclusion.kind == ConclusionKind.NON_EXPLOITABLE


async def test_sandbox_off_keeps_a_static_only_conclusion(checker, vuln_semantics):
    gateway = make_gateway(CLASSIFY_ENTRY)
    finding, _ = await verify_candidate(variant(), checker, vuln_semantics, gateway, None, CONFIG)
    assert finding.conclusion.kind == ConclusionKind.EXPLOITABLE
    assert finding.static_only
    assert finding.poc is None


async def test_unreadable_checkout_makes_findings_unverifiable(tmp_path, target_semantics, vuln_semantics):
    root = tmp_path / "gone"
    shutil.copytree(target_semantics.checkout.root_path, root)
    checker = StaticChecker(CodeFacts(RepoCheckout.open(root, "target_app", "v2")), target_semantics, vuln_semantics)
    shutil.rmtree(root)
    with pytest.raises(VerificationError):
        checker.static_check(variant())

    finding, _ = await verify_candidate(variant(), checker, vuln_semantics, make_gateway(), None, CONFIG)
    assert finding.unverifiable and finding.conclusion is None

    finding, _ = await verify_candidate(variant(), None, vuln_semantics, make_gateway(), None, CONFIG)
    assert finding.unverifiable


async def test_verify_target_confirms_the_reported_variant(target_checkout, target_semantics, vuln_semantics,
                                                          pipeline_gateway, pipeline_fixture, embedder, store):
    memory = await inspect_target(target_checkout, target_semantics, vuln_semantics, pipeline_gateway,
                                  embedder, store)
    sandbox = FakeSandbox(pipeline_fixture.sandbox)
    findings = await verify_target(target_checkout, target_semantics, vuln_semantics, memory,
                                   pipeline_gateway, sandbox, store, CONFIG)
    [finding] = findings.findings
    assert finding.conclusion.kind == ConclusionKind.EXPLOITABLE
    assert finding.poc.reached_sink
    assert findings.sandbox_mode == "fake"
    assert store.has_findings("ADV-2024-0001", "target_app", "v2")

    cached = await verify_target(target_checkout, target_semantics, vuln_semantics, memory,
                                 make_gateway(), FakeSandbox(), store, CONFIG)
    assert cached.model_dump() == findings.model_dump()


async def test_one_failing_candidate_does_not_sink_the_target(target_checkout, target_semantics, vuln_semantics,
                                                             store):
    memory = InspectionMemory(advisory_id="ADV-2024-0001", project="target_app", commit="v2",
                              priorities=PriorityPartition(), finished=True,
                              candidates=[variant(), variant(candidate_id="C002")])
    gateway = make_gateway(
        {"prompt_id": "verification-classify", "contains": "Candidate C002", "replies": [{"content": "not json"}]},
        {"prompt_id": "verification-classify", "contains": "did not follow", "replies": [{"content": "still not json"}]},
        CLASSIFY_ENTRY,
    )
    findings = await verify_target(target_checkout, target_semantics, vuln_semantics, memory,
                                   gateway, None, store, CONFIG)

    first, second = findings.findings
    assert first.conclusion.kind == ConclusionKind.EXPLOITABLE and first.static_only
    assert second.unverifiable and second.conclusion is None
    assert second.error.startswith("SchemaViolationError")
    assert any(d.context == "C002" for d in findings.diagnostics)
    assert store.has_findings("ADV-2024-0001", "target_app", "v2")
