"""
Reporting service
Per-target and consolidated report documents, rendered text and SARIF export
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from refaudit.models.inspection import InspectionMemory
from refaudit.models.llm import LedgerSnapshot
from refaudit.models.schemas import RepositorySemantics, TokenUsage
from refaudit.models.verification import (
    ClaimRow,
    ConclusionKind,
    ConsolidatedReport,
    Finding,
    FindingReport,
    FindingSet,
    TargetReport,
)
from refaudit.services.sarif import export_sarif
from refaudit.services.state_store import StateStore, safe_component, write_atomic, write_document
from refaudit.utils.error_handler import AuditError

logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("profiling", "vuln-extraction", "selection", "inspection", "verification")


def empty_counts() -> Dict[str, int]:
    counts = {kind.value: 0 for kind in ConclusionKind}
    counts["unverifiable"] = 0
    return counts


def count_findings(findings: List[Finding]) -> Dict[str, int]:
    """Findings per conclusion kind; unverifiable ones are counted apart"""
    counts = empty_counts()
    for finding in findings:
        if finding.unverifiable or finding.conclusion is None:
            counts["unverifiable"] += 1
        else:
            counts[finding.conclusion.kind.value] += 1
    return counts


def _finding_report(finding: Finding) -> FindingReport:
    location = finding.candidate.location
    conclusion = finding.conclusion
    return FindingReport(
        candidate_id=finding.candidate.id,
        location=f"{location.file}:{location.start_line}-{location.end_line}",
        function=location.function,
        path_narrative=finding.candidate.path_narrative,
        conclusion=conclusion.kind.value,
        rationale=conclusion.rationale,
        preconditions=list(conclusion.preconditions),
        claims=[ClaimRow(claim=c.claim.value, verified=c.verified.value, evidence=c.evidence)
                for c in finding.static_checks],
        poc_digests=[a.log_digest for a in finding.poc.attempts] if finding.poc else [],
        poc_outcomes=[a.outcome.value for a in finding.poc.attempts] if finding.poc else [],
        static_only=finding.static_only,
    )


def ledger_from_usage(usages: Dict[str, TokenUsage]) -> LedgerSnapshot:
    return LedgerSnapshot(stages={stage: usage for stage, usage in usages.items()
                                  if usage.input_tokens or usage.output_tokens})


def assemble_report(advisory_id: str, project: str, commit: str, stages: Dict[str, str],
                    memory: Optional[InspectionMemory] = None, finding_set: Optional[FindingSet] = None,
                    profile: Optional[RepositorySemantics] = None) -> TargetReport:
    """
    Report document for one (advisory, target revision)

    Args:
        stages: stage name -> "done" | "missing"
        memory: final inspection memory, for coverage and the clean-scan flag
        finding_set: verification output
        profile: target repository semantics, for profiling token usage
    """
    findings = finding_set.findings if finding_set else []
    usages: Dict[str, TokenUsage] = {}
    if profile is not None:
        usages["profiling"] = profile.token_usage
    if memory is not None:
        usages["inspection"] = memory.token_usage
    if finding_set is not None:
        usages["verification"] = finding_set.token_usage

    static_only = finding_set is not None and (
        finding_set.sandbox_mode == "off" or any(f.static_only for f in findings))
    return TargetReport(
        advisory_id=advisory_id,
        project=project,
        commit=commit,
        stages=stages,
        clean_scan=memory is not None and memory.finished and not memory.candidates,
        static_only=static_only,
        coverage=memory.coverage() if memory else {},
        iterations=memory.iteration_count if memory else 0,
        counts=count_findings(findings),
        findings=[_finding_report(f) for f in findings if not f.unverifiable and f.conclusion is not None],
        unverifiable=[f.candidate.id for f in findings if f.unverifiable or f.conclusion is None],
        token_ledger=ledger_from_usage(usages),
    )


def render_markdown(report: TargetReport) -> str:
    """Rendered text of a target report"""
    lines = [f"# {report.advisory_id} on {report.project}@{report.commit}", ""]
    if report.static_only:
        lines += ["**STATIC-ONLY: no proof-of-concept was executed for this target.**", ""]
    missing = [stage for stage, state in report.stages.items() if state == "missing"]
    if missing:
        lines += [f"Missing stages: {', '.join(missing)}", ""]

    coverage = ", ".join(f"{tier}: {v['completed']}/{v['total']}" for tier, v in report.coverage.items())
    lines.append(f"Inspection iterations: {report.iterations}; coverage {coverage or 'n/a'}")
    lines.append("Counts: " + ", ".join(f"{kind} {n}" for kind, n in report.counts.items()))
    lines.append("")
    if report.clean_scan:
        lines += ["Clean scan: no candidate was reported.", ""]

    for finding in report.findings:
        lines.append(f"## {finding.candidate_id}: {finding.conclusion}")
        lines.append(f"- location: {finding.location}" + (f" ({finding.function})" if finding.function else ""))
        lines.append(f"- path: {finding.path_narrative}")
        if finding.rationale:
            lines.append(f"- rationale: {finding.rationale}")
        for precondition in finding.preconditions:
            lines.append(f"- precondition: {precondition}")
        if finding.static_only:
            lines.append("- static-only")
        lines += ["", "| claim | verified | evidence |", "| --- | --- | --- |"]
        for row in finding.claims:
            evidence = row.evidence.replace("|", "\\|")
            lines.append(f"| {row.claim} | {row.verified} | {evidence} |")
        if finding.poc_digests:
            lines.append("")
            for number, (digest, outcome) in enumerate(zip(finding.poc_digests, finding.poc_outcomes), start=1):
                lines.append(f"- PoC attempt {number}: {outcome} (log {digest})")
        lines.append("")

    if report.unverifiable:
        lines += [f"Unverifiable candidates: {', '.join(report.unverifiable)}", ""]
    lines += _ledger_lines(report.token_ledger)
    return "\n".join(lines).rstrip() + "\n"


def _ledger_lines(ledger: LedgerSnapshot) -> List[str]:
    lines = ["## Token usage", "", "| stage | input | output |", "| --- | --- | --- |"]
    for stage in PIPELINE_STAGES:
        if stage in ledger.stages:
            usage = ledger.stages[stage]
            lines.append(f"| {stage} | {usage.input_tokens} | {usage.output_tokens} |")
    total = ledger.total
    lines.append(f"| total | {total.input_tokens} | {total.output_tokens} |")
    return lines


def render_consolidated(report: ConsolidatedReport) -> str:
    lines = [f"# Consolidated report for {report.advisory_id}", ""]
    if report.reference_project:
        lines.append(f"Reference: {report.reference_project}@{report.reference_commit}")
    missing = [stage for stage, state in report.stages.items() if state == "missing"]
    if missing:
        lines.append(f"Missing stages: {', '.join(missing)}")
    lines.append("Counts: " + ", ".join(f"{kind} {n}" for kind, n in report.counts.items()))
    lines.append("")
    for target in report.targets:
        flags = []
        if target.static_only:
            flags.append("static-only")
        if target.clean_scan:
            flags.append("clean scan")
        missing = [stage for stage, state in target.stages.items() if state == "missing"]
        if missing:
            flags.append(f"missing {', '.join(missing)}")
        lines.append(f"## {target.project}@{target.commit}" + (f" ({'; '.join(flags)})" if flags else ""))
        lines.append("Counts: " + ", ".join(f"{kind} {n}" for kind, n in target.counts.items()))
        for finding in target.findings:
            lines.append(f"- {finding.candidate_id} {finding.conclusion} at {finding.location}")
        lines.append("")
    lines += _ledger_lines(report.token_ledger)
    return "\n".join(lines).rstrip() + "\n"


# --------------------------------------------------------------------------- store-backed assembly

def _load_or_none(loader, *args):
    try:
        return loader(*args)
    except AuditError as e:
        logger.debug(f"Artifact unavailable: {e}")
        return None


def target_stages(store: StateStore, advisory_id: str, project: str, commit: str) -> Dict[str, str]:
    memory_done = False
    if store.has_memory(advisory_id, project, commit):
        memory = _load_or_none(store.load_memory, advisory_id, project, commit)
        memory_done = memory is not None and memory.finished
    return {
        "profiling": "done" if store.has_semantics(project, commit) else "missing",
        "inspection": "done" if memory_done else "missing",
        "verification": "done" if store.has_findings(advisory_id, project, commit) else "missing",
    }


def build_target_report(store: StateStore, advisory_id: str, project: str, commit: str) -> TargetReport:
    return assemble_report(
        advisory_id, project, commit,
        stages=target_stages(store, advisory_id, project, commit),
        memory=_load_or_none(store.load_memory, advisory_id, project, commit),
        finding_set=_load_or_none(store.load_findings, advisory_id, project, commit),
        profile=_load_or_none(store.load_semantics, project, commit),
    )


def write_target_report(store: StateStore, report: TargetReport,
                        finding_set: Optional[FindingSet] = None) -> Tuple[Path, Path]:
    """Persist the JSON document, its rendered text and, when findings exist, a SARIF export"""
    base = store.report_dir(report.advisory_id) / safe_component(report.project) / safe_component(report.commit)
    json_path = base / "report.json"
    text_path = base / "report.md"
    write_document(json_path, report)
    write_atomic(text_path, render_markdown(report))
    if finding_set is not None:
        write_atomic(base / "findings.sarif", json.dumps(export_sarif(finding_set.findings), indent=2))
    logger.info(f"Report written to {json_path}")
    return json_path, text_path


def build_consolidated_report(store: StateStore, advisory_id: str) -> ConsolidatedReport:
    """
    Cross-target report over every selected revision, marking missing stages
    """
    logger.info(f"=== Building report for {advisory_id} ===")
    vuln = _load_or_none(store.load_vuln, advisory_id)
    selection = _load_or_none(store.load_selection, advisory_id)
    stages = {
        "profiling": "missing",
        "vuln-extraction": "done" if vuln is not None else "missing",
        "selection": "done" if selection is not None else "missing",
        "inspection": "missing",
        "verification": "missing",
    }

    usages: Dict[str, TokenUsage] = {}

    def add(stage: str, usage: TokenUsage):
        usages[stage] = usages.get(stage, TokenUsage()) + usage

    if vuln is not None:
        add("vuln-extraction", vuln.token_usage)
        reference = _load_or_none(store.load_semantics, vuln.reference_project, vuln.reference_commit)
        if reference is not None:
            stages["profiling"] = "done"
            add("profiling", reference.token_usage)
    if selection is not None:
        add("selection", selection.token_usage)

    targets: List[TargetReport] = []
    for project, commit in (selection.targets() if selection else []):
        report = build_target_report(store, advisory_id, project, commit)
        targets.append(report)
        for stage, usage in report.token_ledger.stages.items():
            add(stage, usage)

    if targets:
        for stage in ("inspection", "verification"):
            stages[stage] = "done" if all(t.stages.get(stage) == "done" for t in targets) else "missing"
        if any(t.stages.get("profiling") == "missing" for t in targets):
            stages["profiling"] = "missing"

    counts = empty_counts()
    for target in targets:
        for kind, n in target.counts.items():
            counts[kind] = counts.get(kind, 0) + n

    return ConsolidatedReport(
        advisory_id=advisory_id,
        reference_project=vuln.reference_project if vuln else None,
        reference_commit=vuln.reference_commit if vuln else None,
        stages=stages,
        targets=targets,
        counts=counts,
        token_ledger=ledger_from_usage(usages),
    )


def write_consolidated_report(store: StateStore, report: ConsolidatedReport) -> Tuple[Path, Path]:
    base = store.report_dir(report.advisory_id)
    json_path = base / "consolidated.json"
    text_path = base / "consolidated.md"
    write_document(json_path, report)
    write_atomic(text_path, render_consolidated(report))

    findings: List[Finding] = []
    for target in report.targets:
        finding_set = _load_or_none(store.load_findings, report.advisory_id, target.project, target.commit)
        if finding_set is not None:
            findings.extend(finding_set.findings)
    write_atomic(base / "consolidated.sarif", json.dumps(export_sarif(findings), indent=2))
    logger.info(f"Consolidated report written to {json_path}")
    return json_path, text_path
