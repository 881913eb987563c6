"""
Report assembly and rendering
"""
import json

from refaudit.models.inspection import Candidate, CandidateLocation, PathStep
from refaudit.models.schemas import ChainRole, TokenUsage
from refaudit.models.verification import (
    ClaimCheck,
    ClaimKind,
    Conclusion,
    ConclusionKind,
    Finding,
    FindingSet,
    Verdict,
)
from refaudit.services.reporting import (
    assemble_report,
    build_consolidated_report,
    build_target_report,
    render_markdown,
    write_target_report,
)


def finding(candidate_id: str, kind=None, unverifiable: bool = False, static_only: bool = False) -> Finding:
    candidate = Candidate(
        id=candidate_id,
        location=CandidateLocation(file="scripts/convert.py", start_line=7, end_line=7, function="main"),
        path=[PathStep(role=ChainRole.SOURCE, file="app/webui/launch_page.py", function="on_submit"),
              PathStep(role=ChainRole.SINK, file="scripts/convert.py", function="main")],
        sink="torch.load",
        reference_advisory="ADV-1",
    )
    if unverifiable:
        return Finding(candidate=candidate, reference_advisory="ADV-1", unverifiable=True, error="gone")
    preconditions = ["path | comes from the UI"] if kind == ConclusionKind.CONDITIONALLY_EXPLOITABLE else []
    checks = [ClaimCheck(claim=ClaimKind.SINK_EXISTS, statement="sink", verified=Verdict.YES,
                         evidence="scripts/convert.py:7: torch.load(a | b)")]
    return Finding(candidate=candidate, reference_advisory="ADV-1", static_checks=checks, static_only=static_only,
                   conclusion=Conclusion(kind=kind, rationale="checked", preconditions=preconditions))


def finding_set() -> FindingSet:
    return FindingSet(
        advisory_id="ADV-1", project="target_app", commit="v2", sandbox_mode="fake",
        token_usage=TokenUsage(input_tokens=100, output_tokens=10),
        findings=[
            finding("C001", ConclusionKind.EXPLOITABLE),
            finding("C002", ConclusionKind.CONDITIONALLY_EXPLOITABLE, static_only=True),
            finding("C003", ConclusionKind.NON_EXPLOITABLE),
            finding("C004", unverifiable=True),
        ],
    )


def test_counts_agree_between_document_and_text():
    report = assemble_report("ADV-1", "target_app", "v2", {"profiling": "done", "inspection": "done",
                                                           "verification": "done"}, finding_set=finding_set())
    assert report.counts == {"exploitable": 1, "conditionally_exploitable": 1, "library_risk": 0,
                             "non_exploitable": 1, "unverifiable": 1}
    assert report.unverifiable == ["C004"]
    assert report.static_only

    text = render_markdown(report)
    assert "Counts: exploitable 1, conditionally_exploitable 1, library_risk 0, non_exploitable 1, unverifiable 1" in text
    assert "STATIC-ONLY" in text
    assert "- precondition: path | comes from the UI" in text
    assert "torch.load(a \\| b)" in text
    assert "| verification | 100 | 10 |" in text


def test_missing_stages_are_listed():
    report = assemble_report("ADV-1", "target_app", "v2", {"profiling": "done", "inspection": "missing",
                                                           "verification": "missing"})
    text = render_markdown(report)
    assert "Missing stages: inspection, verification" in text
    assert not report.clean_scan


def test_store_backed_reports(store):
    findings = finding_set()
    store.save_findings(findings)
    report = build_target_report(store, "ADV-1", "target_app", "v2")
    assert report.stages == {"profiling": "missing", "inspection": "missing", "verification": "done"}

    json_path, text_path = write_target_report(store, report, findings)
    assert json.loads(json_path.read_text())["counts"]["exploitable"] == 1
    assert text_path.read_text().startswith("# ADV-1 on target_app@v2")
    sarif = json.loads((json_path.parent / "findings.sarif").read_text())
    assert len(sarif["runs"][0]["results"]) == 3


def test_consolidated_report_without_artifacts(store):
    report = build_consolidated_report(store, "ADV-404")
    assert set(report.stages.values()) == {"missing"}
    assert report.targets == []
    assert sum(report.counts.values()) == 0
