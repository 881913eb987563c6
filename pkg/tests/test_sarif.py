"""
SARIF ingestion and export
"""
import json

import pytest

from refaudit.models.inspection import Candidate, CandidateLocation, PathStep
from refaudit.models.schemas import ChainRole
from refaudit.models.verification import Conclusion, ConclusionKind, Finding
from refaudit.services.sarif import export_sarif, ingest_sarif, parse_sarif
from refaudit.utils.error_handler import SarifFormatError


def sarif_document(uri: str = "app/loading/runner.py", line: int = 6):
    return {
        "version": "2.1.0",
        "runs": [{
            "tool": {"driver": {"name": "scanner"}},
            "results": [{
                "ruleId": "py/command-line-injection",
                "message": {"text": "Command built from user input"},
                "locations": [{"physicalLocation": {
                    "artifactLocation": {"uri": uri},
                    "region": {"startLine": line},
                }}],
            }],
        }],
    }


def candidate(candidate_id: str = "C001") -> Candidate:
    return Candidate(
        id=candidate_id,
        location=CandidateLocation(file="scripts/convert.py", start_line=7, end_line=7, function="main"),
        path=[
            PathStep(role=ChainRole.SOURCE, file="app/webui/launch_page.py", function="on_submit"),
            PathStep(role=ChainRole.SINK, file="scripts/convert.py", function="main"),
        ],
        sink="torch.load",
        reference_advisory="ADV-2024-0001",
    )


def test_parse_normalizes_uris(target_checkout):
    absolute = f"file://{target_checkout.root_path.resolve().as_posix()}/app/loading/runner.py"
    for uri in ("app/loading/runner.py", "./app/loading/runner.py", absolute):
        [entry] = parse_sarif(sarif_document(uri), target_checkout)
        assert entry.file == "app/loading/runner.py"
        assert entry.line == 6
        assert entry.rule_id == "py/command-line-injection"


def test_malformed_documents_name_the_member():
    document = sarif_document()
    del document["runs"][0]["results"][0]["message"]
    with pytest.raises(SarifFormatError) as excinfo:
        parse_sarif(document)
    assert excinfo.value.member == "runs[0].results[0].message"

    with pytest.raises(SarifFormatError) as excinfo:
        parse_sarif({"version": "1.0.0", "runs": []})
    assert excinfo.value.member == "version"


def test_ingest_rejects_invalid_json(tmp_path):
    path = tmp_path / "bad.sarif"
    path.write_text("{not json")
    with pytest.raises(SarifFormatError):
        ingest_sarif(path)


def test_export_uses_advisory_and_conclusion_rule_ids():
    findings = [
        Finding(candidate=candidate("C001"), reference_advisory="ADV-2024-0001",
                conclusion=Conclusion(kind=ConclusionKind.LIBRARY_RISK, rationale="sink present")),
        Finding(candidate=candidate("C002"), reference_advisory="ADV-2024-0001", unverifiable=True,
                error="checkout unavailable"),
    ]
    document = export_sarif(findings)
    results = document["runs"][0]["results"]
    assert len(results) == 1
    assert results[0]["ruleId"] == "ADV-2024-0001/library_risk"
    assert results[0]["level"] == "note"
    assert results[0]["properties"]["candidateId"] == "C001"

    reparsed = parse_sarif(json.loads(json.dumps(document)))
    assert [(r.file, r.line) for r in reparsed] == [("scripts/convert.py", 7)]
