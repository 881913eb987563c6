"""
SARIF service
Ingest SARIF 2.1.0 scanner results and export verified findings
"""
import json
import logging
from pathlib import Path, PurePosixPath
from typing import Any, Dict, List, Optional
from urllib.parse import unquote, urlparse

from refaudit import __version__
from refaudit.models.schemas import RepoCheckout, SarifResult
from refaudit.models.verification import ConclusionKind, Finding
from refaudit.utils.error_handler import SarifFormatError

logger = logging.getLogger(__name__)

SARIF_VERSION = "2.1.0"
SARIF_SCHEMA = "https://json.schemastore.org/sarif-2.1.0.json"

# Conclusion kind to SARIF level
CONCLUSION_TO_LEVEL = {
    ConclusionKind.EXPLOITABLE: "error",
    ConclusionKind.CONDITIONALLY_EXPLOITABLE: "warning",
    ConclusionKind.LIBRARY_RISK: "note",
    ConclusionKind.NON_EXPLOITABLE: "none",
}


def _require(condition: bool, member: str, message: str):
    if not condition:
        raise SarifFormatError(member, message)


def normalize_uri(uri: str, checkout: Optional[RepoCheckout] = None) -> str:
    """Turn a SARIF artifact URI into a repo-relative posix path"""
    if uri.startswith("file:"):
        uri = unquote(urlparse(uri).path)
    path = uri.replace("\\", "/")

    if checkout is not None and path.startswith("/"):
        root = Path(checkout.root_path).resolve().as_posix().rstrip("/") + "/"
        if path.startswith(root):
            path = path[len(root):]

    while path.startswith("./"):
        path = path[2:]
    return PurePosixPath(path).as_posix().lstrip("/") if path else path


def parse_sarif(document: Any, checkout: Optional[RepoCheckout] = None) -> List[SarifResult]:
    """
    Parse a decoded SARIF document

    Args:
        document: Decoded JSON document
        checkout: Optional checkout used to strip absolute location prefixes

    Returns:
        One SarifResult per result, in document order
    """
    _require(isinstance(document, dict), "$", "document must be an object")
    version = document.get("version")
    _require(version == SARIF_VERSION, "version", f"unsupported SARIF version {version!r}")
    runs = document.get("runs")
    _require(isinstance(runs, list), "runs", "must be an array")

    entries: List[SarifResult] = []
    for run_index, run in enumerate(runs):
        run_path = f"runs[{run_index}]"
        _require(isinstance(run, dict), run_path, "must be an object")
        results = run.get("results", [])
        _require(isinstance(results, list), f"{run_path}.results", "must be an array")

        for result_index, result in enumerate(results):
            path = f"{run_path}.results[{result_index}]"
            _require(isinstance(result, dict), path, "must be an object")

            rule_id = result.get("ruleId")
            if rule_id is None and isinstance(result.get("rule"), dict):
                rule_id = result["rule"].get("id")
            _require(isinstance(rule_id, str) and rule_id != "", f"{path}.ruleId", "missing rule id")

            message = result.get("message")
            _require(isinstance(message, dict), f"{path}.message", "must be an object")
            text = message.get("text", message.get("markdown"))
            _require(isinstance(text, str), f"{path}.message.text", "missing message text")

            locations = result.get("locations")
            _require(isinstance(locations, list) and locations, f"{path}.locations", "must be a non-empty array")
            physical = locations[0].get("physicalLocation") if isinstance(locations[0], dict) else None
            _require(isinstance(physical, dict), f"{path}.locations[0].physicalLocation", "must be an object")
            artifact = physical.get("artifactLocation")
            _require(isinstance(artifact, dict) and isinstance(artifact.get("uri"), str),
                     f"{path}.locations[0].physicalLocation.artifactLocation.uri", "missing uri")
            region = physical.get("region", {})
            _require(isinstance(region, dict), f"{path}.locations[0].physicalLocation.region", "must be an object")
            line = region.get("startLine", 1)
            _require(isinstance(line, int) and line >= 1,
                     f"{path}.locations[0].physicalLocation.region.startLine", "must be a positive integer")

            entries.append(SarifResult(
                rule_id=rule_id,
                file=normalize_uri(artifact["uri"], checkout),
                line=line,
                message=text,
            ))
    return entries


def ingest_sarif(path: Path, checkout: Optional[RepoCheckout] = None) -> List[SarifResult]:
    """Read and parse a SARIF file"""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SarifFormatError("$", f"not valid JSON at line {e.lineno} column {e.colno}")
    except OSError as e:
        raise SarifFormatError("$", f"cannot read {path}: {e}")
    entries = parse_sarif(document, checkout)
    logger.debug(f"Ingested {len(entries)} SARIF results from {path}")
    return entries


def export_sarif(findings: List[Finding]) -> Dict[str, Any]:
    """Build a SARIF 2.1.0 document from verified findings; unverifiable ones are skipped"""
    rules: Dict[str, Dict[str, Any]] = {}
    results: List[Dict[str, Any]] = []

    for finding in findings:
        if finding.unverifiable or finding.conclusion is None:
            continue
        kind = finding.conclusion.kind
        rule_id = f"{finding.reference_advisory}/{kind.value}"
        if rule_id not in rules:
            rules[rule_id] = {
                "id": rule_id,
                "shortDescription": {"text": f"Variant of {finding.reference_advisory}: {kind.value}"},
                "defaultConfiguration": {"level": CONCLUSION_TO_LEVEL[kind]},
            }

        location = finding.candidate.location
        results.append({
            "ruleId": rule_id,
            "level": CONCLUSION_TO_LEVEL[kind],
            "message": {"text": finding.candidate.path_narrative},
            "locations": [{
                "physicalLocation": {
                    "artifactLocation": {"uri": location.file},
                    "region": {"startLine": location.start_line, "endLine": location.end_line},
                }
            }],
            "properties": {
                "candidateId": finding.candidate.id,
                "confidence": finding.candidate.confidence,
                "staticOnly": finding.static_only,
                "preconditions": finding.conclusion.preconditions,
            },
        })

    return {
        "version": SARIF_VERSION,
        "$schema": SARIF_SCHEMA,
        "runs": [{
            "tool": {"driver": {"name": "refaudit", "version": __version__, "rules": list(rules.values())}},
            "results": results,
        }],
    }
