"""
Reference documents, witness chains and vulnerability semantics
"""
import json

import pytest

from refaudit.models.schemas import ChainRole
from refaudit.services.code_facts import CodeFacts
from refaudit.services.vuln_semantics import (
    extract_vulnerability_semantics,
    load_reference_document,
    parse_reference,
    recover_affected_modules,
)
from refaudit.utils.error_handler import AffectedModulesError, ReferenceDocumentError, SchemaViolationError

from conftest import REFERENCE_DOC, json_reply, make_gateway

FEATURES = {
    "vuln_family": "deserialization",
    "trigger_condition": "user path reaches torch.load",
    "propagation_constraints": "path passes unchanged",
    "exploitable_scenario": "attacker picks the checkpoint",
    "missing_guard": "weights_only=True",
    "trust_boundary": "web UI input",
}


def reference(**changes):
    document = json.loads(REFERENCE_DOC.read_text())
    document.update(changes)
    return document


def test_reference_document_loads():
    document = load_reference_document(REFERENCE_DOC)
    assert document.advisory_id == "ADV-2024-0001"
    assert [e.role for e in document.chain] == [ChainRole.SOURCE, ChainRole.SINK]


def test_invalid_documents_are_rejected(tmp_path):
    with pytest.raises(ReferenceDocumentError, match="not found"):
        load_reference_document(tmp_path / "absent.json")
    with pytest.raises(ReferenceDocumentError, match="advisory_id"):
        load_reference_document(reference(advisory_id=""))
    with pytest.raises(ReferenceDocumentError):
        load_reference_document(reference(unexpected="field"))


def test_chain_shape_is_validated():
    document = load_reference_document(reference())
    sink_only = document.model_copy(update={"chain": document.chain[1:]})
    with pytest.raises(ReferenceDocumentError, match="at least 2"):
        parse_reference(sink_only)

    reversed_chain = document.model_copy(update={"chain": list(reversed(document.chain))})
    with pytest.raises(ReferenceDocumentError, match="start with a source"):
        parse_reference(reversed_chain)


def test_missing_chain_files_are_flagged(reference_checkout):
    document = load_reference_document(reference())
    moved = [entry.model_copy(update={"file": "src/gone.py"}) if entry.role == ChainRole.SINK else entry
             for entry in document.chain]
    chain = parse_reference(document.model_copy(update={"chain": moved}), CodeFacts(reference_checkout))
    assert chain.missing_files == ["src/gone.py"]


async def test_affected_roles_come_from_chain_files(reference_semantics):
    chain = parse_reference(load_reference_document(REFERENCE_DOC))
    roles, diagnostics = recover_affected_modules(chain, reference_semantics)
    assert roles == [("UI and Workflows", "Web UI"), ("Model Assets and Loading", "Loading Configuration")]
    assert diagnostics == []


async def test_unassigned_chain_files_raise(reference_semantics):
    document = load_reference_document(reference())
    moved = [entry.model_copy(update={"file": f"docs/{entry.function}.py"}) for entry in document.chain]
    chain = parse_reference(document.model_copy(update={"chain": moved}))
    with pytest.raises(AffectedModulesError):
        recover_affected_modules(chain, reference_semantics)


async def test_vulnerability_semantics_from_the_reference(vuln_semantics):
    assert vuln_semantics.features.vuln_family == "deserialization"
    assert vuln_semantics.reference_project == "reference_app"
    assert vuln_semantics.chain.payload_note
    assert vuln_semantics.token_usage.input_tokens > 0


async def test_feature_schema_gets_one_retry(reference_semantics, reference_checkout):
    document = load_reference_document(REFERENCE_DOC)
    incomplete = {k: v for k, v in FEATURES.items() if k != "trust_boundary"}
    gateway = make_gateway(
        {"prompt_id": "vuln-features", "replies": [json_reply(incomplete)]},
        {"prompt_id": "vuln-features", "contains": "did not follow the required JSON schema",
         "replies": [json_reply(FEATURES)]},
    )
    semantics = await extract_vulnerability_semantics(document, reference_semantics, gateway,
                                                      CodeFacts(reference_checkout))
    assert semantics.features.trust_boundary == "web UI input"

    failing = make_gateway({"prompt_id": "vuln-features", "replies": [json_reply(incomplete)]},
                           {"prompt_id": "vuln-features", "contains": "did not follow",
                            "replies": [json_reply({**FEATURES, "extra": "field"})]})
    with pytest.raises(SchemaViolationError) as excinfo:
        await extract_vulnerability_semantics(document, reference_semantics, failing)
    assert '"extra"' in excinfo.value.raw_output
