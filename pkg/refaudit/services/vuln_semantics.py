"""
Vulnerability semantics service
Parses the reference document into a witness chain, extracts the six-field feature set
and recovers the affected module roles in the reference repository
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import ValidationError

from refaudit.models.llm import ChatMessage
from refaudit.models.schemas import (
    ChainRole,
    ReferenceDocument,
    RepositorySemantics,
    Role,
    TokenUsage,
    VulnerabilitySemantics,
    VulnFeatureSet,
    WitnessChain,
    render_role,
)
from refaudit.services.code_facts import CodeFacts
from refaudit.services.llm_client import LLMGateway
from refaudit.utils.error_handler import (
    AffectedModulesError,
    AuditError,
    Diagnostic,
    DiagnosticsCollector,
    ReferenceDocumentError,
)

logger = logging.getLogger(__name__)

STAGE = "vuln-extraction"
SNIPPET_CHARS = 2500

SYSTEM_PROMPT = (
    "You are a vulnerability analyst. You describe how a disclosed vulnerability triggers, "
    "from its source to its sink, in terms that transfer to other repositories. "
    "You only answer with the JSON object requested."
)


def load_reference_document(source: Union[Path, Dict[str, Any]]) -> ReferenceDocument:
    """Decode and validate a reference document from a path or a decoded mapping"""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ReferenceDocumentError(f"Reference document not found: {source}")
        except json.JSONDecodeError as e:
            raise ReferenceDocumentError(f"Reference document {source} is not valid JSON: {e}")
    try:
        return ReferenceDocument.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "document"
        raise ReferenceDocumentError(f"Invalid reference document: {field}: {first['msg']}")


def parse_reference(document: ReferenceDocument, facts: Optional[CodeFacts] = None) -> WitnessChain:
    """
    Validate the chain of a reference document

    Args:
        document: Validated reference document
        facts: Reference checkout access; when given, chain files missing from it are flagged

    Returns:
        WitnessChain in document order
    """
    entries = document.chain
    if len(entries) < 2:
        raise ReferenceDocumentError(f"Witness chain of {document.advisory_id} has {len(entries)} entries, "
                                     f"at least 2 are required")
    if entries[0].role != ChainRole.SOURCE:
        raise ReferenceDocumentError(f"Witness chain of {document.advisory_id} must start with a source, "
                                     f"found {entries[0].role.value}")
    if entries[-1].role != ChainRole.SINK:
        raise ReferenceDocumentError(f"Witness chain of {document.advisory_id} must end with a sink, "
                                     f"found {entries[-1].role.value}")

    missing: List[str] = []
    if facts is not None:
        for entry in entries:
            if not facts.exists(entry.file) and entry.file not in missing:
                missing.append(entry.file)
        if missing:
            logger.warning(f"Chain files missing from the reference checkout: {missing}")

    return WitnessChain(
        advisory_id=document.advisory_id,
        entries=list(entries),
        payload_note=document.payload,
        affected_commit=document.affected_commit,
        missing_files=missing,
    )


def _chain_snippets(chain: WitnessChain, facts: Optional[CodeFacts]) -> str:
    sections = []
    for index, entry in enumerate(chain.entries, start=1):
        header = f"[{index}] {entry.role.value}: {entry.file} :: {entry.function}"
        if entry.note:
            header += f" ({entry.note})"
        body = "(code unavailable)"
        if facts is not None and entry.file not in chain.missing_files:
            try:
                body = facts.get_function_code(entry.file, entry.function).source[:SNIPPET_CHARS]
            except AuditError as e:
                body = f"(code unavailable: {e})"
        sections.append(f"{header}\n{body}")
    return "\n\n".join(sections)


async def extract_features(chain: WitnessChain, reference_semantics: RepositorySemantics,
                           gateway: LLMGateway, facts: Optional[CodeFacts] = None,
                           vuln_family: Optional[str] = None) -> Tuple[VulnFeatureSet, TokenUsage]:
    """
    Generate the six-field feature set from source to sink

    Raises:
        SchemaViolationError: two schema failures; carries the raw backend output
    """
    roles = "\n".join(f"- {m.label} ({render_role(m.role)}): {', '.join(m.files[:5])}"
                      for m in reference_semantics.modules)
    prompt = (
        f"Advisory: {chain.advisory_id}\n"
        f"Repository: {reference_semantics.checkout.project_name} - {reference_semantics.summary.description}\n"
        + (f"Reported family: {vuln_family}\n" if vuln_family else "")
        + f"Payload note: {chain.payload_note or 'none'}\n\n"
        f"Witness chain, source first:\n{_chain_snippets(chain, facts)}\n\n"
        f"Repository modules:\n{roles or '- none'}\n\n"
        "Describe the vulnerability following the chain in order. Reply with JSON holding exactly these "
        'six non-empty fields: {"vuln_family": "...", "trigger_condition": "...", '
        '"propagation_constraints": "...", "exploitable_scenario": "...", "missing_guard": "...", '
        '"trust_boundary": "..."}'
    )
    messages = [ChatMessage(role="system", content=SYSTEM_PROMPT), ChatMessage(role="user", content=prompt)]
    return await gateway.complete_json(messages, "vuln-features", STAGE, VulnFeatureSet, retries=1)


def recover_affected_modules(chain: WitnessChain, reference_semantics: RepositorySemantics
                             ) -> Tuple[List[Role], List[Diagnostic]]:
    """
    Roles of every reference module holding a chain file

    Unassigned chain files produce a diagnostic, never a role.
    """
    diagnostics = DiagnosticsCollector(STAGE)
    roles: List[Role] = []
    for rel_path in chain.files:
        holders = [m for m in reference_semantics.modules if rel_path in m.files]
        if not holders:
            diagnostics.add("Chain file is not assigned to any module", context=rel_path)
            continue
        for module in holders:
            role = tuple(module.role)
            if role not in roles:
                roles.append(role)
    if not roles:
        raise AffectedModulesError(f"No affected module recovered for {chain.advisory_id}; "
                                   f"chain files {chain.files} are unassigned in the reference profile")
    return roles, diagnostics.entries


async def extract_vulnerability_semantics(document: ReferenceDocument, reference_semantics: RepositorySemantics,
                                          gateway: LLMGateway, facts: Optional[CodeFacts] = None
                                          ) -> VulnerabilitySemantics:
    """Reference document + profiled reference checkout -> vulnerability semantics"""
    logger.info(f"=== Extracting vulnerability semantics for {document.advisory_id} ===")
    chain = parse_reference(document, facts)
    affected, diagnostics = recover_affected_modules(chain, reference_semantics)
    features, usage = await extract_features(chain, reference_semantics, gateway, facts, document.vuln_family)
    logger.info(f"{document.advisory_id}: family {features.vuln_family}, "
                f"affected roles {[render_role(r) for r in affected]}")
    return VulnerabilitySemantics(
        advisory_id=document.advisory_id,
        chain=chain,
        features=features,
        affected_modules=affected,
        reference_project=reference_semantics.checkout.project_name,
        reference_commit=reference_semantics.checkout.commit_id,
        token_usage=usage,
        diagnostics=diagnostics,
    )
