"""
Shared fixtures: fixture repositories, scripted backends and profiled semantics
"""
import json
import shutil
from pathlib import Path
from typing import Any, Dict, List

import pytest

from refaudit.models.llm import TokenLedger
from refaudit.models.schemas import RepoCheckout
from refaudit.services.code_facts import CodeFacts
from refaudit.services.llm_client import (
    HashingEmbeddingBackend,
    LLMGateway,
    ScriptedChatBackend,
    ScriptedFixture,
    load_scripted_fixture,
)
from refaudit.services.repo_semantics import profile_checkout
from refaudit.services.state_store import StateStore
from refaudit.services.taxonomy import shipped_taxonomy
from refaudit.services.vuln_semantics import extract_vulnerability_semantics, load_reference_document

FIXTURES = Path(__file__).parent / "fixtures"
REPOS = FIXTURES / "repos"
PIPELINE_FIXTURE = FIXTURES / "scripted" / "pipeline.json"
REFERENCE_DOC = FIXTURES / "reference" / "ADV-2024-0001.json"


def json_reply(payload: Any) -> Dict[str, Any]:
    return {"content": json.dumps(payload)}


def make_gateway(*entries: Dict[str, Any], context_window: int = 65536) -> LLMGateway:
    """Gateway over a scripted backend built from chat entries"""
    fixture = ScriptedFixture.model_validate({"chat": list(entries)})
    return LLMGateway(ScriptedChatBackend(fixture, context_window), TokenLedger())


def write_repo(root: Path, files: Dict[str, str]) -> Path:
    for rel_path, text in files.items():
        path = root / rel_path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    return root


@pytest.fixture
def pipeline_fixture() -> ScriptedFixture:
    return load_scripted_fixture(PIPELINE_FIXTURE)


@pytest.fixture
def pipeline_gateway(pipeline_fixture) -> LLMGateway:
    return LLMGateway(ScriptedChatBackend(pipeline_fixture), TokenLedger())


@pytest.fixture
def embedder() -> HashingEmbeddingBackend:
    return HashingEmbeddingBackend()


@pytest.fixture
def store(tmp_path) -> StateStore:
    return StateStore(tmp_path / "state")


@pytest.fixture
def reference_checkout() -> RepoCheckout:
    return RepoCheckout.open(REPOS / "reference_app", "reference_app", "v1")


@pytest.fixture
def target_checkout() -> RepoCheckout:
    return RepoCheckout.open(REPOS / "target_app", "target_app", "v2")


@pytest.fixture
def patched_root(tmp_path) -> Path:
    """target_app with the sink guarded by weights_only=True"""
    root = tmp_path / "target_app_patched"
    shutil.copytree(REPOS / "target_app", root)
    convert = root / "scripts" / "convert.py"
    convert.write_text(convert.read_text().replace("torch.load(checkpoint_path)",
                                                   "torch.load(checkpoint_path, weights_only=True)"))
    return root


@pytest.fixture
async def reference_semantics(reference_checkout, pipeline_gateway):
    return await profile_checkout(reference_checkout, shipped_taxonomy(), pipeline_gateway)


@pytest.fixture
async def target_semantics(target_checkout, pipeline_gateway):
    return await profile_checkout(target_checkout, shipped_taxonomy(), pipeline_gateway)


@pytest.fixture
async def vuln_semantics(reference_semantics, reference_checkout, pipeline_gateway):
    document = load_reference_document(REFERENCE_DOC)
    return await extract_vulnerability_semantics(document, reference_semantics, pipeline_gateway,
                                                 CodeFacts(reference_checkout))


def role_ids(modules: List) -> List[str]:
    return sorted(m.module_id for m in modules)
