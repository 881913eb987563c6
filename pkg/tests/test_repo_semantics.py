"""
Repository profiling: module assignment, module graph and summary
"""
from refaudit.models.schemas import AssignmentPass, RepoCheckout
from refaudit.services.code_facts import CodeFacts
from refaudit.services.repo_semantics import RepositoryProfiler, profile_checkout
from refaudit.services.taxonomy import shipped_taxonomy

from conftest import json_reply, make_gateway, role_ids, write_repo

WEB_UI = "UI and Workflows :: Web UI"
LOADING = "Model Assets and Loading :: Loading Configuration"
CLI = "UI and Workflows :: CLI/Developer Workflows"


async def test_target_profile_assigns_modules_by_path(target_semantics):
    assert role_ids(target_semantics.modules) == [LOADING, CLI, WEB_UI]
    assert target_semantics.unassigned == []
    for module in target_semantics.modules:
        assert set(module.file_passes.values()) == {AssignmentPass.PATH}
    assert target_semantics.module(WEB_UI).files == ["app/webui/launch_page.py"]
    assert "gradio" in target_semantics.module(WEB_UI).deps


async def test_module_graph_follows_resolved_calls(target_semantics):
    edges = [(e.caller_module, e.callee_module, e.count) for e in target_semantics.graph.edges]
    assert edges == [(WEB_UI, LOADING, 1)]
    callers, callees = target_semantics.graph.neighbors(LOADING)
    assert (callers, callees) == ([WEB_UI], [])


async def test_summary_comes_from_the_readme(target_semantics):
    summary = target_semantics.summary
    assert summary.description.startswith("Web console")
    assert summary.key_dependencies == ["gradio", "torch"]
    assert not summary.degraded
    assert target_semantics.token_usage.input_tokens > 0


async def test_ambiguous_files_go_to_the_backend(tmp_path):
    root = write_repo(tmp_path / "repo", {
        "misc/thing.py": "import gradio\n\ndef page():\n    return gradio.Blocks()\n",
        "misc/other.py": "def helper():\n    return 1\n",
    })
    gateway = make_gateway({"prompt_id": "module-assignment", "replies": [json_reply({"assignments": [
        {"file": "misc/thing.py", "roles": [["UI and Workflows", "Web UI"], "UI and Workflows :: Telepathy"],
         "notes": "Builds the web page"},
        {"file": "misc/elsewhere.py", "roles": [["UI and Workflows", "Web UI"]]},
    ]})]})
    profiler = RepositoryProfiler(CodeFacts(RepoCheckout.open(root, "repo", "c1")), shipped_taxonomy(), gateway)
    assignment = await profiler.assign_modules()

    [module] = assignment.modules
    assert module.module_id == WEB_UI
    assert module.files == ["misc/thing.py"]
    assert module.file_passes == {"misc/thing.py": AssignmentPass.BACKEND}
    assert module.feature_notes == "Builds the web page"
    assert assignment.unassigned == ["misc/other.py"]
    messages = [d.message for d in assignment.diagnostics]
    assert any("Telepathy" in m for m in messages)
    assert any("outside its batch" in m for m in messages)


async def test_failed_batches_leave_files_unassigned(tmp_path):
    root = write_repo(tmp_path / "repo", {"misc/thing.py": "x = 1\n"})
    semantics = await profile_checkout(RepoCheckout.open(root, "repo", "c1"), shipped_taxonomy(), make_gateway())
    assert semantics.modules == []
    assert semantics.unassigned == ["misc/thing.py"]
    assert any(d.error_type == "BackendError" for d in semantics.diagnostics)


async def test_missing_readme_gives_a_degraded_summary(tmp_path):
    root = write_repo(tmp_path / "repo", {"app/webui/page.py": "def page():\n    return None\n"})
    semantics = await profile_checkout(RepoCheckout.open(root, "repo", "c1"), shipped_taxonomy(), make_gateway())
    assert semantics.summary.degraded
    assert "Web UI" in semantics.summary.description
    assert semantics.summary.target_user == "Developers and operators of repo"
