"""
Repository semantics service
Taxonomy-constrained module assignment, module descriptors, module call graph and repository summary
"""
import asyncio
import logging
import sys
from pathlib import Path, PurePosixPath
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field

from refaudit.config import RunConfig
from refaudit.models.llm import ChatMessage
from refaudit.models.schemas import (
    AssignmentPass,
    CallRelation,
    FunctionFact,
    ModuleCallGraph,
    ModuleDescriptor,
    ModuleEdge,
    RepoCheckout,
    RepositorySemantics,
    RepositorySummary,
    Role,
    RoleTaxonomy,
    TokenUsage,
    render_role,
)
from refaudit.services.code_facts import CodeFacts
from refaudit.services.llm_client import LLMGateway
from refaudit.services.state_store import StateStore
from refaudit.services.taxonomy import PathKeywordTable, load_keyword_table
from refaudit.utils.error_handler import BackendError, Diagnostic, DiagnosticsCollector, log_performance

logger = logging.getLogger(__name__)

STAGE = "profiling"
SNIPPET_LINES = 40
SNIPPET_CHARS = 1500
README_CHARS = 6000
NOTES_CHARS = 300

SYSTEM_PROMPT = (
    "You are a repository semantics analyst for AI infrastructure projects. "
    "You only answer with the JSON object requested."
)


class FileAssignment(BaseModel):
    file: str
    roles: List[Union[List[str], str]] = Field(default_factory=list)
    notes: str = ""


class AssignmentReply(BaseModel):
    assignments: List[FileAssignment] = Field(default_factory=list)


class SummaryReply(BaseModel):
    description: str = Field(min_length=1)
    application_scenario: str = Field(min_length=1)
    target_user: str = Field(min_length=1)


class ModuleAssignment(BaseModel):
    """Output of module assignment"""
    modules: List[ModuleDescriptor] = Field(default_factory=list)
    unassigned: List[str] = Field(default_factory=list)
    diagnostics: List[Diagnostic] = Field(default_factory=list)
    token_usage: TokenUsage = Field(default_factory=TokenUsage)


def _parse_role(raw: Union[List[str], str]) -> Optional[Role]:
    if isinstance(raw, str):
        parts = [p.strip() for p in raw.split("::")]
    else:
        parts = [str(p).strip() for p in raw]
    if len(parts) != 2 or not all(parts):
        return None
    return parts[0], parts[1]


def _taxonomy_listing(taxonomy: RoleTaxonomy) -> str:
    return "\n".join(f"- {render_role(role)}" for role in taxonomy.roles())


def source_files(facts: CodeFacts) -> List[str]:
    """Files subject to module assignment"""
    return facts.python_files()


class RepositoryProfiler:
    """Builds the repository semantics of one checkout"""

    def __init__(self, facts: CodeFacts, taxonomy: RoleTaxonomy, gateway: LLMGateway,
                 config: Optional[RunConfig] = None, keywords: Optional[PathKeywordTable] = None):
        self.facts = facts
        self.taxonomy = taxonomy
        self.gateway = gateway
        self.config = config or RunConfig()
        self.keywords = keywords or load_keyword_table(taxonomy)

    # ------------------------------------------------------------------ assignment

    async def assign_modules(self) -> ModuleAssignment:
        """
        Two-pass module assignment

        Pass 1 uses path segments; files without exactly one keyword role go to the backend
        in batches. Backend failures leave the batch's files unassigned.
        """
        diagnostics = DiagnosticsCollector(STAGE)
        files = source_files(self.facts)
        if not files:
            return ModuleAssignment()

        file_roles: Dict[str, List[Tuple[Role, AssignmentPass]]] = {}
        notes: Dict[str, str] = {}
        ambiguous: List[str] = []
        for rel_path in files:
            role = self.keywords.confident_role(rel_path)
            if role is not None:
                file_roles[rel_path] = [(role, AssignmentPass.PATH)]
            else:
                ambiguous.append(rel_path)
        logger.info(f"Pass 1 assigned {len(file_roles)} of {len(files)} files, {len(ambiguous)} ambiguous")

        usage = TokenUsage()
        size = self.config.pass2_batch_size
        batches = [ambiguous[i:i + size] for i in range(0, len(ambiguous), size)]
        replies = await asyncio.gather(*(self._assign_batch(b) for b in batches), return_exceptions=True)

        for batch, reply in zip(batches, replies):
            if isinstance(reply, BaseException):
                diagnostics.add("Module assignment batch failed, files left unassigned",
                                context=f"{batch[0]} .. {batch[-1]}", error=reply)
                continue
            parsed, batch_usage = reply
            usage = usage + batch_usage
            by_file = {a.file: a for a in parsed.assignments}
            for stray in sorted(set(by_file) - set(batch)):
                diagnostics.add("Backend assigned a file outside its batch", context=stray)
            for rel_path in batch:
                assignment = by_file.get(rel_path)
                if assignment is None:
                    continue
                roles: List[Role] = []
                for raw in assignment.roles:
                    role = _parse_role(raw)
                    if role is None or not self.taxonomy.contains(role):
                        diagnostics.add(f"Dropped role outside the taxonomy: {raw}", context=rel_path)
                        continue
                    if role not in roles:
                        roles.append(role)
                if roles:
                    file_roles[rel_path] = [(r, AssignmentPass.BACKEND) for r in roles]
                    if assignment.notes.strip():
                        notes[rel_path] = assignment.notes.strip()

        unassigned = [f for f in files if f not in file_roles]
        modules = self._build_descriptors(files, file_roles, notes)
        logger.info(f"Assigned {len(files) - len(unassigned)} files to {len(modules)} modules, "
                    f"{len(unassigned)} unassigned")
        return ModuleAssignment(modules=modules, unassigned=unassigned,
                                diagnostics=diagnostics.entries, token_usage=usage)

    async def _assign_batch(self, batch: List[str]) -> Tuple[AssignmentReply, TokenUsage]:
        sections = []
        for rel_path in batch:
            lines = self.facts.read_lines(rel_path)[:SNIPPET_LINES]
            snippet = "\n".join(lines)[:SNIPPET_CHARS]
            hints = [render_role(r) for r in self.keywords.candidate_roles(rel_path)]
            hint = f"(path suggests: {', '.join(hints)})\n" if hints else ""
            sections.append(f"### {rel_path}\n{hint}{snippet}")
        prompt = (
            "Assign each file below to one or more module roles from the taxonomy. "
            "Use only the listed roles, written as [\"<category>\", \"<role>\"].\n"
            'Reply with JSON: {"assignments": [{"file": "<path>", "roles": [["<category>", "<role>"]], '
            '"notes": "<one sentence on what the file does>"}]}\n\n'
            f"Taxonomy:\n{_taxonomy_listing(self.taxonomy)}\n\nFiles:\n" + "\n\n".join(sections)
        )
        messages = [ChatMessage(role="system", content=SYSTEM_PROMPT), ChatMessage(role="user", content=prompt)]
        return await self.gateway.complete_json(messages, "module-assignment", STAGE, AssignmentReply)

    def _build_descriptors(self, files: List[str], file_roles: Dict[str, List[Tuple[Role, AssignmentPass]]],
                           notes: Dict[str, str]) -> List[ModuleDescriptor]:
        grouped: Dict[Role, List[str]] = {}
        passes: Dict[Role, Dict[str, AssignmentPass]] = {}
        for rel_path in files:
            for role, how in file_roles.get(rel_path, []):
                grouped.setdefault(role, []).append(rel_path)
                passes.setdefault(role, {})[rel_path] = how

        modules: List[ModuleDescriptor] = []
        for role, role_files in grouped.items():
            if len(role_files) > self.config.module_split_threshold:
                packages: Dict[str, List[str]] = {}
                for rel_path in role_files:
                    parts = PurePosixPath(rel_path).parts
                    packages.setdefault(parts[0] if len(parts) > 1 else ".", []).append(rel_path)
                for package, package_files in sorted(packages.items()):
                    modules.append(self._descriptor(
                        f"{render_role(role)} [{package}]", role, f"{role[1]} ({package})",
                        package_files, passes[role], notes))
            else:
                modules.append(self._descriptor(render_role(role), role, role[1], role_files, passes[role], notes))
        return sorted(modules, key=lambda m: m.module_id)

    def _descriptor(self, module_id: str, role: Role, label: str, files: List[str],
                    passes: Dict[str, AssignmentPass], notes: Dict[str, str]) -> ModuleDescriptor:
        funcs: List[FunctionFact] = []
        deps: List[str] = []
        for rel_path in files:
            funcs.extend(f for f in self.facts.functions(rel_path) if "." not in f.qualified_name)
            for name in self.facts.get_imports(rel_path).modules:
                root = name.split(".")[0]
                if root and root not in deps:
                    deps.append(root)
        funcs = sorted(funcs, key=lambda f: (f.file, f.start_line))[:self.config.module_max_funcs]

        file_notes = list(dict.fromkeys(notes[f] for f in files if f in notes))
        if file_notes:
            feature_notes = " ".join(file_notes[:3])[:NOTES_CHARS]
        else:
            folders = sorted({str(PurePosixPath(f).parent) for f in files})
            feature_notes = f"{len(files)} file(s) under {', '.join(folders[:4])}"

        return ModuleDescriptor(
            module_id=module_id,
            role=role,
            label=label,
            files=files,
            funcs=funcs,
            deps=sorted(deps),
            feature_notes=feature_notes,
            file_passes={f: passes[f] for f in files},
        )

    # ------------------------------------------------------------------ summary

    def key_dependencies(self) -> List[str]:
        """Import roots across source files, minus stdlib and checkout-local names"""
        files = source_files(self.facts)
        local = set()
        for rel_path in files:
            path = PurePosixPath(rel_path)
            local.update(path.parent.parts)
            local.add(path.stem)
        roots = set()
        for rel_path in files:
            for name in self.facts.get_imports(rel_path).modules:
                roots.add(name.split(".")[0])
        stdlib = set(sys.stdlib_module_names)
        return sorted(r for r in roots if r and r not in stdlib and r not in local)

    def _readme(self) -> Optional[str]:
        for rel_path in self.facts.list_files():
            path = PurePosixPath(rel_path)
            if len(path.parts) == 1 and path.stem.lower() == "readme":
                return self.facts.read_text(rel_path)[:README_CHARS]
        return None

    def _fallback_summary(self, modules: List[ModuleDescriptor], dependencies: List[str]) -> RepositorySummary:
        project = self.facts.checkout.project_name
        labels = [m.label for m in modules]
        categories = list(dict.fromkeys(m.role[0] for m in modules))
        return RepositorySummary(
            description=f"{project} repository with modules: {', '.join(labels)}" if labels
            else f"{project} repository with no recognized modules",
            application_scenario=f"Workflows covering {', '.join(categories)}" if categories
            else "Unknown application scenario",
            target_user=f"Developers and operators of {project}",
            key_dependencies=dependencies,
            degraded=True,
        )

    async def summarize_repository(self, modules: List[ModuleDescriptor]
                                   ) -> Tuple[RepositorySummary, TokenUsage, List[Diagnostic]]:
        """One backend call over the readme and module labels; deterministic fallback otherwise"""
        diagnostics = DiagnosticsCollector(STAGE)
        dependencies = self.key_dependencies()
        readme = self._readme()
        if readme is None:
            diagnostics.add("No readme found, summary built from module labels",
                            context=self.facts.checkout.project_name)
            return self._fallback_summary(modules, dependencies), TokenUsage(), diagnostics.entries

        module_lines = "\n".join(f"- {m.label} ({render_role(m.role)}): {m.feature_notes}" for m in modules)
        prompt = (
            "Summarize this repository for cross-repository comparison.\n"
            'Reply with JSON: {"description": "...", "application_scenario": "...", "target_user": "..."}\n\n'
            f"Project: {self.facts.checkout.project_name}\n"
            f"Key dependencies: {', '.join(dependencies) or 'none'}\n\n"
            f"Modules:\n{module_lines or '- none'}\n\nReadme:\n{readme}"
        )
        messages = [ChatMessage(role="system", content=SYSTEM_PROMPT), ChatMessage(role="user", content=prompt)]
        try:
            reply, usage = await self.gateway.complete_json(messages, "repository-summary", STAGE, SummaryReply)
        except BackendError as e:
            diagnostics.add("Repository summary failed, using fallback", error=e)
            return self._fallback_summary(modules, dependencies), TokenUsage(), diagnostics.entries

        summary = RepositorySummary(
            description=reply.description,
            application_scenario=reply.application_scenario,
            target_user=reply.target_user,
            key_dependencies=dependencies,
        )
        return summary, usage, diagnostics.entries

    # ------------------------------------------------------------------ whole profile

    @log_performance(threshold=120.0)
    async def profile(self) -> RepositorySemantics:
        checkout = self.facts.checkout
        logger.info(f"=== Profiling {checkout.project_name}@{checkout.commit_id} ===")
        assignment = await self.assign_modules()
        extraction = self.facts.extract_call_relations()
        graph = build_module_graph(assignment.modules, extraction.relations)
        summary, summary_usage, summary_diagnostics = await self.summarize_repository(assignment.modules)

        diagnostics = DiagnosticsCollector(STAGE)
        diagnostics.extend(assignment.diagnostics + extraction.diagnostics + summary_diagnostics)
        return RepositorySemantics(
            checkout=checkout,
            summary=summary,
            modules=assignment.modules,
            unassigned=assignment.unassigned,
            graph=graph,
            token_usage=assignment.token_usage + summary_usage,
            diagnostics=diagnostics.entries,
        )


def build_module_graph(modules: List[ModuleDescriptor], relations: List[CallRelation]) -> ModuleCallGraph:
    """
    Project resolved call relations onto modules

    Edge (A, B) exists iff a resolved relation has its caller in a file of A and its callee in
    a file of B with A != B; counts aggregate supporting relations.
    """
    modules_of: Dict[str, List[str]] = {}
    for module in modules:
        for rel_path in module.files:
            modules_of.setdefault(rel_path, []).append(module.module_id)

    counts: Dict[Tuple[str, str], int] = {}
    for relation in relations:
        if relation.callee_resolved is None:
            continue
        for caller_module in modules_of.get(relation.caller.file, []):
            for callee_module in modules_of.get(relation.callee_resolved.file, []):
                if caller_module != callee_module:
                    key = (caller_module, callee_module)
                    counts[key] = counts.get(key, 0) + 1

    return ModuleCallGraph(
        nodes=sorted(m.module_id for m in modules),
        edges=[ModuleEdge(caller_module=a, callee_module=b, count=n) for (a, b), n in sorted(counts.items())],
    )


async def profile_checkout(checkout: RepoCheckout, taxonomy: RoleTaxonomy, gateway: LLMGateway,
                           config: Optional[RunConfig] = None) -> RepositorySemantics:
    return await RepositoryProfiler(CodeFacts(checkout), taxonomy, gateway, config).profile()


def persist_semantics(semantics: RepositorySemantics, store_dir: Path) -> Path:
    return StateStore(store_dir).save_semantics(semantics)


def load_semantics(store_dir: Path, project: str, commit: str) -> RepositorySemantics:
    return StateStore(store_dir).load_semantics(project, commit)
