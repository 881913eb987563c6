"""
Data models and schema definitions
Code facts, repository semantics and vulnerability semantics, defined with Pydantic
"""
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from refaudit.utils.error_handler import CheckoutError, Diagnostic

# (coarse category, second-level role)
Role = Tuple[str, str]

SCHEMA_VERSION = 1


def render_role(role: Role) -> str:
    """Render a role the way it is compared against descriptors"""
    return f"{role[0]} :: {role[1]}"


# --------------------------------------------------------------------------- code facts

class RepoCheckout(BaseModel):
    """A repository revision on disk (never mutated)"""
    model_config = ConfigDict(frozen=True)

    root_path: Path
    project_name: str = Field(min_length=1)
    commit_id: str = Field(min_length=1)

    @classmethod
    def open(cls, root_path: Path, project_name: str, commit_id: str) -> "RepoCheckout":
        """Build a checkout, requiring the root to be an existing directory"""
        root = Path(root_path)
        if not root.is_dir():
            raise CheckoutError(f"Checkout root {root} is not a directory")
        return cls(root_path=root.resolve(), project_name=project_name, commit_id=commit_id)

    @property
    def key(self) -> Tuple[str, str]:
        return self.project_name, self.commit_id


class FunctionKind(str, Enum):
    FUNCTION = "function"
    METHOD = "method"
    CLASS = "class"


class FunctionFact(BaseModel):
    """A function, method or class extracted from one file"""
    model_config = ConfigDict(frozen=True)

    file: str
    qualified_name: str
    start_line: int = Field(ge=1)
    end_line: int = Field(ge=1)
    kind: FunctionKind

    @model_validator(mode="after")
    def _ordered_span(self):
        if self.end_line < self.start_line:
            raise ValueError("end_line must not precede start_line")
        return self

    @property
    def simple_name(self) -> str:
        return self.qualified_name.rsplit(".", 1)[-1]

    def contains_line(self, line: int) -> bool:
        return self.start_line <= line <= self.end_line


class CallRelation(BaseModel):
    """One syntactic call site inside an extracted function"""
    caller: FunctionFact
    callee_name: str
    callee_resolved: Optional[FunctionFact] = None
    call_site_line: int = Field(ge=1)


class CallExtraction(BaseModel):
    """Call relations of a checkout plus per-file parse diagnostics"""
    relations: List[CallRelation] = Field(default_factory=list)
    diagnostics: List[Diagnostic] = Field(default_factory=list)


class FlowVia(str, Enum):
    PARAMETER = "parameter"
    ASSIGNMENT = "assignment"
    CALL_ARGUMENT = "call_argument"
    RETURN = "return"


class FlowEdge(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_symbol: str
    to_symbol: str
    via: FlowVia
    line: int


class DataFlowSummary(BaseModel):
    """Intraprocedural propagation inside one function"""
    function: FunctionFact
    edges: List[FlowEdge] = Field(default_factory=list)
    unparsed: bool = False


class SearchHit(BaseModel):
    file: str
    line_number: int
    line_text: str


class FunctionCode(BaseModel):
    """Source of a function or class, with line numbers attached"""
    file: str
    fact: Optional[FunctionFact] = None
    start_line: int
    end_line: int
    source: str
    unparsed: bool = False


class ImportList(BaseModel):
    file: str
    modules: List[str] = Field(default_factory=list)
    fallback: bool = False


class SarifResult(BaseModel):
    rule_id: str
    file: str
    line: int
    message: str


# --------------------------------------------------------------------------- repo semantics

class RoleCategory(BaseModel):
    coarse_name: str
    definition: str
    second_level_roles: List[str] = Field(min_length=1, max_length=5)


class RoleTaxonomy(BaseModel):
    """Two-level module role vocabulary"""
    version: int = 1
    categories: List[RoleCategory]

    @model_validator(mode="after")
    def _unique_coarse_names(self):
        names = [c.coarse_name for c in self.categories]
        if len(names) != len(set(names)):
            raise ValueError("coarse category names must be unique")
        return self

    def roles(self) -> List[Role]:
        return [(c.coarse_name, r) for c in self.categories for r in c.second_level_roles]

    def contains(self, role: Role) -> bool:
        return tuple(role) in set(self.roles())


class AssignmentPass(str, Enum):
    PATH = "path"          # pass 1: path names and package structure
    BACKEND = "backend"    # pass 2: source snippets read by the backend


class ModuleDescriptor(BaseModel):
    """phi(m): role, label, files, important functions, dependencies"""
    module_id: str
    role: Role
    label: str
    files: List[str] = Field(min_length=1)
    funcs: List[FunctionFact] = Field(default_factory=list)
    deps: List[str] = Field(default_factory=list)
    feature_notes: str = ""
    file_passes: Dict[str, AssignmentPass] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _funcs_within_files(self):
        files = set(self.files)
        stray = [f.qualified_name for f in self.funcs if f.file not in files]
        if stray:
            raise ValueError(f"functions outside module files: {stray[:3]}")
        return self

    def descriptor_text(self) -> str:
        """Text compared against affected roles during promotion"""
        parts = [self.label, render_role(self.role), self.feature_notes]
        return " ".join(p for p in parts if p).strip()


class ModuleEdge(BaseModel):
    caller_module: str
    callee_module: str
    count: int = Field(ge=1)


class ModuleCallGraph(BaseModel):
    nodes: List[str] = Field(default_factory=list)
    edges: List[ModuleEdge] = Field(default_factory=list)

    @model_validator(mode="after")
    def _no_self_loops(self):
        if any(e.caller_module == e.callee_module for e in self.edges):
            raise ValueError("self-loop edges are not stored")
        return self

    def neighbors(self, module_id: str) -> Tuple[List[str], List[str]]:
        """(callers, callees) of a module"""
        callers = [e.caller_module for e in self.edges if e.callee_module == module_id]
        callees = [e.callee_module for e in self.edges if e.caller_module == module_id]
        return callers, callees


class RepositorySummary(BaseModel):
    """rho(S): compact summary used for cross-repository comparison"""
    description: str = Field(min_length=1)
    application_scenario: str = Field(min_length=1)
    target_user: str = Field(min_length=1)
    key_dependencies: List[str] = Field(default_factory=list)
    degraded: bool = False

    @field_validator("key_dependencies")
    @classmethod
    def _dedup(cls, value: List[str]) -> List[str]:
        return sorted(set(value))


class TokenUsage(BaseModel):
    input_tokens: int = 0
    output_tokens: int = 0

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            input_tokens=self.input_tokens + other.input_tokens,
            output_tokens=self.output_tokens + other.output_tokens,
        )


class RepositorySemantics(BaseModel):
    """Sigma_R(S) for one checkout"""
    schema_version: int = SCHEMA_VERSION
    checkout: RepoCheckout
    summary: RepositorySummary
    modules: List[ModuleDescriptor] = Field(default_factory=list)
    unassigned: List[str] = Field(default_factory=list)
    graph: ModuleCallGraph = Field(default_factory=ModuleCallGraph)
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    diagnostics: List[Diagnostic] = Field(default_factory=list)

    def module(self, module_id: str) -> ModuleDescriptor:
        for module in self.modules:
            if module.module_id == module_id:
                return module
        raise KeyError(module_id)

    def modules_of_file(self, file: str) -> List[str]:
        return [m.module_id for m in self.modules if file in m.files]

    def role_set(self) -> set:
        return {tuple(m.role) for m in self.modules}


# --------------------------------------------------------------------------- vuln semantics

class ChainRole(str, Enum):
    SOURCE = "source"
    PROPAGATION = "propagation"
    SINK = "sink"


class ChainEntry(BaseModel):
    file: str
    function: str
    role: ChainRole
    note: str = ""


class WitnessChain(BaseModel):
    """w(v*): ordered source -> propagation -> sink path of the reference"""
    advisory_id: str = Field(min_length=1)
    entries: List[ChainEntry]
    payload_note: Optional[str] = None
    affected_commit: Optional[str] = None
    missing_files: List[str] = Field(default_factory=list)

    @property
    def files(self) -> List[str]:
        seen: List[str] = []
        for entry in self.entries:
            if entry.file not in seen:
                seen.append(entry.file)
        return seen


class ReferenceDocument(BaseModel):
    """Operator-authored reference vulnerability document"""
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    advisory_id: str = Field(min_length=1)
    project: str = Field(min_length=1)
    affected_commit: str = Field(min_length=1)
    vuln_family: Optional[str] = None
    chain: List[ChainEntry]
    payload: Optional[str] = None


class VulnFeatureSet(BaseModel):
    """psi(w(v*)): exactly six non-empty fields"""
    model_config = ConfigDict(extra="forbid")

    vuln_family: str = Field(min_length=1)
    trigger_condition: str = Field(min_length=1)
    propagation_constraints: str = Field(min_length=1)
    exploitable_scenario: str = Field(min_length=1)
    missing_guard: str = Field(min_length=1)
    trust_boundary: str = Field(min_length=1)

    @field_validator("*")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("must not be blank")
        return value.strip()


class VulnerabilitySemantics(BaseModel):
    """Sigma_V(v*) plus the chain it was derived from"""
    schema_version: int = SCHEMA_VERSION
    advisory_id: str
    chain: WitnessChain
    features: VulnFeatureSet
    affected_modules: List[Role] = Field(min_length=1)
    reference_project: str
    reference_commit: str
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    diagnostics: List[Diagnostic] = Field(default_factory=list)

    @property
    def affected_role_set(self) -> set:
        return {tuple(r) for r in self.affected_modules}


# --------------------------------------------------------------------------- selection

class SimilarityBreakdown(BaseModel):
    description_sim: float = Field(ge=0.0, le=1.0)
    application_sim: float = Field(ge=0.0, le=1.0)
    user_sim: float = Field(ge=0.0, le=1.0)
    module_jaccard: float = Field(ge=0.0, le=1.0)
    dependency_jaccard: float = Field(ge=0.0, le=1.0)
    overall: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _overall_is_mean(self):
        mean = (self.description_sim + self.application_sim + self.user_sim
                + self.module_jaccard + self.dependency_jaccard) / 5.0
        if abs(mean - self.overall) >= 1e-9:
            raise ValueError("overall must equal the mean of the five components")
        return self


class RankedTarget(BaseModel):
    project: str
    commit: str
    breakdown: SimilarityBreakdown


class TargetSelection(BaseModel):
    schema_version: int = SCHEMA_VERSION
    advisory_id: Optional[str] = None
    ranked: List[RankedTarget] = Field(default_factory=list)
    selected: List[RankedTarget] = Field(default_factory=list)
    rule_applied: Literal["threshold", "top5_supplement"] = "top5_supplement"
    extra_same_project: Optional[RankedTarget] = None
    token_usage: TokenUsage = Field(default_factory=TokenUsage)

    def targets(self) -> List[Tuple[str, str]]:
        """Every revision to inspect, extra same-project revision included"""
        keys = [(t.project, t.commit) for t in self.selected]
        if self.extra_same_project is not None:
            keys.append((self.extra_same_project.project, self.extra_same_project.commit))
        return keys
