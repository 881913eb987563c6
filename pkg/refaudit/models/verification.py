"""
Verification data models
Claim checks, conclusions, PoC records, findings and report documents
"""
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator

from refaudit.models.inspection import Candidate
from refaudit.models.llm import LedgerSnapshot
from refaudit.models.schemas import SCHEMA_VERSION, TokenUsage
from refaudit.utils.error_handler import Diagnostic


class ConclusionKind(str, Enum):
    EXPLOITABLE = "exploitable"
    CONDITIONALLY_EXPLOITABLE = "conditionally_exploitable"
    LIBRARY_RISK = "library_risk"
    NON_EXPLOITABLE = "non_exploitable"


EXPLOIT_KINDS = (ConclusionKind.EXPLOITABLE, ConclusionKind.CONDITIONALLY_EXPLOITABLE)


class Conclusion(BaseModel):
    kind: ConclusionKind
    rationale: str = ""
    preconditions: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _preconditions_iff_conditional(self):
        conditional = self.kind == ConclusionKind.CONDITIONALLY_EXPLOITABLE
        if conditional and not self.preconditions:
            raise ValueError("conditionally_exploitable requires at least one precondition")
        if not conditional and self.preconditions:
            raise ValueError("only conditionally_exploitable carries preconditions")
        return self


class ClaimKind(str, Enum):
    SOURCE_EXISTS = "source_exists"
    PROPAGATION_EXISTS = "propagation_exists"
    SINK_EXISTS = "sink_exists"
    GUARD_MISSING = "guard_missing"
    TRUST_BOUNDARY_CROSSED = "trust_boundary_crossed"


class Verdict(str, Enum):
    YES = "yes"
    NO = "no"
    UNRESOLVED = "unresolved"


class ClaimCheck(BaseModel):
    claim: ClaimKind
    statement: str
    verified: Verdict
    evidence: str = ""


class PocOutcome(str, Enum):
    REACHED_SINK = "reached_sink"
    ERROR = "error"
    BLOCKED = "blocked"


class SandboxResult(BaseModel):
    """What one sandboxed script run produced"""
    exit_code: int = 0
    output: str = ""
    timed_out: bool = False


class PocAttempt(BaseModel):
    script_description: str
    log_digest: str
    outcome: PocOutcome
    log_path: Optional[str] = None


class PocRecord(BaseModel):
    attempts: List[PocAttempt] = Field(default_factory=list)
    max_attempts: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _bounded_and_terminated(self):
        if len(self.attempts) > self.max_attempts:
            raise ValueError("attempts exceed max_attempts")
        for attempt in self.attempts[:-1]:
            if attempt.outcome == PocOutcome.REACHED_SINK:
                raise ValueError("a reached_sink outcome terminates attempts")
        return self

    @property
    def reached_sink(self) -> bool:
        return any(a.outcome == PocOutcome.REACHED_SINK for a in self.attempts)


class Finding(BaseModel):
    """A candidate after verification"""
    candidate: Candidate
    conclusion: Optional[Conclusion] = None
    static_checks: List[ClaimCheck] = Field(default_factory=list)
    poc: Optional[PocRecord] = None
    reference_advisory: str
    static_only: bool = False
    unverifiable: bool = False
    error: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.unverifiable:
            return self
        if self.conclusion is None:
            raise ValueError("a verified finding carries a conclusion")
        if self.conclusion.kind in EXPLOIT_KINDS and any(c.verified == Verdict.NO for c in self.static_checks):
            raise ValueError("exploitable conclusions require no refuted claim")
        if self.conclusion.kind == ConclusionKind.EXPLOITABLE and any(
                c.verified != Verdict.YES for c in self.static_checks):
            raise ValueError("exploitable requires every claim verified")
        return self


class FindingSet(BaseModel):
    """Persisted verification output of one target revision"""
    schema_version: int = SCHEMA_VERSION
    advisory_id: str
    project: str
    commit: str
    findings: List[Finding] = Field(default_factory=list)
    sandbox_mode: str = "off"
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    diagnostics: List[Diagnostic] = Field(default_factory=list)


class ClaimRow(BaseModel):
    claim: str
    verified: str
    evidence: str


class FindingReport(BaseModel):
    candidate_id: str
    location: str
    function: Optional[str] = None
    path_narrative: str
    conclusion: str
    rationale: str = ""
    preconditions: List[str] = Field(default_factory=list)
    claims: List[ClaimRow] = Field(default_factory=list)
    poc_digests: List[str] = Field(default_factory=list)
    poc_outcomes: List[str] = Field(default_factory=list)
    static_only: bool = False


class TargetReport(BaseModel):
    """Report document for one (advisory, target revision)"""
    schema_version: int = SCHEMA_VERSION
    advisory_id: str
    project: str
    commit: str
    stages: Dict[str, Literal["done", "missing"]] = Field(default_factory=dict)
    clean_scan: bool = False
    static_only: bool = False
    coverage: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    iterations: int = 0
    counts: Dict[str, int] = Field(default_factory=dict)
    findings: List[FindingReport] = Field(default_factory=list)
    unverifiable: List[str] = Field(default_factory=list)
    token_ledger: LedgerSnapshot = Field(default_factory=LedgerSnapshot)


class ConsolidatedReport(BaseModel):
    """Cross-target report for one advisory"""
    schema_version: int = SCHEMA_VERSION
    advisory_id: str
    reference_project: Optional[str] = None
    reference_commit: Optional[str] = None
    stages: Dict[str, Literal["done", "missing"]] = Field(default_factory=dict)
    targets: List[TargetReport] = Field(default_factory=list)
    counts: Dict[str, int] = Field(default_factory=dict)
    token_ledger: LedgerSnapshot = Field(default_factory=LedgerSnapshot)
