"""
Inspection data models
Priority partition, inspection memory Z, candidates and shared public memory
"""
from datetime import datetime, timezone
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator

from refaudit.models.schemas import SCHEMA_VERSION, ChainRole, TokenUsage
from refaudit.utils.error_handler import Diagnostic

UNASSIGNED_MODULE = "unassigned"


class PromotionReason(str, Enum):
    NAME_MATCH = "name_match"
    EMBEDDING = "embedding"
    CALLER_OF_P1 = "caller_of_p1"
    CALLEE_OF_P1 = "callee_of_p1"
    REMAINDER = "remainder"


class PromotionEntry(BaseModel):
    module: str
    reason: PromotionReason
    similarity: Optional[float] = None


class PriorityPartition(BaseModel):
    """P1 / P2 / P3 over the target's modules"""
    p1: List[str] = Field(default_factory=list)
    p2: List[str] = Field(default_factory=list)
    p3: List[str] = Field(default_factory=list)
    promotion_log: List[PromotionEntry] = Field(default_factory=list)
    degraded: bool = False

    @model_validator(mode="after")
    def _disjoint_and_logged(self):
        p1, p2, p3 = set(self.p1), set(self.p2), set(self.p3)
        if p1 & p2 or p1 & p3 or p2 & p3:
            raise ValueError("priority tiers must be pairwise disjoint")
        reasons: Dict[str, set] = {}
        for entry in self.promotion_log:
            reasons.setdefault(entry.module, set()).add(entry.reason)
        for module in p1:
            if not reasons.get(module, set()) & {PromotionReason.NAME_MATCH, PromotionReason.EMBEDDING}:
                raise ValueError(f"p1 module {module} lacks a name or embedding promotion")
        for module in p2:
            if not reasons.get(module, set()) & {PromotionReason.CALLER_OF_P1, PromotionReason.CALLEE_OF_P1}:
                raise ValueError(f"p2 module {module} lacks a caller/callee promotion")
        return self

    def tier_of(self, module: str) -> int:
        if module in self.p1:
            return 1
        if module in self.p2:
            return 2
        return 3

    @property
    def universe(self) -> List[str]:
        return sorted(set(self.p1) | set(self.p2) | set(self.p3))


class FileState(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"


class FileStatus(BaseModel):
    state: FileState = FileState.PENDING
    reason: Optional[str] = None


class ScopeBoundary(BaseModel):
    """Critical scope and stop policy of one inspection run"""
    critical_tiers: List[int] = Field(default_factory=lambda: [1, 2])
    critical_files: List[str] = Field(default_factory=list)
    scope_order: List[str] = Field(default_factory=list)
    stop_policy: str = "stop early only when every priority 1 and priority 2 file is completed"


class PathStep(BaseModel):
    role: ChainRole
    file: str
    function: Optional[str] = None
    line: Optional[int] = None
    description: str = ""


class CandidateLocation(BaseModel):
    file: str
    start_line: int = Field(ge=1)
    end_line: int = Field(ge=1)
    function: Optional[str] = None

    def overlaps(self, other: "CandidateLocation") -> bool:
        return (self.file == other.file
                and self.start_line <= other.end_line
                and other.start_line <= self.end_line)


Confidence = Literal["low", "medium", "high"]
CONFIDENCE_RANK = {"low": 0, "medium": 1, "high": 2}


class Candidate(BaseModel):
    """A potential variant awaiting verification: location, path narrative, static evidence"""
    id: str
    location: CandidateLocation
    path: List[PathStep] = Field(min_length=2)
    sink: str
    static_evidence: List[str] = Field(default_factory=list)
    confidence: Confidence = "medium"
    reference_advisory: str
    iteration: int = 0

    @model_validator(mode="after")
    def _names_source_and_sink(self):
        roles = [step.role for step in self.path]
        if ChainRole.SOURCE not in roles or ChainRole.SINK not in roles:
            raise ValueError("path narrative must name a source and a sink")
        return self

    @property
    def path_narrative(self) -> str:
        return " -> ".join(
            f"[{s.role.value}] {s.file}:{s.function or '?'} {s.description}".strip() for s in self.path
        )


class IterationRecord(BaseModel):
    index: int
    tool_calls: int = 0
    ended_by: Literal["no_tool_calls", "completed", "turn_budget", "backend_error"] = "no_tool_calls"
    new_candidates: List[str] = Field(default_factory=list)
    completed_files: List[str] = Field(default_factory=list)
    compactions: int = 0


class InspectionMemory(BaseModel):
    """Z: the externalized audit state of one (advisory, target revision) run"""
    schema_version: int = SCHEMA_VERSION
    advisory_id: str
    project: str
    commit: str
    file_status: Dict[str, FileStatus] = Field(default_factory=dict)
    module_of: Dict[str, List[str]] = Field(default_factory=dict)
    file_tier: Dict[str, int] = Field(default_factory=dict)
    priorities: PriorityPartition
    candidates: List[Candidate] = Field(default_factory=list)
    scope_boundary: ScopeBoundary = Field(default_factory=ScopeBoundary)
    iteration_count: int = 0
    max_iterations: int = Field(default=3, ge=1)
    rejected_hypotheses: List[str] = Field(default_factory=list)
    iterations: List[IterationRecord] = Field(default_factory=list)
    finished: bool = False
    token_usage: TokenUsage = Field(default_factory=TokenUsage)
    diagnostics: List[Diagnostic] = Field(default_factory=list)

    @model_validator(mode="after")
    def _bounded_iterations(self):
        if self.iteration_count > self.max_iterations:
            raise ValueError("iteration_count exceeds max_iterations")
        return self

    @property
    def candidate_ids(self) -> List[str]:
        return [c.id for c in self.candidates]

    def candidate(self, candidate_id: str) -> Candidate:
        for candidate in self.candidates:
            if candidate.id == candidate_id:
                return candidate
        raise KeyError(candidate_id)

    def mark_in_progress(self, file: str) -> bool:
        status = self.file_status.get(file)
        if status is None or status.state != FileState.PENDING:
            return False
        status.state = FileState.IN_PROGRESS
        return True

    def mark_completed(self, file: str, reason: str) -> bool:
        """Complete a file; completed files never return to pending"""
        status = self.file_status.get(file)
        if status is None or status.state == FileState.COMPLETED:
            return False
        status.state = FileState.COMPLETED
        status.reason = reason
        return True

    def completed_files(self) -> List[str]:
        return [f for f, s in self.file_status.items() if s.state == FileState.COMPLETED]

    def remaining_files(self, tier: Optional[int] = None) -> List[str]:
        """Files not yet completed, in scope order"""
        return [
            f for f in self.scope_boundary.scope_order
            if self.file_status[f].state != FileState.COMPLETED
            and (tier is None or self.file_tier.get(f) == tier)
        ]

    def critical_scope_done(self) -> bool:
        return all(
            self.file_status[f].state == FileState.COMPLETED
            for f in self.scope_boundary.critical_files
        )

    def coverage(self) -> Dict[str, Dict[str, int]]:
        """Completed / total file counts per priority tier"""
        summary: Dict[str, Dict[str, int]] = {}
        for tier in (1, 2, 3):
            files = [f for f, t in self.file_tier.items() if t == tier]
            done = [f for f in files if self.file_status[f].state == FileState.COMPLETED]
            summary[f"p{tier}"] = {"completed": len(done), "total": len(files)}
        return summary


class SharedMemoryEntry(BaseModel):
    """Compact observation reusable by later runs over the same target"""
    project: str
    scope_key: str
    observation: str
    run_id: str
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
