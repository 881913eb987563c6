"""
Language-model exchange models
Chat messages, tool calls, tool schemas and token accounting
"""
import threading
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from refaudit.models.schemas import TokenUsage

STAGES = ("profiling", "vuln-extraction", "selection", "inspection", "verification")


class ToolCall(BaseModel):
    """A validated tool call ready for dispatch"""
    id: str
    name: str
    arguments: Dict[str, Any] = Field(default_factory=dict)


class RawToolCall(BaseModel):
    """A tool call as emitted by the backend, arguments not yet validated"""
    id: str
    name: str
    arguments: str = "{}"


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant", "tool"]
    content: str = ""
    tool_calls: List[RawToolCall] = Field(default_factory=list)
    tool_call_id: Optional[str] = None
    name: Optional[str] = None


class DecodingConfig(BaseModel):
    temperature: float = 0.1
    top_p: float = 0.9


class FunctionSchema(BaseModel):
    """Function schema definition"""
    name: str
    type: str = "function"
    description: Optional[str] = None
    parameters: Dict[str, Any]


class BackendReply(BaseModel):
    """What a backend returns for one request"""
    content: str = ""
    tool_calls: List[RawToolCall] = Field(default_factory=list)
    usage: Optional[TokenUsage] = None


class ChatResult(BaseModel):
    """Assistant message plus validated tool calls and usage of the whole exchange"""
    message: ChatMessage
    tool_calls: List[ToolCall] = Field(default_factory=list)
    usage: TokenUsage = Field(default_factory=TokenUsage)
    diagnostics: List[str] = Field(default_factory=list)
    # correction round-trips produced inside the exchange, final message last
    transcript: List[ChatMessage] = Field(default_factory=list)


class EmbeddingResult(BaseModel):
    vectors: List[List[float]]
    usage: TokenUsage = Field(default_factory=TokenUsage)


class Exchange(BaseModel):
    stage: str
    prompt_id: str
    input_tokens: int
    output_tokens: int


class LedgerSnapshot(BaseModel):
    """Serializable view of a TokenLedger"""
    stages: Dict[str, TokenUsage] = Field(default_factory=dict)
    exchanges: List[Exchange] = Field(default_factory=list)

    @property
    def total(self) -> TokenUsage:
        total = TokenUsage()
        for usage in self.stages.values():
            total = total + usage
        return total

    def merged(self, other: "LedgerSnapshot") -> "LedgerSnapshot":
        stages = {k: v.model_copy() for k, v in self.stages.items()}
        for stage, usage in other.stages.items():
            stages[stage] = stages.get(stage, TokenUsage()) + usage
        return LedgerSnapshot(stages=stages, exchanges=self.exchanges + other.exchanges)


class TokenLedger:
    """Per-stage token counters, updated through serialized increments"""

    def __init__(self):
        self._lock = threading.Lock()
        self._stages: Dict[str, TokenUsage] = {}
        self._exchanges: List[Exchange] = []

    def record(self, stage: str, prompt_id: str, usage: TokenUsage):
        """Record one raw exchange under a stage"""
        if stage not in STAGES:
            raise ValueError(f"Unknown ledger stage: {stage}")
        if usage.input_tokens < 0 or usage.output_tokens < 0:
            raise ValueError("Token counts must be non-negative")
        with self._lock:
            self._stages[stage] = self._stages.get(stage, TokenUsage()) + usage
            self._exchanges.append(Exchange(
                stage=stage,
                prompt_id=prompt_id,
                input_tokens=usage.input_tokens,
                output_tokens=usage.output_tokens,
            ))

    def stage_usage(self, stage: str) -> TokenUsage:
        with self._lock:
            return self._stages.get(stage, TokenUsage()).model_copy()

    def snapshot(self) -> LedgerSnapshot:
        with self._lock:
            return LedgerSnapshot(
                stages={k: v.model_copy() for k, v in self._stages.items()},
                exchanges=list(self._exchanges),
            )
