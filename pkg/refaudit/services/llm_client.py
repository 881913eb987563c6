"""
Language model gateway
Chat and embedding backends (HTTP, scripted, hashing), schema-checked tool calls and token accounting
"""
import asyncio
import hashlib
import json
import logging
import math
import re
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import aiohttp
import numpy as np
from pydantic import BaseModel, Field, ValidationError

from refaudit.config import RunConfig, settings
from refaudit.models.llm import (
    BackendReply,
    ChatMessage,
    ChatResult,
    DecodingConfig,
    EmbeddingResult,
    RawToolCall,
    TokenLedger,
    ToolCall,
)
from refaudit.models.schemas import TokenUsage
from refaudit.models.verification import SandboxResult
from refaudit.utils.error_handler import (
    BackendError,
    ConfigError,
    EmbeddingError,
    RequestTooLargeError,
    SchemaViolationError,
    TransportError,
    async_retry,
)

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

CHARS_PER_TOKEN = 3.5
ESTIMATE_MARGIN = 1.1
MESSAGE_OVERHEAD = 4

_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


def estimate_tokens(text: str) -> int:
    """Over-estimate of the backend token count: chars / 3.5 plus 10%"""
    if not text:
        return 0
    return math.ceil(len(text) / CHARS_PER_TOKEN * ESTIMATE_MARGIN)


def estimate_message(message: ChatMessage) -> int:
    size = MESSAGE_OVERHEAD + estimate_tokens(message.content)
    for call in message.tool_calls:
        size += estimate_tokens(call.name) + estimate_tokens(call.arguments)
    return size


def estimate_request(messages: List[ChatMessage], tool_schemas: Optional[List[Dict[str, Any]]] = None) -> int:
    """Predicted size of one request"""
    size = sum(estimate_message(m) for m in messages)
    if tool_schemas:
        size += estimate_tokens(json.dumps(tool_schemas, sort_keys=True))
    return size


def last_user_content(messages: List[ChatMessage]) -> str:
    for message in reversed(messages):
        if message.role == "user":
            return message.content
    return ""


def prompt_digest(prompt_id: str, user_content: str) -> str:
    return hashlib.sha256(f"{prompt_id}\n{user_content}".encode("utf-8")).hexdigest()


def extract_json(text: str) -> Any:
    """Decode a JSON reply, tolerating a surrounding code fence"""
    text = text.strip()
    match = _FENCE.match(text)
    if match:
        text = match.group(1)
    return json.loads(text)


# --------------------------------------------------------------------------- chat backends

class LanguageBackend(ABC):
    """A chat-completion backend"""

    def __init__(self, name: str, decoding: Optional[DecodingConfig] = None, context_window: int = 65536):
        if context_window <= 0:
            raise ConfigError("context window must be positive")
        self.name = name
        self.decoding = decoding or DecodingConfig()
        self.context_window = context_window

    @abstractmethod
    async def complete(self, messages: List[ChatMessage], prompt_id: str,
                       tool_schemas: Optional[List[Dict[str, Any]]] = None) -> BackendReply:
        """Send one request and return the raw reply"""


class HttpChatBackend(LanguageBackend):
    """OpenAI-compatible /chat/completions endpoint"""

    def __init__(self, endpoint: str, model: str, decoding: Optional[DecodingConfig] = None,
                 context_window: int = 65536, timeout_s: float = 120.0, fallback_key: bool = False):
        super().__init__(f"http:{model}", decoding, context_window)
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = aiohttp.ClientTimeout(total=timeout_s)
        self.headers = settings.auth_headers(fallback=fallback_key)

    def _payload(self, messages: List[ChatMessage], tool_schemas: Optional[List[Dict[str, Any]]]) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "model": self.model,
            "messages": [_wire_message(m) for m in messages],
            "temperature": self.decoding.temperature,
            "top_p": self.decoding.top_p,
        }
        if tool_schemas:
            payload["tools"] = [
                {"type": "function", "function": {k: v for k, v in s.items() if k != "type"}}
                for s in tool_schemas
            ]
        return payload

    @async_retry(max_attempts=3, delay=1.0, backoff=2.0, exceptions=(TransportError,))
    async def complete(self, messages: List[ChatMessage], prompt_id: str,
                       tool_schemas: Optional[List[Dict[str, Any]]] = None) -> BackendReply:
        url = f"{self.endpoint}/chat/completions"
        try:
            async with aiohttp.ClientSession(timeout=self.timeout, headers=self.headers) as session:
                async with session.post(url, json=self._payload(messages, tool_schemas)) as response:
                    if response.status == 429 or response.status >= 500:
                        raise TransportError(f"{url} returned status {response.status}")
                    if response.status != 200:
                        body = await response.text()
                        raise BackendError(f"{url} returned status {response.status}: {body[:200]}")
                    data = await response.json()
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            raise TransportError(f"Request to {url} failed: {e}")

        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError):
            raise BackendError(f"{url} returned a reply without choices")

        tool_calls = [
            RawToolCall(
                id=call.get("id") or f"call_{index}",
                name=call.get("function", {}).get("name", ""),
                arguments=call.get("function", {}).get("arguments") or "{}",
            )
            for index, call in enumerate(message.get("tool_calls") or [])
        ]
        usage = data.get("usage")
        return BackendReply(
            content=message.get("content") or "",
            tool_calls=tool_calls,
            usage=TokenUsage(
                input_tokens=usage.get("prompt_tokens", 0),
                output_tokens=usage.get("completion_tokens", 0),
            ) if usage else None,
        )


def _wire_message(message: ChatMessage) -> Dict[str, Any]:
    wire: Dict[str, Any] = {"role": message.role, "content": message.content}
    if message.tool_calls:
        wire["tool_calls"] = [
            {"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}
            for c in message.tool_calls
        ]
    if message.tool_call_id:
        wire["tool_call_id"] = message.tool_call_id
    if message.name:
        wire["name"] = message.name
    return wire


class ScriptedToolCall(BaseModel):
    id: Optional[str] = None
    name: str
    arguments: Any = Field(default_factory=dict)


class ScriptedReply(BaseModel):
    content: str = ""
    tool_calls: List[ScriptedToolCall] = Field(default_factory=list)
    usage: Optional[TokenUsage] = None


class ScriptedEntry(BaseModel):
    prompt_id: str
    key: Optional[str] = None
    contains: Optional[str] = None
    replies: List[ScriptedReply] = Field(default_factory=list)


class ScriptedFixture(BaseModel):
    """Versioned scripted-backend document"""
    schema_version: int = 1
    chat: List[ScriptedEntry] = Field(default_factory=list)
    embeddings: Dict[str, List[float]] = Field(default_factory=dict)
    sandbox: List[SandboxResult] = Field(default_factory=list)


def load_scripted_fixture(path: Path) -> ScriptedFixture:
    try:
        return ScriptedFixture.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Scripted fixture not found: {path}")
    except ValidationError as e:
        raise ConfigError(f"Invalid scripted fixture {path}: {e.errors()[0]['msg']}")


class ScriptedChatBackend(LanguageBackend):
    """
    Deterministic backend for offline runs

    The entry is chosen by digest of (prompt id, last user message), then by prompt id plus
    a `contains` substring of the last user message, then by a bare prompt-id default.
    Within an entry, the reply index is the number of assistant messages since that user message.
    """

    def __init__(self, fixture: ScriptedFixture, context_window: int = 65536):
        super().__init__("scripted", DecodingConfig(), context_window)
        self.entries = tuple(fixture.chat)
        self.calls: List[Tuple[str, str]] = []

    @classmethod
    def from_file(cls, path: Path, context_window: int = 65536) -> "ScriptedChatBackend":
        return cls(load_scripted_fixture(path), context_window)

    def _entry(self, prompt_id: str, user_content: str) -> Optional[ScriptedEntry]:
        digest = prompt_digest(prompt_id, user_content)
        for entry in self.entries:
            if entry.key == digest:
                return entry
        for entry in self.entries:
            if entry.prompt_id == prompt_id and entry.key is None and entry.contains \
                    and entry.contains in user_content:
                return entry
        for entry in self.entries:
            if entry.prompt_id == prompt_id and entry.key is None and entry.contains is None:
                return entry
        return None

    async def complete(self, messages: List[ChatMessage], prompt_id: str,
                       tool_schemas: Optional[List[Dict[str, Any]]] = None) -> BackendReply:
        user_content = last_user_content(messages)
        self.calls.append((prompt_id, user_content))
        entry = self._entry(prompt_id, user_content)
        if entry is None:
            raise BackendError(f"No scripted reply for prompt {prompt_id}")

        index = 0
        for message in reversed(messages):
            if message.role == "user":
                break
            if message.role == "assistant":
                index += 1
        if index >= len(entry.replies):
            return BackendReply()

        reply = entry.replies[index]
        return BackendReply(
            content=reply.content,
            tool_calls=[
                RawToolCall(
                    id=call.id or f"call_{index}_{n}",
                    name=call.name,
                    arguments=call.arguments if isinstance(call.arguments, str)
                    else json.dumps(call.arguments, sort_keys=True),
                )
                for n, call in enumerate(reply.tool_calls)
            ],
            usage=reply.usage,
        )


# --------------------------------------------------------------------------- gateway

class LLMGateway:
    """Single entry point for chat exchanges: size check, retries, fallback, tool validation, ledger"""

    def __init__(self, primary: LanguageBackend, ledger: Optional[TokenLedger] = None,
                 fallback: Optional[LanguageBackend] = None):
        self.primary = primary
        self.fallback = fallback
        self.ledger = ledger or TokenLedger()
        self.context_window = primary.context_window

    async def _complete(self, messages: List[ChatMessage], prompt_id: str,
                        tool_schemas: Optional[List[Dict[str, Any]]]) -> BackendReply:
        try:
            return await self.primary.complete(messages, prompt_id, tool_schemas)
        except BackendError as e:
            if self.fallback is None:
                raise
            logger.warning(f"Primary backend failed for {prompt_id} ({e}), using fallback {self.fallback.name}")
            return await self.fallback.complete(messages, prompt_id, tool_schemas)

    def _usage(self, messages: List[ChatMessage], reply: BackendReply,
               tool_schemas: Optional[List[Dict[str, Any]]]) -> TokenUsage:
        if reply.usage is not None:
            return reply.usage
        output = estimate_tokens(reply.content) + sum(
            estimate_tokens(c.name) + estimate_tokens(c.arguments) for c in reply.tool_calls)
        return TokenUsage(input_tokens=estimate_request(messages, tool_schemas), output_tokens=output)

    async def _exchange(self, messages: List[ChatMessage], prompt_id: str, stage: str,
                        tool_schemas: Optional[List[Dict[str, Any]]]) -> Tuple[BackendReply, TokenUsage]:
        predicted = estimate_request(messages, tool_schemas)
        if predicted > self.context_window:
            raise RequestTooLargeError(
                f"Request for {prompt_id} needs ~{predicted} tokens, window is {self.context_window}")
        reply = await self._complete(messages, prompt_id, tool_schemas)
        usage = self._usage(messages, reply, tool_schemas)
        self.ledger.record(stage, prompt_id, usage)
        return reply, usage

    async def chat(self, messages: List[ChatMessage], prompt_id: str, stage: str,
                   tools=None) -> ChatResult:
        """
        One chat exchange

        Args:
            messages: Conversation so far
            prompt_id: Stable prompt identifier (scripted keying, ledger)
            stage: Ledger stage
            tools: Optional ToolRegistry; calls are validated against it before being returned

        Returns:
            ChatResult with only valid tool calls; malformed calls get one correction round
        """
        tool_schemas = tools.get_function_schemas() if tools is not None else None
        reply, usage = await self._exchange(messages, prompt_id, stage, tool_schemas)
        transcript: List[ChatMessage] = []
        diagnostics: List[str] = []

        valid, invalid = self._validate(reply.tool_calls, tools)
        if invalid:
            logger.warning(f"{len(invalid)} malformed tool call(s) for {prompt_id}, asking for a correction")
            transcript.append(ChatMessage(role="assistant", content=reply.content, tool_calls=reply.tool_calls))
            errors = dict(invalid)
            for call in reply.tool_calls:
                note = errors.get(call.id) or "not executed: resend every tool call with valid arguments"
                transcript.append(ChatMessage(role="tool", tool_call_id=call.id, name=call.name,
                                              content=json.dumps({"error": note})))
            reply, extra = await self._exchange(messages + transcript, prompt_id, stage, tool_schemas)
            usage = usage + extra
            valid, invalid = self._validate(reply.tool_calls, tools)
            for call_id, error in invalid:
                diagnostics.append(f"Dropped tool call {call_id}: {error}")
                logger.warning(f"Dropped tool call {call_id} for {prompt_id}: {error}")

        kept = {c.id for c in valid}
        message = ChatMessage(
            role="assistant",
            content=reply.content,
            tool_calls=[c for c in reply.tool_calls if c.id in kept],
        )
        transcript.append(message)
        return ChatResult(message=message, tool_calls=valid, usage=usage,
                          diagnostics=diagnostics, transcript=transcript)

    @staticmethod
    def _validate(raw_calls: List[RawToolCall], tools) -> Tuple[List[ToolCall], List[Tuple[str, str]]]:
        valid: List[ToolCall] = []
        invalid: List[Tuple[str, str]] = []
        for call in raw_calls:
            if tools is None:
                invalid.append((call.id, "no tools are available for this request"))
                continue
            try:
                valid.append(tools.validate_call(call))
            except ValueError as e:
                invalid.append((call.id, str(e)))
        return valid, invalid

    async def complete_json(self, messages: List[ChatMessage], prompt_id: str, stage: str,
                            model: Type[ModelT], retries: int = 1) -> Tuple[ModelT, TokenUsage]:
        """
        Exchange constrained to a JSON object matching `model`

        Raises:
            SchemaViolationError: still invalid after `retries` correction rounds; carries the raw output
        """
        conversation = list(messages)
        total = TokenUsage()
        raw = ""
        error = ""
        for attempt in range(retries + 1):
            result = await self.chat(conversation, prompt_id, stage)
            total = total + result.usage
            raw = result.message.content
            try:
                return model.model_validate(extract_json(raw)), total
            except (json.JSONDecodeError, ValidationError, TypeError) as e:
                error = _schema_error_text(e)
                logger.warning(f"Reply for {prompt_id} violates its schema (attempt {attempt + 1}): {error}")
            conversation = conversation + [
                ChatMessage(role="assistant", content=raw),
                ChatMessage(role="user", content=(
                    f"Your previous reply did not follow the required JSON schema ({error}). "
                    "Reply again with only the corrected JSON object."
                )),
            ]
        raise SchemaViolationError(f"{prompt_id}: reply violates the schema after {retries + 1} attempts: {error}",
                                   raw_output=raw)


def _schema_error_text(error: Exception) -> str:
    if isinstance(error, ValidationError):
        first = error.errors()[0]
        return f"{'.'.join(str(p) for p in first['loc']) or '$'}: {first['msg']}"
    return str(error)


# --------------------------------------------------------------------------- embedding backends

class EmbeddingBackend(ABC):
    """Text embedder returning unit-normalized vectors"""

    async def embed(self, texts: List[str]) -> EmbeddingResult:
        if not texts:
            raise ValueError("embed requires a non-empty batch")
        vectors, usage = await self._embed_raw(texts)
        matrix = np.asarray(vectors, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(texts):
            raise EmbeddingError(f"Embedder returned {matrix.shape} for {len(texts)} texts")
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise EmbeddingError("Embedder returned a zero or non-finite vector")
        return EmbeddingResult(vectors=(matrix / norms).tolist(), usage=usage)

    @abstractmethod
    async def _embed_raw(self, texts: List[str]) -> Tuple[List[List[float]], TokenUsage]:
        """Raw vectors in batch order"""


class HttpEmbeddingBackend(EmbeddingBackend):
    """OpenAI-compatible /embeddings endpoint"""

    def __init__(self, endpoint: str, model: str, timeout_s: float = 120.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout = aiohttp.ClientTimeout(total=timeout_s)

    @async_retry(max_attempts=3, delay=1.0, backoff=2.0, exceptions=(TransportError,))
    async def _embed_raw(self, texts: List[str]) -> Tuple[List[List[float]], TokenUsage]:
        url = f"{self.endpoint}/embeddings"
        try:
            async with aiohttp.ClientSession(timeout=self.timeout, headers=settings.auth_headers()) as session:
                async with session.post(url, json={"model": self.model, "input": texts}) as response:
                    if response.status == 429 or response.status >= 500:
                        raise TransportError(f"{url} returned status {response.status}")
                    if response.status != 200:
                        raise EmbeddingError(f"{url} returned status {response.status}")
                    data = await response.json()
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            raise TransportError(f"Request to {url} failed: {e}")

        try:
            rows = sorted(data["data"], key=lambda row: row.get("index", 0))
            vectors = [row["embedding"] for row in rows]
        except (KeyError, TypeError):
            raise EmbeddingError(f"{url} returned an unexpected payload")
        usage = data.get("usage") or {}
        return vectors, TokenUsage(input_tokens=usage.get("prompt_tokens", 0))


class HashingEmbeddingBackend(EmbeddingBackend):
    """Offline embedder: signed feature hashing of word unigrams and bigrams"""

    def __init__(self, dimensions: int = 256):
        self.dimensions = dimensions

    def vector(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimensions, dtype=np.float64)
        words = re.findall(r"[a-z0-9]+", text.lower())
        features = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
        if not features:
            features = [text]
        for feature in features:
            digest = hashlib.sha1(feature.encode("utf-8")).digest()
            index = int.from_bytes(digest[:4], "big") % self.dimensions
            vector[index] += 1.0 if digest[4] % 2 == 0 else -1.0
        if not np.any(vector):
            vector[0] = 1.0
        return vector

    async def _embed_raw(self, texts: List[str]) -> Tuple[List[List[float]], TokenUsage]:
        vectors = [self.vector(t).tolist() for t in texts]
        return vectors, TokenUsage(input_tokens=sum(estimate_tokens(t) for t in texts))


class ScriptedEmbeddingBackend(EmbeddingBackend):
    """Lookup table of vectors, falling back to another embedder for unknown texts"""

    def __init__(self, table: Dict[str, List[float]], fallback: Optional[EmbeddingBackend] = None):
        self.table = dict(table)
        self.fallback = fallback

    async def _embed_raw(self, texts: List[str]) -> Tuple[List[List[float]], TokenUsage]:
        missing = [t for t in texts if t not in self.table]
        extra: Dict[str, List[float]] = {}
        if missing:
            if self.fallback is None:
                raise EmbeddingError(f"No scripted embedding for {missing[0][:60]!r}")
            result = await self.fallback.embed(missing)
            extra = dict(zip(missing, result.vectors))
        vectors = [self.table[t] if t in self.table else extra[t] for t in texts]
        return vectors, TokenUsage()


# --------------------------------------------------------------------------- factories

def build_gateway(config: RunConfig, ledger: Optional[TokenLedger] = None) -> LLMGateway:
    """Create the chat gateway described by the run configuration"""
    decoding = DecodingConfig(temperature=config.temperature, top_p=config.top_p)
    if config.chat_backend == "scripted":
        if config.scripted_fixture is None:
            raise ConfigError("chat_backend=scripted requires scripted_fixture")
        primary: LanguageBackend = ScriptedChatBackend.from_file(config.scripted_fixture, config.context_window)
    else:
        primary = HttpChatBackend(config.chat_endpoint, config.chat_model, decoding,
                                  config.context_window, config.request_timeout_s)

    fallback = None
    if config.chat_backend == "http" and config.fallback_endpoint:
        fallback = HttpChatBackend(config.fallback_endpoint, config.fallback_model or config.chat_model,
                                   decoding, config.context_window, config.request_timeout_s, fallback_key=True)
    return LLMGateway(primary, ledger, fallback)


def build_embedder(config: RunConfig) -> EmbeddingBackend:
    """Create the embedding backend described by the run configuration"""
    if config.embedding_backend == "hashing":
        return HashingEmbeddingBackend()
    if config.embedding_backend == "scripted":
        table: Dict[str, List[float]] = {}
        if config.scripted_fixture is not None:
            table = load_scripted_fixture(config.scripted_fixture).embeddings
        return ScriptedEmbeddingBackend(table, fallback=HashingEmbeddingBackend())
    return HttpEmbeddingBackend(config.embedding_endpoint, config.embedding_model, config.request_timeout_s)
