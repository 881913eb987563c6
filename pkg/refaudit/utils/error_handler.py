"""
Error handling utilities
Exception hierarchy, retry mechanism and diagnostics collection for audit runs
"""
import asyncio
import logging
import time
import traceback
from datetime import datetime, timezone
from functools import wraps
from typing import Any, Callable, Dict, List, Optional

from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)


class AuditError(Exception):
    """Base class for every error raised by the audit pipeline"""
    exit_code = 1


class RetryableError(AuditError):
    """Retryable error"""
    pass


class ConfigError(AuditError):
    """Invalid or inconsistent configuration"""
    exit_code = 2


class CheckoutError(AuditError):
    """Repository checkout is missing or unreadable"""
    exit_code = 5


class PathOutsideCheckoutError(AuditError):
    """A path argument escapes the checkout root"""
    exit_code = 7


class EmptyScopeError(AuditError):
    """A requested file or directory scope does not exist"""
    exit_code = 5


class PatternError(AuditError):
    """A search pattern failed to compile"""
    exit_code = 7

    def __init__(self, message: str, position: Optional[int] = None):
        super().__init__(message)
        self.position = position


class NotFoundError(AuditError):
    """A requested function, document or artifact does not exist"""
    exit_code = 5


class SarifFormatError(AuditError):
    """Malformed SARIF document"""
    exit_code = 7

    def __init__(self, member: str, message: str):
        super().__init__(f"{member}: {message}")
        self.member = member


class SchemaError(AuditError):
    """A persisted document does not match its schema"""
    exit_code = 7

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SchemaMigrationError(AuditError):
    """A persisted document was written with another schema version"""
    exit_code = 7


class StageMissingError(AuditError):
    """An upstream pipeline artifact is absent"""
    exit_code = 5

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class ReferenceDocumentError(AuditError):
    """The reference vulnerability document is invalid"""
    exit_code = 7


class AffectedModulesError(AuditError):
    """No affected module could be recovered for a witness chain"""
    exit_code = 4


class MemoryExistsError(AuditError):
    """Inspection memory already exists and a fresh start was not requested"""
    exit_code = 5


class StateLockError(AuditError):
    """Another process owns the state directory"""
    exit_code = 6


class BackendError(AuditError):
    """Language or embedding backend failure"""
    exit_code = 3


class TransportError(BackendError, RetryableError):
    """Transport-level backend failure, retried with backoff"""
    exit_code = 3


class RequestTooLargeError(BackendError):
    """Predicted request exceeds the context window"""
    exit_code = 3


class SchemaViolationError(BackendError):
    """Backend output does not follow the requested schema"""
    exit_code = 3

    def __init__(self, message: str, raw_output: str = ""):
        super().__init__(message)
        self.raw_output = raw_output


class EmbeddingError(BackendError):
    """Embedding backend failure"""
    exit_code = 3


class VerificationError(AuditError):
    """A candidate cannot be verified"""
    exit_code = 4


class SandboxUnavailableError(AuditError):
    """The configured sandbox cannot be used"""
    exit_code = 4


def async_retry(max_attempts: int = 3,
                delay: float = 1.0,
                backoff: float = 2.0,
                exceptions: tuple = (RetryableError,)):
    """
    Async retry decorator

    Args:
        max_attempts: Maximum attempts, including the first call
        delay: Initial delay
        backoff: Backoff multiplier
        exceptions: Exception types to retry
    """

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        async def wrapper(*args, **kwargs):
            last_exception = None
            current_delay = delay

            for attempt in range(max_attempts):
                try:
                    return await func(*args, **kwargs)
                except exceptions as e:
                    last_exception = e

                    if attempt == max_attempts - 1:
                        break

                    logger.warning(
                        f"Attempt {attempt + 1}/{max_attempts} failed for {func.__name__}: {e}. "
                        f"Retrying in {current_delay}s..."
                    )

                    await asyncio.sleep(current_delay)
                    current_delay *= backoff

            logger.error(f"All {max_attempts} attempts failed for {func.__name__}")
            raise last_exception

        return wrapper

    return decorator


def log_performance(threshold: float = 30.0) -> Callable:
    """Stage timing decorator, warns when a stage runs longer than threshold seconds"""

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        async def wrapper(*args, **kwargs):
            start_time = time.monotonic()
            try:
                result = await func(*args, **kwargs)
            except Exception as e:
                execution_time = time.monotonic() - start_time
                logger.error(f"{func.__name__} failed after {execution_time:.3f}s: {e}")
                raise

            execution_time = time.monotonic() - start_time
            if execution_time > threshold:
                logger.warning(f"{func.__name__} took {execution_time:.2f}s to execute")
            else:
                logger.debug(f"{func.__name__} executed in {execution_time:.3f}s")
            return result

        return wrapper

    return decorator


class Diagnostic(BaseModel):
    """A non-fatal problem recorded during a run"""
    stage: str
    context: str = ""
    error_type: str = ""
    message: str
    timestamp: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


class DiagnosticsCollector:
    """Bounded collector of non-fatal problems, persisted with the artifact it belongs to"""

    def __init__(self, stage: str, max_entries: int = 200):
        self.stage = stage
        self.max_entries = max_entries
        self.entries: List[Diagnostic] = []
        self.counts: Dict[str, int] = {}

    def add(self, message: str, context: str = "", error: Optional[BaseException] = None):
        """Record a diagnostic and log it as a warning"""
        entry = Diagnostic(
            stage=self.stage,
            context=context,
            error_type=type(error).__name__ if error else "",
            message=message if not error else f"{message}: {error}",
        )
        logger.warning(f"[{self.stage}] {entry.message}" + (f" ({context})" if context else ""))
        if error is not None:
            logger.debug(f"Traceback: {''.join(traceback.format_exception(error))}")

        self.entries.append(entry)
        if len(self.entries) > self.max_entries:
            self.entries.pop(0)

        self._count(entry)

    def _count(self, entry: Diagnostic):
        key = f"{entry.error_type or 'note'}:{entry.context}"
        self.counts[key] = self.counts.get(key, 0) + 1

    def extend(self, entries: List[Diagnostic]):
        """Merge diagnostics produced elsewhere"""
        for entry in entries:
            self.entries.append(entry)
            self._count(entry)
        del self.entries[:-self.max_entries]

    def summary(self) -> Dict[str, Any]:
        """Get diagnostics summary"""
        return {
            "total": len(self.entries),
            "counts": self.counts,
            "recent": [e.message for e in self.entries[-5:]],
        }
