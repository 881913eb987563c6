"""
State store service
Versioned pipeline documents under the state directory, plus the process lock
"""
import json
import logging
import os
import re
import threading
from pathlib import Path
from typing import Iterator, List, Optional, Type, TypeVar

import psutil
from pydantic import BaseModel, ValidationError

from refaudit.models.inspection import InspectionMemory, SharedMemoryEntry
from refaudit.models.schemas import (
    SCHEMA_VERSION,
    RepositorySemantics,
    TargetSelection,
    VulnerabilitySemantics,
)
from refaudit.models.verification import FindingSet
from refaudit.utils.error_handler import (
    NotFoundError,
    SchemaError,
    SchemaMigrationError,
    StateLockError,
)

logger = logging.getLogger(__name__)

DocumentT = TypeVar("DocumentT", bound=BaseModel)

LOCK_FILE = ".lock"


def safe_component(name: str) -> str:
    """Make a project, commit or advisory id usable as one path component"""
    cleaned = re.sub(r"[^A-Za-z0-9._-]", "_", name).strip(".")
    return cleaned or "_"


def write_atomic(path: Path, text: str):
    """Write through a temporary sibling, then rename over the target"""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_document(path: Path, model: Type[DocumentT]) -> DocumentT:
    """
    Load one versioned document

    Raises:
        NotFoundError: the file does not exist
        SchemaMigrationError: the document was written under another schema version
        SchemaError: the document is corrupt; the message names the offending field
    """
    if not path.is_file():
        raise NotFoundError(f"Document not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"{path} is not valid JSON (line {e.lineno})")
    if not isinstance(raw, dict):
        raise SchemaError("$", f"{path} must hold an object")

    version = raw.get("schema_version")
    if version is None:
        raise SchemaError("schema_version", f"{path} has no schema version")
    if version != SCHEMA_VERSION:
        raise SchemaMigrationError(
            f"{path} uses schema version {version}, this build reads {SCHEMA_VERSION}; "
            f"re-run the producing stage with --fresh"
        )

    try:
        return model.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "$"
        raise SchemaError(field, f"{first['msg']} in {path}")


def write_document(path: Path, document: BaseModel):
    write_atomic(path, document.model_dump_json(indent=2))


class StateLock:
    """Exclusive ownership of a state directory through an O_EXCL lock file"""

    def __init__(self, state_dir: Path):
        self.path = Path(state_dir) / LOCK_FILE
        self.acquired = False

    def acquire(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                owner = self._owner()
                if owner is not None and owner != os.getpid() and psutil.pid_exists(owner):
                    raise StateLockError(f"State directory {self.path.parent} is locked by process {owner}")
                logger.warning(f"Removing stale lock file {self.path} (owner {owner})")
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as f:
                f.write(str(os.getpid()))
            self.acquired = True
            return
        raise StateLockError(f"Could not acquire lock {self.path}")

    def release(self):
        if self.acquired:
            self.path.unlink(missing_ok=True)
            self.acquired = False

    def _owner(self) -> Optional[int]:
        try:
            return int(self.path.read_text().strip())
        except (OSError, ValueError):
            return None

    def __enter__(self) -> "StateLock":
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()


class StateStore:
    """
    Layout:
        profiles/<project>/<commit>.json
        vulns/<advisory>/semantics.json, vulns/<advisory>/selection.json
        memory/<advisory>/<project>/<commit>.json
        shared/<project>.jsonl
        findings/<advisory>/<project>/<commit>/findings.json (+ poc/ logs)
        reports/<advisory>/...
        sarif/<project>/*.sarif  (operator supplied)
    """

    def __init__(self, state_dir: Path):
        self.root = Path(state_dir)
        self._shared_lock = threading.Lock()

    def lock(self) -> StateLock:
        return StateLock(self.root)

    # ------------------------------------------------------------------ profiles

    def profile_path(self, project: str, commit: str) -> Path:
        return self.root / "profiles" / safe_component(project) / f"{safe_component(commit)}.json"

    def has_semantics(self, project: str, commit: str) -> bool:
        return self.profile_path(project, commit).is_file()

    def save_semantics(self, semantics: RepositorySemantics) -> Path:
        path = self.profile_path(semantics.checkout.project_name, semantics.checkout.commit_id)
        write_document(path, semantics)
        logger.info(f"Persisted repository semantics to {path}")
        return path

    def load_semantics(self, project: str, commit: str) -> RepositorySemantics:
        return read_document(self.profile_path(project, commit), RepositorySemantics)

    def iter_semantics(self) -> Iterator[RepositorySemantics]:
        """Every stored profile, ordered by path"""
        base = self.root / "profiles"
        if not base.is_dir():
            return
        for path in sorted(base.glob("*/*.json")):
            yield read_document(path, RepositorySemantics)

    # ------------------------------------------------------------------ vulnerability

    def vuln_dir(self, advisory_id: str) -> Path:
        return self.root / "vulns" / safe_component(advisory_id)

    def has_vuln(self, advisory_id: str) -> bool:
        return (self.vuln_dir(advisory_id) / "semantics.json").is_file()

    def save_vuln(self, semantics: VulnerabilitySemantics) -> Path:
        path = self.vuln_dir(semantics.advisory_id) / "semantics.json"
        write_document(path, semantics)
        return path

    def load_vuln(self, advisory_id: str) -> VulnerabilitySemantics:
        return read_document(self.vuln_dir(advisory_id) / "semantics.json", VulnerabilitySemantics)

    def has_selection(self, advisory_id: str) -> bool:
        return (self.vuln_dir(advisory_id) / "selection.json").is_file()

    def save_selection(self, advisory_id: str, selection: TargetSelection) -> Path:
        path = self.vuln_dir(advisory_id) / "selection.json"
        write_document(path, selection)
        return path

    def load_selection(self, advisory_id: str) -> TargetSelection:
        return read_document(self.vuln_dir(advisory_id) / "selection.json", TargetSelection)

    # ------------------------------------------------------------------ inspection memory

    def memory_path(self, advisory_id: str, project: str, commit: str) -> Path:
        return (self.root / "memory" / safe_component(advisory_id)
                / safe_component(project) / f"{safe_component(commit)}.json")

    def has_memory(self, advisory_id: str, project: str, commit: str) -> bool:
        return self.memory_path(advisory_id, project, commit).is_file()

    def save_memory(self, memory: InspectionMemory) -> Path:
        path = self.memory_path(memory.advisory_id, memory.project, memory.commit)
        write_document(path, memory)
        return path

    def load_memory(self, advisory_id: str, project: str, commit: str) -> InspectionMemory:
        return read_document(self.memory_path(advisory_id, project, commit), InspectionMemory)

    def delete_memory(self, advisory_id: str, project: str, commit: str):
        self.memory_path(advisory_id, project, commit).unlink(missing_ok=True)

    # ------------------------------------------------------------------ shared memory

    def shared_path(self, project: str) -> Path:
        return self.root / "shared" / f"{safe_component(project)}.jsonl"

    def append_shared(self, entries: List[SharedMemoryEntry]):
        """Append-only; appends are serialized through one writer"""
        if not entries:
            return
        with self._shared_lock:
            for entry in entries:
                path = self.shared_path(entry.project)
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "a", encoding="utf-8") as f:
                    f.write(entry.model_dump_json() + "\n")

    def read_shared(self, project: str, scope_key: Optional[str] = None) -> List[SharedMemoryEntry]:
        """Consistent snapshot of the shared log of a project"""
        path = self.shared_path(project)
        if not path.is_file():
            return []
        with self._shared_lock:
            lines = path.read_text(encoding="utf-8").splitlines()
        entries: List[SharedMemoryEntry] = []
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                entry = SharedMemoryEntry.model_validate_json(line)
            except ValidationError:
                logger.warning(f"Skipping unreadable shared memory line {number} in {path}")
                continue
            if scope_key is None or entry.scope_key == scope_key:
                entries.append(entry)
        return entries

    # ------------------------------------------------------------------ findings and reports

    def findings_dir(self, advisory_id: str, project: str, commit: str) -> Path:
        return (self.root / "findings" / safe_component(advisory_id)
                / safe_component(project) / safe_component(commit))

    def poc_dir(self, advisory_id: str, project: str, commit: str) -> Path:
        return self.findings_dir(advisory_id, project, commit) / "poc"

    def has_findings(self, advisory_id: str, project: str, commit: str) -> bool:
        return (self.findings_dir(advisory_id, project, commit) / "findings.json").is_file()

    def save_findings(self, findings: FindingSet) -> Path:
        path = self.findings_dir(findings.advisory_id, findings.project, findings.commit) / "findings.json"
        write_document(path, findings)
        return path

    def load_findings(self, advisory_id: str, project: str, commit: str) -> FindingSet:
        return read_document(self.findings_dir(advisory_id, project, commit) / "findings.json", FindingSet)

    def report_dir(self, advisory_id: str) -> Path:
        return self.root / "reports" / safe_component(advisory_id)

    def sarif_dir(self, project: str) -> Path:
        return self.root / "sarif" / safe_component(project)
