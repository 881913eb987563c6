"""
State store documents, shared memory log and the state lock
"""
import json
import os

import pytest

from refaudit.models.inspection import InspectionMemory, PriorityPartition, SharedMemoryEntry
from refaudit.services.state_store import LOCK_FILE, StateLock, safe_component
from refaudit.utils.error_handler import (
    NotFoundError,
    SchemaError,
    SchemaMigrationError,
    StateLockError,
)


def memory(commit: str = "v2") -> InspectionMemory:
    return InspectionMemory(advisory_id="ADV-1", project="target_app", commit=commit,
                            priorities=PriorityPartition())


def test_safe_component():
    assert safe_component("owner/repo") == "owner_repo"
    assert safe_component("..") == "_"
    assert safe_component("v1.2-rc") == "v1.2-rc"


def test_documents_persist_atomically(store):
    path = store.save_memory(memory())
    assert store.load_memory("ADV-1", "target_app", "v2") == memory()
    assert [p.name for p in path.parent.iterdir()] == ["v2.json"]
    with pytest.raises(NotFoundError):
        store.load_memory("ADV-1", "target_app", "v9")


def test_other_schema_versions_need_a_fresh_run(store):
    path = store.save_memory(memory())
    document = json.loads(path.read_text())
    document["schema_version"] = 99
    path.write_text(json.dumps(document))
    with pytest.raises(SchemaMigrationError, match="--fresh"):
        store.load_memory("ADV-1", "target_app", "v2")


def test_corrupt_documents_name_the_field(store):
    path = store.save_memory(memory())
    document = json.loads(path.read_text())
    document["iteration_count"] = "many"
    path.write_text(json.dumps(document))
    with pytest.raises(SchemaError) as excinfo:
        store.load_memory("ADV-1", "target_app", "v2")
    assert excinfo.value.field == "iteration_count"

    path.write_text("{truncated")
    with pytest.raises(SchemaError):
        store.load_memory("ADV-1", "target_app", "v2")


def test_shared_memory_is_append_only_and_filterable(store):
    first = SharedMemoryEntry(project="target_app", scope_key="A :: x", observation="one", run_id="r1")
    second = SharedMemoryEntry(project="target_app", scope_key="B :: y", observation="two", run_id="r2")
    store.append_shared([first])
    store.append_shared([second])
    with open(store.shared_path("target_app"), "a") as f:
        f.write("not json\n")

    assert [e.observation for e in store.read_shared("target_app")] == ["one", "two"]
    assert [e.run_id for e in store.read_shared("target_app", "B :: y")] == ["r2"]
    assert store.read_shared("other_project") == []


def test_lock_excludes_a_live_owner(tmp_path):
    (tmp_path / LOCK_FILE).write_text(str(os.getppid()))
    with pytest.raises(StateLockError):
        StateLock(tmp_path).acquire()


def test_stale_locks_are_taken_over_and_released(tmp_path):
    (tmp_path / LOCK_FILE).write_text("not a pid")
    with StateLock(tmp_path) as lock:
        assert lock.acquired
        assert (tmp_path / LOCK_FILE).read_text() == str(os.getpid())
    assert not (tmp_path / LOCK_FILE).exists()
