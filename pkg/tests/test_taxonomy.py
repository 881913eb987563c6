"""
Shipped taxonomy, keyword table and sink catalog
"""
import json
import re

import pytest

from refaudit.services.taxonomy import (
    PathKeywordTable,
    load_keyword_table,
    load_sink_catalog,
    load_taxonomy,
    shipped_sink_catalog,
    shipped_taxonomy,
)
from refaudit.utils.error_handler import ConfigError


def test_shipped_taxonomy_has_twelve_categories():
    taxonomy = shipped_taxonomy()
    assert len(taxonomy.categories) == 12
    assert taxonomy.contains(("UI and Workflows", "Web UI"))
    assert not taxonomy.contains(("UI and Workflows", "Telepathy"))


def test_keyword_table_suggests_roles_from_path_segments():
    table = load_keyword_table(shipped_taxonomy())
    assert table.confident_role("app/webui/launch_page.py") == ("UI and Workflows", "Web UI")
    assert table.confident_role("scripts/convert.py") == ("UI and Workflows", "CLI/Developer Workflows")
    assert table.confident_role("src/loading/adapter.py") == ("Model Assets and Loading", "Loading Configuration")
    assert table.candidate_roles("README.md") == []


def test_ambiguous_paths_have_no_confident_role():
    table = load_keyword_table(shipped_taxonomy())
    roles = table.candidate_roles("scripts/webui/tool.py")
    assert len(roles) == 2
    assert table.confident_role("scripts/webui/tool.py") is None


def test_keyword_table_rejects_roles_outside_the_taxonomy():
    with pytest.raises(ConfigError):
        PathKeywordTable({"magic": [["UI and Workflows", "Telepathy"]]}, shipped_taxonomy())


def test_duplicate_coarse_names_are_rejected(tmp_path):
    path = tmp_path / "taxonomy.json"
    category = {"coarse_name": "A", "definition": "a", "second_level_roles": ["x"]}
    path.write_text(json.dumps({"version": 1, "categories": [category, category]}))
    with pytest.raises(ConfigError):
        load_taxonomy(path)


def test_sink_catalog_resolves_aliases():
    catalog = shipped_sink_catalog()
    family = catalog.family("Insecure Deserialization")
    assert family is not None
    assert any(re.search(p, "state = torch.load(checkpoint_path)") for p in family.sinks)
    assert any(re.search(p, "torch.load(checkpoint_path, weights_only=True)") for p in family.guards)
    assert catalog.family("quantum tunnelling") is None
    assert ("UI and Workflows", "Web UI") in catalog.entry_role_set


def test_sink_catalog_rejects_bad_patterns(tmp_path):
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps({"families": {"broken": {"sinks": ["torch.load("]}}}))
    with pytest.raises(ConfigError):
        load_sink_catalog(path)
