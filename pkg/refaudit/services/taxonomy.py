"""
Taxonomy service
Loads the shipped role taxonomy, the pass-1 path keyword table and the sink catalog
"""
import json
import logging
import re
from functools import lru_cache
from pathlib import Path, PurePosixPath
from typing import Dict, List, Optional, Set

from pydantic import BaseModel, Field, ValidationError

from refaudit.models.schemas import Role, RoleTaxonomy
from refaudit.utils.error_handler import ConfigError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent.parent / "data"
TAXONOMY_PATH = DATA_DIR / "role_taxonomy.json"
KEYWORDS_PATH = DATA_DIR / "path_keywords.json"
SINK_CATALOG_PATH = DATA_DIR / "sink_catalog.json"


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Data file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Data file {path} is not valid JSON: {e}")


def load_taxonomy(path: Optional[Path] = None) -> RoleTaxonomy:
    """Load and validate a role taxonomy document (shipped one by default)"""
    try:
        return RoleTaxonomy.model_validate(_read_json(path or TAXONOMY_PATH))
    except ValidationError as e:
        raise ConfigError(f"Invalid role taxonomy: {e.errors()[0]['msg']}")


class PathKeywordTable:
    """
    Pass-1 heuristics: path keyword -> candidate roles

    A keyword matches a lower-cased directory segment or the exact file stem.
    """

    def __init__(self, keywords: Dict[str, List[Role]], taxonomy: RoleTaxonomy):
        unknown = [(k, r) for k, roles in keywords.items() for r in roles if not taxonomy.contains(tuple(r))]
        if unknown:
            raise ConfigError(f"Keyword table names roles outside the taxonomy: {unknown[:3]}")
        self.keywords = {k.lower(): [tuple(r) for r in roles] for k, roles in keywords.items()}

    def candidate_roles(self, rel_path: str) -> List[Role]:
        """Every role suggested by the path, in path order"""
        path = PurePosixPath(rel_path)
        tokens = [segment.lower() for segment in path.parent.parts] + [path.stem.lower()]
        roles: List[Role] = []
        for token in tokens:
            for role in self.keywords.get(token, []):
                if role not in roles:
                    roles.append(role)
        return roles

    def confident_role(self, rel_path: str) -> Optional[Role]:
        """The role when exactly one candidate exists, else None"""
        roles = self.candidate_roles(rel_path)
        return roles[0] if len(roles) == 1 else None


def load_keyword_table(taxonomy: RoleTaxonomy, path: Optional[Path] = None) -> PathKeywordTable:
    document = _read_json(path or KEYWORDS_PATH)
    return PathKeywordTable(document.get("keywords", {}), taxonomy)


class SinkFamily(BaseModel):
    aliases: List[str] = Field(default_factory=list)
    sinks: List[str]
    guards: List[str] = Field(default_factory=list)
    risky_dependencies: List[str] = Field(default_factory=list)


class SinkCatalog(BaseModel):
    """Sink, guard and risky-dependency patterns per vulnerability family"""
    version: int = 1
    families: Dict[str, SinkFamily]
    input_patterns: List[str] = Field(default_factory=list)
    entry_roles: List[Role] = Field(default_factory=list)

    def family(self, vuln_family: str) -> Optional[SinkFamily]:
        """Look up a family by name or alias, tolerant of case and separators"""
        wanted = _normalize_family(vuln_family)
        for name, family in self.families.items():
            names = [name] + family.aliases
            if any(_normalize_family(n) == wanted for n in names):
                return family
        for name, family in self.families.items():
            names = [name] + family.aliases
            if any(_normalize_family(n) in wanted for n in names):
                return family
        return None

    def all_risky_dependencies(self) -> Set[str]:
        return {d for f in self.families.values() for d in f.risky_dependencies}

    @property
    def entry_role_set(self) -> Set[Role]:
        return {tuple(r) for r in self.entry_roles}


def _normalize_family(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", " ", name.lower()).strip()


def load_sink_catalog(path: Optional[Path] = None) -> SinkCatalog:
    try:
        catalog = SinkCatalog.model_validate(_read_json(path or SINK_CATALOG_PATH))
    except ValidationError as e:
        raise ConfigError(f"Invalid sink catalog: {e.errors()[0]['msg']}")
    for family in catalog.families.values():
        for pattern in family.sinks + family.guards:
            try:
                re.compile(pattern)
            except re.error as e:
                raise ConfigError(f"Invalid catalog pattern {pattern!r}: {e}")
    return catalog


@lru_cache(maxsize=1)
def shipped_taxonomy() -> RoleTaxonomy:
    return load_taxonomy()


@lru_cache(maxsize=1)
def shipped_sink_catalog() -> SinkCatalog:
    return load_sink_catalog()
