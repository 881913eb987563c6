"""
Code facts service
Syntax-aware, read-only access to a repository checkout: file enumeration, regex search,
function/class extraction, imports, call relations and intraprocedural data flow
"""
import logging
import os
import re
import threading
from pathlib import Path, PurePosixPath
from typing import Dict, Iterator, List, Optional, Tuple, Union

import tree_sitter_python as tspython
from tree_sitter import Language, Node, Parser

from refaudit.config import settings
from refaudit.models.schemas import (
    CallExtraction,
    CallRelation,
    DataFlowSummary,
    FlowEdge,
    FlowVia,
    FunctionCode,
    FunctionFact,
    FunctionKind,
    ImportList,
    RepoCheckout,
    SearchHit,
)
from refaudit.utils.error_handler import (
    CheckoutError,
    DiagnosticsCollector,
    EmptyScopeError,
    NotFoundError,
    PathOutsideCheckoutError,
    PatternError,
)

logger = logging.getLogger(__name__)

PY_LANGUAGE = Language(tspython.language())

VCS_DIRS = {".git", ".hg", ".svn", ".bzr"}
PYTHON_SUFFIXES = {".py", ".pyi"}

DEFINITION_TYPES = ("function_definition", "class_definition")
LITERAL_TYPES = {"integer", "float", "true", "false", "none", "ellipsis"}
SYMBOL_TEXT_LIMIT = 80

_IMPORT_LINE = re.compile(r"^\s*import\s+([\w.]+(?:\s*,\s*[\w.]+)*)")
_FROM_LINE = re.compile(r"^\s*from\s+(\.*[\w.]*)\s+import\b")


def _text(node: Optional[Node]) -> str:
    if node is None:
        return ""
    return node.text.decode("utf-8", errors="replace")


def _squash(text: str, limit: int = SYMBOL_TEXT_LIMIT) -> str:
    return " ".join(text.split())[:limit]


def _line(node: Node) -> int:
    return node.start_point[0] + 1


class ParsedFile:
    """A parsed Python file and the definitions it contains"""

    def __init__(self, rel_path: str, source: bytes, tree):
        self.rel_path = rel_path
        self.source = source
        self.tree = tree
        self.has_error = tree.root_node.has_error
        self.definitions: List[Tuple[FunctionFact, Node]] = []
        self._collect(tree.root_node, [], False)

    def _collect(self, node: Node, scope: List[str], in_class: bool):
        for child in node.named_children:
            target = child
            if child.type == "decorated_definition":
                target = child.child_by_field_name("definition")
                if target is None:
                    continue
            if target.type not in DEFINITION_TYPES:
                self._collect(child, scope, in_class)
                continue

            name = _text(target.child_by_field_name("name"))
            if not name:
                continue
            is_class = target.type == "class_definition"
            if is_class:
                kind = FunctionKind.CLASS
            else:
                kind = FunctionKind.METHOD if in_class else FunctionKind.FUNCTION
            fact = FunctionFact(
                file=self.rel_path,
                qualified_name=".".join(scope + [name]),
                start_line=target.start_point[0] + 1,
                end_line=target.end_point[0] + 1,
                kind=kind,
            )
            self.definitions.append((fact, target))
            body = target.child_by_field_name("body")
            if body is not None:
                self._collect(body, scope + [name], is_class)

    @property
    def facts(self) -> List[FunctionFact]:
        return [fact for fact, _ in self.definitions]

    def node_of(self, fact: FunctionFact) -> Optional[Node]:
        for candidate, node in self.definitions:
            if candidate == fact:
                return node
        return None


class CodeFacts:
    """Read-only code facts over one checkout; safe to share between workers"""

    def __init__(self, checkout: RepoCheckout):
        if not Path(checkout.root_path).is_dir():
            raise CheckoutError(f"Checkout root {checkout.root_path} is not a directory")
        self.checkout = checkout
        self.root = Path(checkout.root_path).resolve()
        self._lock = threading.Lock()
        self._parsed: Dict[str, ParsedFile] = {}
        self._index: Optional["_DefinitionIndex"] = None

    # ------------------------------------------------------------------ paths

    def resolve(self, rel_path: Union[str, Path, None]) -> Path:
        """Resolve a repo-relative path, rejecting anything outside the checkout"""
        if rel_path in (None, "", "."):
            return self.root
        candidate = (self.root / str(rel_path)).resolve()
        if candidate != self.root and self.root not in candidate.parents:
            raise PathOutsideCheckoutError(f"Path {rel_path} is outside the checkout")
        return candidate

    def relative(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    def exists(self, rel_path: str) -> bool:
        try:
            return self.resolve(rel_path).is_file()
        except PathOutsideCheckoutError:
            return False

    def read_text(self, rel_path: str) -> str:
        path = self.resolve(rel_path)
        if not path.is_file():
            raise NotFoundError(f"File not found: {rel_path}")
        return path.read_bytes().decode("utf-8", errors="replace")

    def read_lines(self, rel_path: str) -> List[str]:
        return self.read_text(rel_path).splitlines()

    # ------------------------------------------------------------------ list_files

    def list_files(self, subdir: Optional[str] = None) -> List[str]:
        """
        Enumerate files of the checkout

        Args:
            subdir: Optional repo-relative directory limiting the scope

        Returns:
            Repo-relative posix paths in lexicographic order
        """
        base = self.resolve(subdir)
        if not base.exists():
            raise EmptyScopeError(f"Scope does not exist: {subdir}")
        if base.is_file():
            return [self.relative(base)]

        files: List[str] = []
        for dirpath, dirnames, filenames in os.walk(base):
            dirnames[:] = sorted(d for d in dirnames if d not in VCS_DIRS)
            for filename in filenames:
                path = Path(dirpath) / filename
                if path.is_symlink() and self.root not in path.resolve().parents:
                    continue
                files.append(self.relative(path))
        return sorted(files)

    def python_files(self) -> List[str]:
        return [f for f in self.list_files() if PurePosixPath(f).suffix in PYTHON_SUFFIXES]

    # ------------------------------------------------------------------ search

    def search(self, pattern: str, scope: Optional[str] = None,
               max_hits: Optional[int] = None) -> List[SearchHit]:
        """
        Regex search over a file or directory

        Args:
            pattern: Python regular expression
            scope: Repo-relative file or directory, whole checkout when omitted
            max_hits: Optional cap on returned hits

        Returns:
            Hits in (file, line) order with line text truncated to the configured width
        """
        try:
            regex = re.compile(pattern)
        except re.error as e:
            raise PatternError(f"Invalid pattern at position {e.pos}: {e.msg}", e.pos)

        hits: List[SearchHit] = []
        for rel_path in self.list_files(scope):
            data = self.resolve(rel_path).read_bytes()
            if b"\0" in data[:1024]:
                continue
            text = data.decode("utf-8", errors="replace")
            for number, line in enumerate(text.splitlines(), start=1):
                if regex.search(line):
                    hits.append(SearchHit(
                        file=rel_path,
                        line_number=number,
                        line_text=line.strip()[:settings.search_line_width],
                    ))
                    if max_hits is not None and len(hits) >= max_hits:
                        return hits
        return hits

    # ------------------------------------------------------------------ parsing

    def parse(self, rel_path: str) -> Optional[ParsedFile]:
        """Parse a Python file (cached); other files return None"""
        if PurePosixPath(rel_path).suffix not in PYTHON_SUFFIXES:
            return None
        with self._lock:
            cached = self._parsed.get(rel_path)
            if cached is not None:
                return cached
            path = self.resolve(rel_path)
            if not path.is_file():
                raise NotFoundError(f"File not found: {rel_path}")
            source = path.read_bytes()
            tree = Parser(PY_LANGUAGE).parse(source)
            parsed = ParsedFile(rel_path, source, tree)
            self._parsed[rel_path] = parsed
            return parsed

    def functions(self, rel_path: str) -> List[FunctionFact]:
        parsed = self.parse(rel_path)
        if parsed is None or parsed.has_error:
            return []
        return parsed.facts

    def all_functions(self) -> List[FunctionFact]:
        facts: List[FunctionFact] = []
        for rel_path in self.python_files():
            facts.extend(self.functions(rel_path))
        return facts

    # ------------------------------------------------------------------ function code

    def numbered(self, rel_path: str, start_line: int, end_line: int) -> str:
        lines = self.read_lines(rel_path)
        end_line = min(end_line, len(lines))
        return "\n".join(f"{n:>5}| {lines[n - 1]}" for n in range(start_line, end_line + 1))

    def read_file(self, rel_path: str, start_line: int = 1,
                  max_lines: Optional[int] = None) -> FunctionCode:
        """Line-numbered slice of a file"""
        max_lines = max_lines or settings.read_max_lines
        lines = self.read_lines(rel_path)
        start_line = max(1, start_line)
        end_line = min(len(lines), start_line + max_lines - 1)
        if start_line > max(len(lines), 1):
            raise NotFoundError(f"{rel_path} has only {len(lines)} lines")
        return FunctionCode(
            file=rel_path,
            start_line=start_line,
            end_line=max(end_line, start_line),
            source=self.numbered(rel_path, start_line, end_line),
        )

    def find_function(self, rel_path: str, name_or_line: Union[str, int]) -> FunctionFact:
        """Locate a function by qualified name, simple name or contained line"""
        facts = self.functions(rel_path)
        if isinstance(name_or_line, int) or str(name_or_line).isdigit():
            line = int(name_or_line)
            containing = [f for f in facts if f.contains_line(line)]
            if not containing:
                raise NotFoundError(f"No function or class contains {rel_path}:{line}")
            return min(containing, key=lambda f: (f.end_line - f.start_line, f.start_line))

        name = str(name_or_line)
        for fact in facts:
            if fact.qualified_name == name:
                return fact
        if "." in name:
            # a dotted name pins its enclosing scope
            for fact in facts:
                if fact.qualified_name.endswith("." + name):
                    return fact
        else:
            for fact in facts:
                if fact.simple_name == name:
                    return fact
        raise NotFoundError(f"Function or class {name} not found in {rel_path}")

    def get_function_code(self, rel_path: str, name_or_line: Union[str, int]) -> FunctionCode:
        """
        Extract a function or class body with line numbers

        Args:
            rel_path: Repo-relative file
            name_or_line: Qualified or simple name, or a line inside the definition

        Returns:
            FunctionCode spanning exactly the definition, or the whole file flagged
            `unparsed` when the file cannot be parsed
        """
        parsed = self.parse(rel_path)
        if parsed is None or parsed.has_error:
            lines = self.read_lines(rel_path)
            end_line = max(1, min(len(lines), settings.read_max_lines))
            return FunctionCode(
                file=rel_path,
                start_line=1,
                end_line=end_line,
                source=self.numbered(rel_path, 1, end_line),
                unparsed=True,
            )

        fact = self.find_function(rel_path, name_or_line)
        return FunctionCode(
            file=rel_path,
            fact=fact,
            start_line=fact.start_line,
            end_line=fact.end_line,
            source=self.numbered(rel_path, fact.start_line, fact.end_line),
        )

    # ------------------------------------------------------------------ imports

    def get_imports(self, rel_path: str) -> ImportList:
        """
        Imported module names of a file

        Relative imports are normalized to repo-relative dotted form; duplicates dropped,
        source order kept. Unparseable files fall back to line regexes and are flagged.
        """
        parsed = self.parse(rel_path)
        if parsed is None or parsed.has_error:
            return ImportList(file=rel_path, modules=self._regex_imports(rel_path), fallback=True)

        modules: List[str] = []
        for node in _preorder(parsed.tree.root_node):
            if node.type == "import_statement":
                for child in node.named_children:
                    target = child.child_by_field_name("name") if child.type == "aliased_import" else child
                    if target is not None and target.type == "dotted_name":
                        modules.append(_text(target))
            elif node.type == "import_from_statement":
                module_node = node.child_by_field_name("module_name")
                if module_node is None:
                    continue
                if module_node.type == "relative_import":
                    name = self._normalize_relative(rel_path, _text(module_node))
                    if name:
                        modules.append(name)
                else:
                    modules.append(_text(module_node))
        return ImportList(file=rel_path, modules=_dedup(modules))

    def _regex_imports(self, rel_path: str) -> List[str]:
        modules: List[str] = []
        for line in self.read_lines(rel_path):
            match = _IMPORT_LINE.match(line)
            if match:
                modules.extend(part.strip() for part in match.group(1).split(","))
                continue
            match = _FROM_LINE.match(line)
            if match:
                name = match.group(1)
                if name.startswith("."):
                    name = self._normalize_relative(rel_path, name)
                if name:
                    modules.append(name)
        return _dedup(modules)

    @staticmethod
    def _normalize_relative(rel_path: str, spec: str) -> str:
        level = len(spec) - len(spec.lstrip("."))
        remainder = spec[level:].strip()
        package = list(PurePosixPath(rel_path).parent.parts)
        drop = level - 1
        base = package[:len(package) - drop] if drop <= len(package) else []
        parts = base + ([p for p in remainder.split(".") if p] if remainder else [])
        return ".".join(parts)

    # ------------------------------------------------------------------ call relations

    def extract_call_relations(self) -> CallExtraction:
        """
        Every syntactic call site inside an extracted function or class

        Resolution is name-based and checkout-local; external callees stay unresolved.
        """
        diagnostics = DiagnosticsCollector("code-facts")
        relations: List[CallRelation] = []
        index = self._definition_index()

        for rel_path in self.python_files():
            try:
                parsed = self.parse(rel_path)
            except (OSError, NotFoundError) as e:
                diagnostics.add("Failed to read file", context=rel_path, error=e)
                continue
            if parsed is None:
                continue
            if parsed.has_error:
                diagnostics.add("Parse error, call relations skipped", context=rel_path)
                continue

            owners = {(node.start_byte, node.end_byte): fact for fact, node in parsed.definitions}
            sites: List[Tuple[int, int, CallRelation]] = []
            stack: List[Tuple[Node, Optional[FunctionFact]]] = [(parsed.tree.root_node, None)]
            while stack:
                node, owner = stack.pop()
                owner = owners.get((node.start_byte, node.end_byte), owner) \
                    if node.type in DEFINITION_TYPES else owner
                if node.type == "call" and owner is not None:
                    callee = _squash(_text(node.child_by_field_name("function")), 200)
                    sites.append((node.start_byte, node.start_point[1], CallRelation(
                        caller=owner,
                        callee_name=callee,
                        callee_resolved=index.resolve(owner, callee),
                        call_site_line=_line(node),
                    )))
                for child in reversed(node.children):
                    stack.append((child, owner))
            sites.sort(key=lambda s: (s[0], s[1]))
            relations.extend(site[2] for site in sites)

        return CallExtraction(relations=relations, diagnostics=diagnostics.entries)

    def _definition_index(self) -> "_DefinitionIndex":
        with self._lock:
            index = self._index
        if index is None:
            index = _DefinitionIndex(self.all_functions())
            with self._lock:
                self._index = index
        return index

    # ------------------------------------------------------------------ data flow

    def analyze_data_flow(self, fact: FunctionFact) -> DataFlowSummary:
        """
        Intraprocedural propagation: default values into parameters, assignments,
        call arguments and returns. Over-approximates, never drops direct flows.
        """
        parsed = self.parse(fact.file)
        node = parsed.node_of(fact) if parsed is not None else None
        if node is None or node.has_error:
            return DataFlowSummary(function=fact, unparsed=True)

        edges: Dict[Tuple[str, str, FlowVia], FlowEdge] = {}

        def add(sources: List[str], target: str, via: FlowVia, at: Node):
            for source in sources:
                key = (source, target, via)
                if source and target and key not in edges:
                    edges[key] = FlowEdge(from_symbol=source, to_symbol=target, via=via, line=_line(at))

        parameters = node.child_by_field_name("parameters")
        if parameters is not None:
            for param in parameters.named_children:
                if param.type in ("default_parameter", "typed_default_parameter"):
                    value = param.child_by_field_name("value")
                    add(_reads_or_literal(value), _text(param.child_by_field_name("name")),
                        FlowVia.PARAMETER, param)

        body = node.child_by_field_name("body")
        for current in _preorder(body, skip_nested=True) if body is not None else []:
            kind = current.type
            if kind in ("assignment", "augmented_assignment"):
                right = current.child_by_field_name("right")
                if right is None:
                    continue
                sources = _reads_or_literal(right)
                for target in _targets(current.child_by_field_name("left")):
                    add(sources, target, FlowVia.ASSIGNMENT, current)
            elif kind == "for_statement":
                sources = _reads(current.child_by_field_name("right"))
                for target in _targets(current.child_by_field_name("left")):
                    add(sources, target, FlowVia.ASSIGNMENT, current)
            elif kind == "as_pattern":
                value = current.named_children[0] if current.named_children else None
                alias = current.child_by_field_name("alias")
                for target in _targets(alias):
                    add(_reads(value), target, FlowVia.ASSIGNMENT, current)
            elif kind == "named_expression":
                add(_reads_or_literal(current.child_by_field_name("value")),
                    _text(current.child_by_field_name("name")), FlowVia.ASSIGNMENT, current)
            elif kind == "call":
                callee = _squash(_text(current.child_by_field_name("function")))
                arguments = current.child_by_field_name("arguments")
                if arguments is None:
                    continue
                for argument in arguments.named_children:
                    if argument.type == "keyword_argument":
                        argument = argument.child_by_field_name("value")
                    add(_reads(argument), callee, FlowVia.CALL_ARGUMENT, current)
            elif kind == "return_statement":
                if current.named_children:
                    add(_reads_or_literal(current.named_children[0]), "return", FlowVia.RETURN, current)

        return DataFlowSummary(function=fact, edges=list(edges.values()))


class _DefinitionIndex:
    """Name lookup tables for checkout-local call resolution"""

    def __init__(self, facts: List[FunctionFact]):
        self.top_level: Dict[str, List[FunctionFact]] = {}
        self.members: Dict[Tuple[str, str], FunctionFact] = {}
        self.by_module: Dict[str, Dict[str, FunctionFact]] = {}

        for fact in sorted(facts, key=lambda f: (f.file, f.start_line)):
            parts = fact.qualified_name.split(".")
            if len(parts) == 1:
                self.top_level.setdefault(fact.qualified_name, []).append(fact)
                module = _module_name(fact.file)
                self.by_module.setdefault(module, {}).setdefault(fact.qualified_name, fact)
            else:
                owner = ".".join(parts[:-1])
                self.members.setdefault((f"{fact.file}::{owner}", parts[-1]), fact)

    def resolve(self, caller: FunctionFact, callee: str) -> Optional[FunctionFact]:
        parts = callee.split(".")
        if not all(p.isidentifier() for p in parts):
            return None

        if len(parts) == 1:
            candidates = self.top_level.get(callee, [])
            same_file = [f for f in candidates if f.file == caller.file]
            return (same_file or candidates or [None])[0]

        name = parts[-1]
        prefix = ".".join(parts[:-1])
        if prefix in ("self", "cls"):
            owner = _enclosing_class(caller)
            if owner is None:
                return None
            return self.members.get((f"{caller.file}::{owner}", name))

        classes = [f for f in self.top_level.get(prefix, []) if f.kind == FunctionKind.CLASS]
        for cls_fact in sorted(classes, key=lambda f: f.file != caller.file):
            member = self.members.get((f"{cls_fact.file}::{cls_fact.qualified_name}", name))
            if member is not None:
                return member

        for module in sorted(self.by_module):
            if module == prefix or module.endswith("." + prefix):
                fact = self.by_module[module].get(name)
                if fact is not None:
                    return fact
        return None


def _enclosing_class(fact: FunctionFact) -> Optional[str]:
    if fact.kind == FunctionKind.CLASS:
        return fact.qualified_name
    if fact.kind == FunctionKind.METHOD:
        return fact.qualified_name.rsplit(".", 1)[0]
    return None


def _module_name(rel_path: str) -> str:
    path = PurePosixPath(rel_path)
    parts = list(path.parent.parts)
    if path.stem != "__init__":
        parts.append(path.stem)
    return ".".join(parts)


def _dedup(items: List[str]) -> List[str]:
    return list(dict.fromkeys(i for i in items if i))


def _preorder(node: Node, skip_nested: bool = False) -> Iterator[Node]:
    """Pre-order walk; with skip_nested, nested function and class bodies are not entered"""
    stack = [node]
    while stack:
        current = stack.pop()
        yield current
        for child in reversed(current.named_children):
            if skip_nested and child.type in DEFINITION_TYPES + ("decorated_definition",):
                continue
            stack.append(child)


def _reads(node: Optional[Node]) -> List[str]:
    """Symbols read by an expression; callee names are not reads"""
    if node is None:
        return []
    kind = node.type
    if kind == "identifier":
        return [_text(node)]
    if kind == "attribute":
        if _is_dotted(node):
            return [_squash(_text(node))]
        return _reads(node.child_by_field_name("object"))
    if kind in LITERAL_TYPES:
        return []
    if kind == "string":
        found: List[str] = []
        for child in node.named_children:
            if child.type == "interpolation":
                for inner in child.named_children:
                    found.extend(_reads(inner))
        return _dedup(found)
    if kind == "call":
        found = []
        function = node.child_by_field_name("function")
        if function is not None and function.type == "attribute":
            receiver = function.child_by_field_name("object")
            if receiver is not None and receiver.type not in ("identifier", "attribute"):
                found.extend(_reads(receiver))
        found.extend(_reads(node.child_by_field_name("arguments")))
        return _dedup(found)
    if kind == "keyword_argument":
        return _reads(node.child_by_field_name("value"))
    if kind in ("lambda", "function_definition", "class_definition"):
        return []
    found = []
    for child in node.named_children:
        found.extend(_reads(child))
    return _dedup(found)


def _reads_or_literal(node: Optional[Node]) -> List[str]:
    if node is None:
        return []
    reads = _reads(node)
    if reads:
        return reads
    return [_squash(_text(node))]


def _is_dotted(node: Node) -> bool:
    while node.type == "attribute":
        node = node.child_by_field_name("object")
        if node is None:
            return False
    return node.type == "identifier"


def _targets(node: Optional[Node]) -> List[str]:
    """Names written by an assignment target"""
    if node is None:
        return []
    if node.type == "identifier":
        return [_text(node)]
    if node.type == "attribute":
        return [_squash(_text(node))]
    if node.type == "subscript":
        return _targets(node.child_by_field_name("value"))
    found: List[str] = []
    for child in node.named_children:
        found.extend(_targets(child))
    return _dedup(found)
