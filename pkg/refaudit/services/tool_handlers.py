"""
Inspection tool handlers
Closed tool registry for the inspection agent and the handlers behind each tool
"""
import json
import logging
from typing import Any, Awaitable, Callable, Dict, List, Optional, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from refaudit.config import settings
from refaudit.models.inspection import (
    CONFIDENCE_RANK,
    Candidate,
    CandidateLocation,
    Confidence,
    FileState,
    InspectionMemory,
    PathStep,
)
from refaudit.models.llm import FunctionSchema, RawToolCall, ToolCall
from refaudit.models.schemas import ChainRole, RepositorySemantics
from refaudit.services.code_facts import CodeFacts
from refaudit.services.sarif import ingest_sarif
from refaudit.services.state_store import StateStore
from refaudit.utils.error_handler import AuditError, NotFoundError

logger = logging.getLogger(__name__)

RELATED_FILES_LIMIT = 100

Handler = Callable[[BaseModel], Awaitable[str]]


class ToolRegistry:
    """Closed registry: tool name -> argument model + async handler"""

    def __init__(self):
        self.handlers: Dict[str, Handler] = {}
        self.arg_models: Dict[str, Type[BaseModel]] = {}
        self.schemas: List[FunctionSchema] = []

    def register_function(self, name: str, description: str, args_model: Type[BaseModel], handler: Handler):
        """
        Register a new tool

        Args:
            name: Tool name
            description: Tool description shown to the model
            args_model: Pydantic model the arguments must validate against
            handler: Async handler receiving the validated arguments
        """
        schema = args_model.model_json_schema()
        schema.pop("title", None)
        self.schemas.append(FunctionSchema(name=name, description=description, parameters=schema))
        self.arg_models[name] = args_model
        self.handlers[name] = handler

    def get_function_schemas(self) -> List[Dict[str, Any]]:
        """Get schema list of all tools"""
        return [s.model_dump() for s in self.schemas]

    def validate_call(self, call: RawToolCall) -> ToolCall:
        """Validate a raw call; raises ValueError naming the problem"""
        if call.name not in self.handlers:
            raise ValueError(f"unknown tool {call.name!r}")
        try:
            arguments = json.loads(call.arguments or "{}")
        except json.JSONDecodeError as e:
            raise ValueError(f"arguments of {call.name} are not valid JSON: {e.msg}")
        if not isinstance(arguments, dict):
            raise ValueError(f"arguments of {call.name} must be an object")
        try:
            self.arg_models[call.name].model_validate(arguments)
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(p) for p in first["loc"]) or "arguments"
            raise ValueError(f"invalid arguments for {call.name}: {field}: {first['msg']}")
        return ToolCall(id=call.id, name=call.name, arguments=arguments)

    async def handle_function_call(self, call: ToolCall) -> str:
        """
        Dispatch a validated call

        Returns:
            JSON string of the result, with an "error" key on failure
        """
        if call.name not in self.handlers:
            return json.dumps({"error": f"No handler found for tool: {call.name}"})
        try:
            args = self.arg_models[call.name].model_validate(call.arguments)
        except ValidationError as e:
            return json.dumps({"error": f"Invalid arguments for {call.name}: {e.errors()[0]['msg']}"})
        try:
            return await self.handlers[call.name](args)
        except AuditError as e:
            return json.dumps({"error": str(e)})
        except Exception as e:
            logger.error(f"Error running tool {call.name}: {e}")
            return json.dumps({"error": f"Error running tool {call.name}: {e}"})


# --------------------------------------------------------------------------- argument models

class _Args(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ReadFileArgs(_Args):
    file: str
    start_line: int = Field(default=1, ge=1)
    max_lines: Optional[int] = Field(default=None, ge=1)


class GetFunctionCodeArgs(_Args):
    file: str
    name: Optional[str] = None
    line: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _name_or_line(self):
        if self.name is None and self.line is None:
            raise ValueError("give a function name or a line")
        return self


class SearchInFileArgs(_Args):
    file: str
    pattern: str


class SearchInFolderArgs(_Args):
    pattern: str
    folder: str = ""


class ListFilesArgs(_Args):
    folder: str = ""


class FileArgs(_Args):
    file: str


class AnalyzeDataFlowArgs(_Args):
    file: str
    function: str


class ModuleArgs(_Args):
    module: str


class ReadSarifArgs(_Args):
    file: Optional[str] = None


class ReadSharedMemoryArgs(_Args):
    scope_key: Optional[str] = None


class PathStepArgs(_Args):
    role: ChainRole
    file: str
    function: Optional[str] = None
    line: Optional[int] = None
    description: str = ""


class ReportCandidateArgs(_Args):
    file: str
    start_line: int = Field(ge=1)
    end_line: int = Field(ge=1)
    function: Optional[str] = None
    sink: str = Field(min_length=1)
    path: List[PathStepArgs] = Field(min_length=2)
    static_evidence: List[str] = Field(default_factory=list)
    confidence: Confidence = "medium"


class MarkFileCompletedArgs(_Args):
    file: str
    reason: str = Field(min_length=1)


class CheckFileStatusArgs(_Args):
    file: Optional[str] = None


class FinishInspectionArgs(_Args):
    summary: str = ""


# --------------------------------------------------------------------------- toolbox

class InspectionToolbox:
    """The inspection agent's tools over one target revision; all state changes land in memory"""

    def __init__(self, facts: CodeFacts, semantics: RepositorySemantics, memory: InspectionMemory,
                 store: Optional[StateStore] = None):
        self.facts = facts
        self.semantics = semantics
        self.memory = memory
        self.store = store
        self.iteration = memory.iteration_count
        self.finish_requested = False
        self.events: List[Dict[str, Any]] = []
        self.registry = ToolRegistry()
        self._register_default_functions()

    def _register_default_functions(self):
        register = self.registry.register_function
        register("read_file", "Read a file with line numbers (at most 400 lines per call)",
                 ReadFileArgs, self._read_file)
        register("get_function_code", "Extract a function or class body with line numbers, by name or line",
                 GetFunctionCodeArgs, self._get_function_code)
        register("search_in_file", "Regex search inside one file", SearchInFileArgs, self._search_in_file)
        register("search_in_folder", "Regex search over a folder (whole repository when folder is empty)",
                 SearchInFolderArgs, self._search_in_folder)
        register("list_files_in_folder", "List files of a folder", ListFilesArgs, self._list_files)
        register("get_imports", "Imported modules of a file", FileArgs, self._get_imports)
        register("analyze_data_flow",
                 "Summarize intraprocedural data propagation (parameters, assignments, calls, returns)",
                 AnalyzeDataFlowArgs, self._analyze_data_flow)
        register("get_related_files", "Files of the same module and of directly calling or called modules",
                 FileArgs, self._get_related_files)
        register("get_module_call_relationships", "Callers and callees of a module in the module call graph",
                 ModuleArgs, self._get_module_call_relationships)
        register("read_sarif_results", "Scanner findings supplied for this project, optionally for one file",
                 ReadSarifArgs, self._read_sarif_results)
        register("read_shared_memory", "Observations recorded by earlier runs over this project",
                 ReadSharedMemoryArgs, self._read_shared_memory)
        register("report_candidate",
                 "Report a potential variant with its location, source-to-sink path, evidence and confidence",
                 ReportCandidateArgs, self._report_candidate)
        register("mark_file_completed", "Mark a file as fully inspected, with the reason",
                 MarkFileCompletedArgs, self._mark_file_completed)
        register("check_file_status", "Status of one file, or progress over the whole scope",
                 CheckFileStatusArgs, self._check_file_status)
        register("finish_inspection", "Declare this inspection turn complete", FinishInspectionArgs,
                 self._finish_inspection)

    def begin_iteration(self, index: int):
        self.iteration = index
        self.finish_requested = False
        self.events = []

    async def dispatch(self, call: ToolCall) -> str:
        """Run one validated call and log the event"""
        result = await self.registry.handle_function_call(call)
        try:
            decoded = json.loads(result)
            error = decoded.get("error") if isinstance(decoded, dict) else None
        except json.JSONDecodeError:
            error = None
        self.events.append({
            "tool": call.name,
            "arguments": call.arguments,
            "ok": error is None,
            "error": error,
            "result": result,
        })
        return result

    def _touch(self, file: str):
        if self.memory.mark_in_progress(file):
            logger.debug(f"{file} is now in progress")

    # ------------------------------------------------------------------ code facts tools

    async def _read_file(self, args: ReadFileArgs) -> str:
        code = self.facts.read_file(args.file, args.start_line,
                                    min(args.max_lines or settings.read_max_lines, settings.read_max_lines))
        self._touch(args.file)
        return json.dumps({"file": code.file, "start_line": code.start_line,
                           "end_line": code.end_line, "content": code.source})

    async def _get_function_code(self, args: GetFunctionCodeArgs) -> str:
        target = args.line if args.line is not None else args.name
        code = self.facts.get_function_code(args.file, target)
        self._touch(args.file)
        payload = {"file": code.file, "start_line": code.start_line, "end_line": code.end_line,
                   "unparsed": code.unparsed, "content": code.source}
        if code.fact is not None:
            payload.update({"qualified_name": code.fact.qualified_name, "kind": code.fact.kind.value})
        return json.dumps(payload)

    async def _search(self, pattern: str, scope: Optional[str]) -> str:
        hits = self.facts.search(pattern, scope, max_hits=settings.search_max_hits + 1)
        truncated = len(hits) > settings.search_max_hits
        hits = hits[:settings.search_max_hits]
        return json.dumps({
            "hits": [{"file": h.file, "line": h.line_number, "text": h.line_text} for h in hits],
            "truncated": truncated,
        })

    async def _search_in_file(self, args: SearchInFileArgs) -> str:
        if not self.facts.exists(args.file):
            raise NotFoundError(f"File not found: {args.file}")
        return await self._search(args.pattern, args.file)

    async def _search_in_folder(self, args: SearchInFolderArgs) -> str:
        return await self._search(args.pattern, args.folder or None)

    async def _list_files(self, args: ListFilesArgs) -> str:
        files = self.facts.list_files(args.folder or None)
        return json.dumps({"files": files[:settings.search_max_hits],
                           "truncated": len(files) > settings.search_max_hits})

    async def _get_imports(self, args: FileArgs) -> str:
        imports = self.facts.get_imports(args.file)
        return json.dumps({"file": imports.file, "imports": imports.modules, "fallback": imports.fallback})

    async def _analyze_data_flow(self, args: AnalyzeDataFlowArgs) -> str:
        fact = self.facts.find_function(args.file, args.function)
        summary = self.facts.analyze_data_flow(fact)
        self._touch(args.file)
        return json.dumps({
            "function": fact.qualified_name,
            "unparsed": summary.unparsed,
            "edges": [{"from": e.from_symbol, "to": e.to_symbol, "via": e.via.value, "line": e.line}
                      for e in summary.edges],
        })

    # ------------------------------------------------------------------ module graph tools

    async def _get_related_files(self, args: FileArgs) -> str:
        modules = self.memory.module_of.get(args.file) or self.semantics.modules_of_file(args.file)
        if not modules and not self.facts.exists(args.file):
            raise NotFoundError(f"File not found: {args.file}")

        def files_of(module_ids: List[str]) -> List[str]:
            found: List[str] = []
            for module_id in module_ids:
                try:
                    module = self.semantics.module(module_id)
                except KeyError:
                    continue
                found.extend(f for f in module.files if f != args.file and f not in found)
            return found[:RELATED_FILES_LIMIT]

        callers: List[str] = []
        callees: List[str] = []
        for module_id in modules:
            up, down = self.semantics.graph.neighbors(module_id)
            callers.extend(m for m in up if m not in callers)
            callees.extend(m for m in down if m not in callees)
        return json.dumps({
            "file": args.file,
            "modules": modules,
            "same_module_files": files_of(modules),
            "caller_modules": callers,
            "caller_module_files": files_of(callers),
            "callee_modules": callees,
            "callee_module_files": files_of(callees),
        })

    async def _get_module_call_relationships(self, args: ModuleArgs) -> str:
        try:
            module = self.semantics.module(args.module)
        except KeyError:
            known = [m.module_id for m in self.semantics.modules][:50]
            raise NotFoundError(f"Unknown module {args.module!r}; known modules: {known}")
        edges = self.semantics.graph.edges
        return json.dumps({
            "module": module.module_id,
            "label": module.label,
            "tier": self.memory.priorities.tier_of(module.module_id),
            "callers": [{"module": e.caller_module, "count": e.count}
                        for e in edges if e.callee_module == module.module_id],
            "callees": [{"module": e.callee_module, "count": e.count}
                        for e in edges if e.caller_module == module.module_id],
        })

    # ------------------------------------------------------------------ external evidence

    async def _read_sarif_results(self, args: ReadSarifArgs) -> str:
        if self.store is None:
            return json.dumps({"results": []})
        directory = self.store.sarif_dir(self.memory.project)
        results = []
        if directory.is_dir():
            for path in sorted(directory.glob("*.sarif")) + sorted(directory.glob("*.sarif.json")):
                for entry in ingest_sarif(path, self.facts.checkout):
                    if args.file is None or entry.file == args.file:
                        results.append(entry.model_dump())
        return json.dumps({"results": results[:settings.search_max_hits]})

    async def _read_shared_memory(self, args: ReadSharedMemoryArgs) -> str:
        if self.store is None:
            return json.dumps({"entries": []})
        entries = self.store.read_shared(self.memory.project, args.scope_key)
        return json.dumps({"entries": [
            {"scope_key": e.scope_key, "observation": e.observation, "run_id": e.run_id} for e in entries
        ]})

    # ------------------------------------------------------------------ memory actions

    async def _report_candidate(self, args: ReportCandidateArgs) -> str:
        if args.end_line < args.start_line:
            raise NotFoundError("end_line precedes start_line")
        if not self.facts.exists(args.file):
            raise NotFoundError(f"Candidate file does not exist: {args.file}")
        line_count = len(self.facts.read_lines(args.file))
        if args.end_line > line_count:
            raise NotFoundError(f"{args.file} has only {line_count} lines")

        location = CandidateLocation(file=args.file, start_line=args.start_line,
                                     end_line=args.end_line, function=args.function)
        for existing in self.memory.candidates:
            if existing.sink == args.sink and existing.location.overlaps(location):
                if CONFIDENCE_RANK[args.confidence] > CONFIDENCE_RANK[existing.confidence]:
                    existing.confidence = args.confidence
                existing.static_evidence.extend(
                    e for e in args.static_evidence if e not in existing.static_evidence)
                return json.dumps({"candidate_id": existing.id, "merged": True})

        candidate = Candidate(
            id=self._next_candidate_id(),
            location=location,
            path=[PathStep(**step.model_dump()) for step in args.path],
            sink=args.sink,
            static_evidence=args.static_evidence,
            confidence=args.confidence,
            reference_advisory=self.memory.advisory_id,
            iteration=self.iteration,
        )
        self.memory.candidates.append(candidate)
        logger.info(f"Candidate {candidate.id} reported at {args.file}:{args.start_line}")
        return json.dumps({"candidate_id": candidate.id, "merged": False})

    def _next_candidate_id(self) -> str:
        numbers = [int(c.id[1:]) for c in self.memory.candidates if c.id[1:].isdigit()]
        return f"C{max(numbers, default=0) + 1:03d}"

    async def _mark_file_completed(self, args: MarkFileCompletedArgs) -> str:
        if args.file not in self.memory.file_status:
            raise NotFoundError(f"{args.file} is not in the inspection scope")
        changed = self.memory.mark_completed(args.file, args.reason)
        return json.dumps({"file": args.file, "state": FileState.COMPLETED.value, "already_completed": not changed})

    async def _check_file_status(self, args: CheckFileStatusArgs) -> str:
        if args.file is not None:
            status = self.memory.file_status.get(args.file)
            if status is None:
                raise NotFoundError(f"{args.file} is not in the inspection scope")
            return json.dumps({
                "file": args.file,
                "state": status.state.value,
                "reason": status.reason,
                "tier": self.memory.file_tier.get(args.file),
                "modules": self.memory.module_of.get(args.file, []),
            })
        return json.dumps({
            "coverage": self.memory.coverage(),
            "next_files": self.memory.remaining_files()[:20],
            "candidates": self.memory.candidate_ids,
        })

    async def _finish_inspection(self, args: FinishInspectionArgs) -> str:
        self.finish_requested = True
        return json.dumps({"finished": True})
