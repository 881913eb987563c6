"""
Command-line entry point
Runs the audit pipeline stage by stage with persisted state between commands
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from refaudit.config import RunConfig, load_run_config, settings
from refaudit.models.llm import TokenLedger
from refaudit.models.schemas import RepoCheckout, RepositorySemantics, TargetSelection, render_role
from refaudit.services.code_facts import CodeFacts
from refaudit.services.inspection import inspect_target
from refaudit.services.llm_client import EmbeddingBackend, LLMGateway, build_embedder, build_gateway
from refaudit.services.repo_semantics import profile_checkout
from refaudit.services.reporting import (
    build_consolidated_report,
    build_target_report,
    render_consolidated,
    write_consolidated_report,
    write_target_report,
)
from refaudit.services.sandbox import build_sandbox
from refaudit.services.similarity import select_targets
from refaudit.services.state_store import StateStore
from refaudit.services.taxonomy import shipped_taxonomy
from refaudit.services.verification import verify_target
from refaudit.services.vuln_semantics import extract_vulnerability_semantics, load_reference_document
from refaudit.utils.error_handler import AuditError, CheckoutError, StageMissingError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)

# Flags that map one-to-one onto RunConfig fields
CONFIG_FLAGS = (
    "state_dir", "chat_backend", "chat_endpoint", "chat_model", "fallback_endpoint",
    "embedding_backend", "embedding_endpoint", "embedding_model", "scripted_fixture",
    "tau_m", "keep_threshold", "max_iterations", "turn_budget", "poc_max_attempts",
    "sandbox_mode", "verify_concurrency",
)


def setup_logging(level: Optional[str] = None):
    """Configure root logging once per process"""
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )


class PipelineContext:
    """
    Everything one command needs: configuration, state store and lazily built backends

    Backends are only constructed when a stage actually has work to do, so a cached
    stage never touches them.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.store = StateStore(config.state_dir)
        self.ledger = TokenLedger()
        self._gateway: Optional[LLMGateway] = None
        self._embedder: Optional[EmbeddingBackend] = None

    @property
    def gateway(self) -> LLMGateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config, self.ledger)
        return self._gateway

    @property
    def embedder(self) -> EmbeddingBackend:
        if self._embedder is None:
            self._embedder = build_embedder(self.config)
        return self._embedder

    def require_profile(self, project: str, commit: str) -> RepositorySemantics:
        if not self.store.has_semantics(project, commit):
            raise StageMissingError(
                "profiling",
                f"No profile for {project}@{commit}; run "
                f"`refaudit profile --root <checkout> --project {project} --commit {commit}` first",
            )
        return self.store.load_semantics(project, commit)

    def require_vuln(self, advisory_id: str):
        if not self.store.has_vuln(advisory_id):
            raise StageMissingError(
                "vuln-extraction",
                f"No vulnerability semantics for {advisory_id}; run `refaudit extract-vuln` first",
            )
        return self.store.load_vuln(advisory_id)

    def require_selection(self, advisory_id: str) -> TargetSelection:
        if not self.store.has_selection(advisory_id):
            raise StageMissingError(
                "selection", f"No target selection for {advisory_id}; run `refaudit select` first")
        return self.store.load_selection(advisory_id)


def open_checkout(root: Optional[Path], semantics: RepositorySemantics) -> RepoCheckout:
    """Checkout given on the command line, else the one recorded at profiling time"""
    checkout = semantics.checkout
    return RepoCheckout.open(root or checkout.root_path, checkout.project_name, checkout.commit_id)


# --------------------------------------------------------------------------- commands

async def cmd_profile(ctx: PipelineContext, args: argparse.Namespace) -> int:
    """Profile one checkout into repository semantics"""
    checkout = RepoCheckout.open(args.root, args.project, args.commit)
    if ctx.store.has_semantics(args.project, args.commit) and not args.fresh:
        print(f"✅ Profile for {args.project}@{args.commit} already exists (use --fresh to rebuild)")
        return 0

    semantics = await profile_checkout(checkout, shipped_taxonomy(), ctx.gateway, ctx.config)
    path = ctx.store.save_semantics(semantics)
    usage = semantics.token_usage
    print(f"✅ Profiled {args.project}@{args.commit}: {len(semantics.modules)} module(s), "
          f"{len(semantics.unassigned)} unassigned file(s)")
    print(f"📄 {path}")
    print(f"🔢 Tokens: {usage.input_tokens} in / {usage.output_tokens} out")
    if semantics.summary.degraded:
        print("⚠️  Repository summary is degraded, see diagnostics in the profile")
    return 0


async def cmd_extract_vuln(ctx: PipelineContext, args: argparse.Namespace) -> int:
    """Turn a reference document into vulnerability semantics"""
    document = load_reference_document(args.reference)
    if ctx.store.has_vuln(document.advisory_id) and not args.fresh:
        print(f"✅ Vulnerability semantics for {document.advisory_id} already exist (use --fresh to rebuild)")
        return 0

    reference = ctx.require_profile(document.project, document.affected_commit)
    facts: Optional[CodeFacts] = None
    try:
        facts = CodeFacts(open_checkout(args.root, reference))
    except CheckoutError as e:
        if args.root is not None:
            raise
        logger.warning(f"Reference checkout unavailable, extracting without code snippets: {e}")

    semantics = await extract_vulnerability_semantics(document, reference, ctx.gateway, facts)
    path = ctx.store.save_vuln(semantics)
    print(f"✅ Extracted {semantics.advisory_id} ({semantics.features.vuln_family})")
    print(f"🧭 Affected modules: {', '.join(render_role(r) for r in semantics.affected_modules)}")
    if semantics.chain.missing_files:
        print(f"⚠️  Chain files missing from the checkout: {', '.join(semantics.chain.missing_files)}")
    print(f"📄 {path}")
    return 0


def print_selection(selection: TargetSelection):
    print(f"Rule applied: {selection.rule_applied}")
    chosen = {(t.project, t.commit) for t in selection.selected}
    for target in selection.ranked:
        marker = "*" if (target.project, target.commit) in chosen else " "
        print(f" {marker} {target.breakdown.overall:.3f}  {target.project}@{target.commit}")
    if selection.extra_same_project is not None:
        extra = selection.extra_same_project
        print(f" + {extra.breakdown.overall:.3f}  {extra.project}@{extra.commit} (same project)")


async def cmd_select(ctx: PipelineContext, args: argparse.Namespace) -> int:
    """Rank profiled revisions against the reference and persist the scan set"""
    if ctx.store.has_selection(args.advisory) and not args.fresh:
        print(f"✅ Selection for {args.advisory} already exists (use --fresh to recompute)")
        print_selection(ctx.store.load_selection(args.advisory))
        return 0

    vuln = ctx.require_vuln(args.advisory)
    reference = ctx.require_profile(vuln.reference_project, vuln.reference_commit)
    candidates = [s for s in ctx.store.iter_semantics() if s.checkout.key != reference.checkout.key]
    if not candidates:
        print(f"⚠️  Selection for {args.advisory} is empty: no profiled revision besides the reference")
        return 0

    selection = await select_targets(reference, candidates, ctx.embedder, ctx.config, args.advisory)
    path = ctx.store.save_selection(args.advisory, selection)
    print_selection(selection)
    print(f"📄 {path}")
    return 0


def print_inspection(memory):
    coverage = ", ".join(f"{tier} {v['completed']}/{v['total']}" for tier, v in memory.coverage().items())
    print(f"✅ Inspection of {memory.project}@{memory.commit}: {len(memory.candidates)} candidate(s) "
          f"after {memory.iteration_count} iteration(s)")
    print(f"📊 Coverage: {coverage}")
    for candidate in memory.candidates:
        location = candidate.location
        print(f"   - {candidate.id} [{candidate.confidence}] {location.file}:{location.start_line} "
              f"{candidate.sink}")


async def cmd_inspect(ctx: PipelineContext, args: argparse.Namespace) -> int:
    """Run the iterative inspection over one selected target"""
    vuln = ctx.require_vuln(args.advisory)
    selection = ctx.require_selection(args.advisory)
    if (args.project, args.commit) not in selection.targets():
        raise StageMissingError(
            "selection", f"{args.project}@{args.commit} is not among the targets selected for {args.advisory}")
    target = ctx.require_profile(args.project, args.commit)

    store = ctx.store
    if not args.fresh and store.has_memory(args.advisory, args.project, args.commit):
        memory = store.load_memory(args.advisory, args.project, args.commit)
        if memory.finished:
            print_inspection(memory)
            return 0

    checkout = open_checkout(args.root, target)
    memory = await inspect_target(checkout, target, vuln, ctx.gateway, ctx.embedder, store,
                                  ctx.config, fresh=args.fresh)
    print_inspection(memory)
    return 0


async def cmd_verify(ctx: PipelineContext, args: argparse.Namespace) -> int:
    """Verify the candidates of a finished inspection and write the target report"""
    vuln = ctx.require_vuln(args.advisory)
    target = ctx.require_profile(args.project, args.commit)
    store = ctx.store
    if not store.has_memory(args.advisory, args.project, args.commit):
        raise StageMissingError("inspection", f"No inspection memory for {args.project}@{args.commit}; "
                                              f"run `refaudit inspect` first")
    memory = store.load_memory(args.advisory, args.project, args.commit)
    if not memory.finished:
        raise StageMissingError("inspection", f"Inspection of {args.project}@{args.commit} is not finished; "
                                              f"rerun `refaudit inspect` to resume it")

    if store.has_findings(args.advisory, args.project, args.commit) and not args.fresh:
        finding_set = store.load_findings(args.advisory, args.project, args.commit)
        print(f"✅ Findings for {args.project}@{args.commit} already exist (use --fresh to re-verify)")
    else:
        # an unreadable checkout is reported per candidate as unverifiable
        try:
            checkout = open_checkout(args.root, target)
        except CheckoutError as e:
            logger.warning(f"Checkout unavailable for verification: {e}")
            checkout = target.checkout
        finding_set = await verify_target(checkout, target, vuln, memory, ctx.gateway,
                                          build_sandbox(ctx.config), store, ctx.config, fresh=args.fresh)

    report = build_target_report(store, args.advisory, args.project, args.commit)
    json_path, text_path = write_target_report(store, report, finding_set)
    counts = ", ".join(f"{kind} {n}" for kind, n in report.counts.items() if n)
    print(f"✅ Verified {len(finding_set.findings)} candidate(s): {counts or 'none'}")
    if report.static_only:
        print("⚠️  STATIC-ONLY: no proof-of-concept was executed")
    print(f"📄 {json_path}")
    print(f"📄 {text_path}")
    return 0


async def cmd_report(ctx: PipelineContext, args: argparse.Namespace) -> int:
    """Write the consolidated cross-target report for one advisory"""
    store = ctx.store
    report = build_consolidated_report(store, args.advisory)
    for target in report.targets:
        finding_set = None
        if store.has_findings(args.advisory, target.project, target.commit):
            finding_set = store.load_findings(args.advisory, target.project, target.commit)
        write_target_report(store, target, finding_set)
    json_path, text_path = write_consolidated_report(store, report)
    print(render_consolidated(report))
    print(f"📄 {json_path}")
    print(f"📄 {text_path}")
    return 0


COMMANDS = {
    "profile": cmd_profile,
    "extract-vuln": cmd_extract_vuln,
    "select": cmd_select,
    "inspect": cmd_inspect,
    "verify": cmd_verify,
    "report": cmd_report,
}


# --------------------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration file")
    common.add_argument("--state-dir", dest="state_dir", type=Path)
    common.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--fresh", action="store_true", help="recompute the stage even if its artifact exists")
    common.add_argument("--chat-backend", dest="chat_backend", choices=["http", "scripted"])
    common.add_argument("--chat-endpoint", dest="chat_endpoint")
    common.add_argument("--chat-model", dest="chat_model")
    common.add_argument("--fallback-endpoint", dest="fallback_endpoint")
    common.add_argument("--embedding-backend", dest="embedding_backend", choices=["http", "hashing", "scripted"])
    common.add_argument("--embedding-endpoint", dest="embedding_endpoint")
    common.add_argument("--embedding-model", dest="embedding_model")
    common.add_argument("--scripted-fixture", dest="scripted_fixture", type=Path)
    common.add_argument("--tau-m", dest="tau_m", type=float)
    common.add_argument("--keep-threshold", dest="keep_threshold", type=float)
    common.add_argument("--max-iterations", dest="max_iterations", type=int)
    common.add_argument("--turn-budget", dest="turn_budget", type=int)
    common.add_argument("--poc-max-attempts", dest="poc_max_attempts", type=int)
    common.add_argument("--sandbox-mode", dest="sandbox_mode", choices=["container", "fake", "off"])
    common.add_argument("--verify-concurrency", dest="verify_concurrency", type=int)

    parser = argparse.ArgumentParser(
        prog="refaudit",
        description="Reference-driven vulnerability variant auditing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    profile = sub.add_parser("profile", parents=[common], help="profile a repository checkout")
    profile.add_argument("--root", type=Path, required=True)
    profile.add_argument("--project", required=True)
    profile.add_argument("--commit", required=True)

    extract = sub.add_parser("extract-vuln", parents=[common], help="extract vulnerability semantics")
    extract.add_argument("--reference", type=Path, required=True, help="reference vulnerability document")
    extract.add_argument("--root", type=Path, help="reference checkout (defaults to the profiled root)")

    select = sub.add_parser("select", parents=[common], help="select target revisions")
    select.add_argument("--advisory", required=True)

    for name, text in (("inspect", "inspect one target revision"), ("verify", "verify inspection candidates")):
        target = sub.add_parser(name, parents=[common], help=text)
        target.add_argument("--advisory", required=True)
        target.add_argument("--project", required=True)
        target.add_argument("--commit", required=True)
        target.add_argument("--root", type=Path, help="target checkout (defaults to the profiled root)")

    report = sub.add_parser("report", parents=[common], help="write the consolidated report")
    report.add_argument("--advisory", required=True)
    return parser


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {name: getattr(args, name, None) for name in CONFIG_FLAGS}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = load_run_config(args.config, flag_overrides(args))
        ctx = PipelineContext(config)
        with ctx.store.lock():
            code = asyncio.run(COMMANDS[args.command](ctx, args))
        total = ctx.ledger.snapshot().total
        if total.input_tokens or total.output_tokens:
            logger.info(f"Token usage this run: {total.input_tokens} in / {total.output_tokens} out")
        return code
    except AuditError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        logger.debug("Traceback", exc_info=True)
        print(f"❌ Unexpected error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
