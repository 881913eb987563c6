"""
Similarity service
Text similarity through the embedder, set Jaccard, overall repository score,
target revision selection and module promotion similarity
"""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from refaudit.config import RunConfig
from refaudit.models.schemas import (
    ModuleDescriptor,
    RankedTarget,
    RepositorySemantics,
    Role,
    SimilarityBreakdown,
    TargetSelection,
    TokenUsage,
    render_role,
)
from refaudit.services.llm_client import EmbeddingBackend

logger = logging.getLogger(__name__)

# cosine values are rounded so that constructed vectors land exactly on thresholds
SIM_DECIMALS = 12


def _cosine(u: Sequence[float], v: Sequence[float]) -> float:
    value = float(np.dot(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)))
    return round(float(np.clip(value, 0.0, 1.0)), SIM_DECIMALS)


async def text_similarity(a: str, b: str, embedder: EmbeddingBackend) -> float:
    """
    Cosine similarity of unit-normalized embeddings, clamped to [0, 1]

    Raises:
        ValueError: either text is empty
        EmbeddingError: embedder failure, never replaced by a fallback score
    """
    if not a or not b:
        raise ValueError("text_similarity requires two non-empty texts")
    result = await embedder.embed([a, b])
    return _cosine(result.vectors[0], result.vectors[1])


def jaccard(a: Iterable, b: Iterable) -> float:
    """|a & b| / |a | b|; two empty sets score 0.0"""
    left, right = set(a), set(b)
    union = left | right
    if not union:
        return 0.0
    return len(left & right) / len(union)


def overall_score(description_sim: float, application_sim: float, user_sim: float,
                  module_jaccard: float, dependency_jaccard: float) -> SimilarityBreakdown:
    """Equal-weight mean of the five components"""
    overall = (description_sim + application_sim + user_sim + module_jaccard + dependency_jaccard) / 5.0
    return SimilarityBreakdown(
        description_sim=description_sim,
        application_sim=application_sim,
        user_sim=user_sim,
        module_jaccard=module_jaccard,
        dependency_jaccard=dependency_jaccard,
        overall=overall,
    )


async def score_pair(ref: RepositorySemantics, tgt: RepositorySemantics,
                     embedder: EmbeddingBackend) -> Tuple[SimilarityBreakdown, TokenUsage]:
    """
    Score a candidate revision against the reference

    The three summary texts of both sides are embedded in one batch.
    """
    texts = [
        ref.summary.description, tgt.summary.description,
        ref.summary.application_scenario, tgt.summary.application_scenario,
        ref.summary.target_user, tgt.summary.target_user,
    ]
    if not all(texts):
        raise ValueError("score_pair requires non-empty summary texts")
    result = await embedder.embed(texts)
    vectors = result.vectors
    breakdown = overall_score(
        description_sim=_cosine(vectors[0], vectors[1]),
        application_sim=_cosine(vectors[2], vectors[3]),
        user_sim=_cosine(vectors[4], vectors[5]),
        module_jaccard=jaccard(ref.role_set(), tgt.role_set()),
        dependency_jaccard=jaccard(ref.summary.key_dependencies, tgt.summary.key_dependencies),
    )
    return breakdown, result.usage


def rank_key(target: RankedTarget) -> Tuple[float, str, str]:
    return -target.breakdown.overall, target.project, target.commit


def apply_selection_rule(reference_key: Tuple[str, str], ranked: List[RankedTarget],
                         keep_threshold: float = 0.5, min_threshold_hits: int = 3,
                         supplement_size: int = 5) -> TargetSelection:
    """
    Apply the keep/supplement rule to scored candidates

    Args:
        reference_key: (project, commit) of the reference; never selected
        ranked: scored candidates in any order
        keep_threshold: overall score a revision needs to be kept
        min_threshold_hits: passers needed for the threshold rule to apply
        supplement_size: size of the top-k fallback

    Returns:
        TargetSelection with ranked sorted by overall descending, ties by (project, commit)
    """
    ordered = sorted((t for t in ranked if (t.project, t.commit) != tuple(reference_key)), key=rank_key)
    passers = [t for t in ordered if t.breakdown.overall >= keep_threshold]
    if len(passers) >= min_threshold_hits:
        selected, rule = passers, "threshold"
    else:
        selected, rule = ordered[:supplement_size], "top5_supplement"

    chosen = {(t.project, t.commit) for t in selected}
    ref_project, ref_commit = reference_key
    extra: Optional[RankedTarget] = None
    for target in ordered:
        if target.project == ref_project and target.commit != ref_commit and (target.project, target.commit) not in chosen:
            extra = target
            break

    return TargetSelection(ranked=ordered, selected=selected, rule_applied=rule, extra_same_project=extra)


async def select_targets(ref: RepositorySemantics, candidates: List[RepositorySemantics],
                         embedder: EmbeddingBackend, config: Optional[RunConfig] = None,
                         advisory_id: Optional[str] = None) -> TargetSelection:
    """
    Rank every candidate revision against the reference and choose the scan set

    Raises:
        ValueError: no candidate besides the reference itself
    """
    config = config or RunConfig()
    reference_key = ref.checkout.key
    pool = [c for c in candidates if c.checkout.key != reference_key]
    if not pool:
        raise ValueError("select_targets requires at least one candidate revision")

    logger.info(f"=== Selecting targets for {advisory_id or reference_key[0]} among {len(pool)} revisions ===")
    ranked: List[RankedTarget] = []
    usage = TokenUsage()
    for candidate in pool:
        breakdown, pair_usage = await score_pair(ref, candidate, embedder)
        usage = usage + pair_usage
        ranked.append(RankedTarget(
            project=candidate.checkout.project_name,
            commit=candidate.checkout.commit_id,
            breakdown=breakdown,
        ))
        logger.debug(f"{candidate.checkout.project_name}@{candidate.checkout.commit_id}: "
                     f"overall {breakdown.overall:.3f}")

    selection = apply_selection_rule(reference_key, ranked, config.keep_threshold,
                                     config.min_threshold_hits, config.supplement_size)
    selection.advisory_id = advisory_id
    selection.token_usage = usage
    logger.info(f"Selected {len(selection.selected)} revision(s) by {selection.rule_applied}"
                + (f", plus same-project {selection.extra_same_project.commit}"
                   if selection.extra_same_project else ""))
    return selection


async def module_promotion_sim(descriptor: ModuleDescriptor, affected_role: Role,
                               embedder: EmbeddingBackend) -> float:
    """Similarity between a module descriptor and an affected role rendered as 'coarse :: role'"""
    text = descriptor.descriptor_text()
    if not text:
        raise ValueError(f"Module {descriptor.module_id} has an empty descriptor text")
    return await text_similarity(text, render_role(affected_role), embedder)


async def promotion_similarities(modules: List[ModuleDescriptor], affected_roles: List[Role],
                                 embedder: EmbeddingBackend) -> Dict[str, float]:
    """
    Best promotion similarity of each module over all affected roles, in one embedding batch
    """
    if not modules or not affected_roles:
        return {m.module_id: 0.0 for m in modules}
    role_texts = [render_role(r) for r in affected_roles]
    module_texts = [m.descriptor_text() for m in modules]
    if not all(module_texts):
        raise ValueError("Every module needs a non-empty descriptor text")
    result = await embedder.embed(module_texts + role_texts)
    module_vectors = result.vectors[:len(modules)]
    role_vectors = result.vectors[len(modules):]
    return {
        module.module_id: max(_cosine(vector, role_vector) for role_vector in role_vectors)
        for module, vector in zip(modules, module_vectors)
    }


def promotes(similarity: float, tau: float) -> bool:
    """Inclusive threshold"""
    return similarity >= tau
