"""Ablation evaluation: ordering quality and attribute-oracle accuracy.

Each ablation variant retrieves trajectories for the generated questions
with some objective terms disabled (or with the learned transition model
replaced by the precedence heuristic, or with retrieved steps shuffled) and
reports mean score, Kendall tau against the canonical ordering, the
structural term means, and the accuracy of a deterministic answer oracle
that reads attribute values straight off the retrieved steps.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from okh.corpus import GroupScenario, QAItem
from okh.errors import ElementMismatch
from okh.hypergraph import KnowledgeHypergraph
from okh.retrieval import (
    RetrievalWeights,
    Retriever,
    ScopeConfig,
    SearchConfig,
    beam_search,
    scope_candidates,
    trajectory_score,
)


def kendall_tau(first: Sequence[str], second: Sequence[str]) -> float:
    """Rank correlation between two orderings of the same distinct items."""
    if len(set(first)) != len(first) or len(set(second)) != len(second):
        raise ElementMismatch("orderings must not repeat items")
    if set(first) != set(second):
        raise ElementMismatch("orderings must cover the same items")
    n = len(first)
    if n < 2:
        return 1.0
    rank = {item: i for i, item in enumerate(second)}
    concordant = 0
    discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            if rank[first[i]] < rank[first[j]]:
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


class AblationVariant(str, Enum):
    FULL = "full"
    SHUFFLED = "shuffled"
    NO_LAMBDA = "no_lambda"
    NO_MU = "no_mu"
    NO_NU = "no_nu"
    NO_RHO = "no_rho"
    NO_ORDER = "no_order"
    HEURISTIC_ORDER = "heuristic_order"


def variant_weights(
    variant: AblationVariant, base: RetrievalWeights = RetrievalWeights()
) -> RetrievalWeights:
    if variant is AblationVariant.NO_LAMBDA:
        return replace(base, lambda_coherence=0.0)
    if variant is AblationVariant.NO_MU:
        return replace(base, mu_precedence=0.0)
    if variant is AblationVariant.NO_NU:
        return replace(base, nu_continuity=0.0)
    if variant is AblationVariant.NO_RHO:
        return replace(base, rho_coverage=0.0)
    if variant is AblationVariant.NO_ORDER:
        return replace(base, lambda_coherence=0.0, mu_precedence=0.0)
    return base


def variant_transition(variant: AblationVariant) -> str:
    return "heuristic" if variant is AblationVariant.HEURISTIC_ORDER else "learned"


def extract_answer(
    steps: Sequence[str],
    hypergraph: KnowledgeHypergraph,
    qa: QAItem,
) -> str | None:
    """Read the answer for a generated question directly off trajectory steps.

    final_value takes the last in-group step carrying the attribute,
    escalation compares the first and last numeric readings, and at_horizon
    takes the value at the asked lead time. Returns None when the steps do
    not support the question.
    """
    edges = [
        hypergraph.hyperedges[step]
        for step in steps
        if step in hypergraph.hyperedges
        and hypergraph.hyperedges[step].group_id == qa.group_id
    ]
    if qa.kind == "final_value":
        value = None
        for edge in edges:
            value = edge.attributes.get(qa.attribute, value)
        return value
    if qa.kind == "escalation":
        readings = []
        for edge in edges:
            raw = edge.attributes.get(qa.attribute)
            if raw is None:
                continue
            try:
                readings.append(float(raw))
            except ValueError:
                continue
        if len(readings) < 2:
            return None
        return "Yes" if readings[-1] > readings[0] else "No"
    if qa.kind == "at_horizon":
        for edge in edges:
            if edge.horizon == qa.horizon and qa.attribute in edge.attributes:
                return edge.attributes[qa.attribute]
        return None
    raise ValueError(f"unknown question kind {qa.kind!r}")


@dataclass(frozen=True)
class AblationReport:
    variant: str
    n_queries: int
    mean_score: float
    mean_tau: float
    tau_samples: int
    mean_precedence: float
    mean_continuity: float
    mean_coverage: float
    oracle_accuracy: float

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_queries": self.n_queries,
            "mean_score": self.mean_score,
            "mean_tau": self.mean_tau,
            "tau_samples": self.tau_samples,
            "mean_precedence": self.mean_precedence,
            "mean_continuity": self.mean_continuity,
            "mean_coverage": self.mean_coverage,
            "oracle_accuracy": self.oracle_accuracy,
        }


def format_report_table(reports: Sequence[AblationReport]) -> str:
    header = (
        f"{'variant':<16} {'queries':>7} {'score':>9} {'tau':>7} "
        f"{'prec':>6} {'cont':>6} {'cov':>6} {'oracle':>7}"
    )
    lines = [header, "-" * len(header)]
    for report in reports:
        lines.append(
            f"{report.variant:<16} {report.n_queries:>7d} {report.mean_score:>9.4f} "
            f"{report.mean_tau:>7.4f} {report.mean_precedence:>6.3f} "
            f"{report.mean_continuity:>6.3f} {report.mean_coverage:>6.3f} "
            f"{report.oracle_accuracy:>7.3f}"
        )
    return "\n".join(lines)


def _shuffled_steps(steps: list[str], seed: int, query_index: int) -> list[str]:
    if len(steps) < 2:
        return list(steps)
    rng = random.Random(f"{seed}:{query_index}:{len(steps)}")
    shuffled = list(steps)
    while shuffled == steps:
        rng.shuffle(shuffled)
    return shuffled


def run_ablation(
    retriever: Retriever,
    qa_items: Sequence[QAItem],
    scenarios: Sequence[GroupScenario],
    variant: AblationVariant,
    weights: RetrievalWeights = RetrievalWeights(),
    search: SearchConfig = SearchConfig(),
    scope: ScopeConfig = ScopeConfig(),
    seed: int = 0,
) -> AblationReport:
    """Retrieve the top trajectory per question under one ablation variant."""
    scenario_of = {scenario.group_id: scenario for scenario in scenarios}
    active = variant_weights(variant, weights)
    transition = variant_transition(variant)

    totals = {"score": 0.0, "precedence": 0.0, "continuity": 0.0, "coverage": 0.0}
    tau_sum = 0.0
    tau_samples = 0
    correct = 0
    answered = 0

    for query_index, qa in enumerate(qa_items):
        scenario = scenario_of.get(qa.group_id)
        if scenario is None:
            raise ValueError(f"no scenario recorded for group {qa.group_id!r}")
        query_vector = retriever.store.embed_query(qa.question)
        candidates = scope_candidates(
            query_vector, retriever.hypergraph, retriever.store, scope, qa.group_id
        )
        matrix = retriever.transition_matrix(candidates, transition)
        trajectories = beam_search(
            query_vector,
            candidates,
            retriever.hypergraph,
            retriever.store,
            retriever.precedence,
            active,
            search,
            transition_matrix=matrix,
        )
        if not trajectories:
            continue
        best = trajectories[0]
        steps = list(best.steps)
        total, breakdown = best.total_score, best.breakdown
        if variant is AblationVariant.SHUFFLED:
            steps = _shuffled_steps(steps, seed, query_index)
            index_of = {eid: i for i, eid in enumerate(candidates)}
            all_relevance = retriever.store.relevance(query_vector)
            relevance = {
                eid: float(all_relevance[retriever.store.row_of[eid]]) for eid in steps
            }
            total, breakdown = trajectory_score(
                steps,
                relevance.__getitem__,
                lambda a, b: float(matrix[index_of[a], index_of[b]]),
                retriever.precedence,
                retriever.hypergraph,
                active,
            )
        answered += 1
        totals["score"] += total
        totals["precedence"] += breakdown["precedence"]
        totals["continuity"] += breakdown["continuity"]
        totals["coverage"] += breakdown["coverage"]

        canonical = [eid for eid in scenario.ground_truth]
        in_truth = set(canonical)
        predicted = [eid for eid in steps if eid in in_truth]
        reference = [eid for eid in canonical if eid in set(predicted)]
        if len(predicted) >= 2:
            tau_sum += kendall_tau(predicted, reference)
            tau_samples += 1
        if extract_answer(steps, retriever.hypergraph, qa) == qa.expected:
            correct += 1

    n = max(answered, 1)
    return AblationReport(
        variant=variant.value,
        n_queries=answered,
        mean_score=totals["score"] / n,
        mean_tau=tau_sum / tau_samples if tau_samples else 0.0,
        tau_samples=tau_samples,
        mean_precedence=totals["precedence"] / n,
        mean_continuity=totals["continuity"] / n,
        mean_coverage=totals["coverage"] / n,
        oracle_accuracy=correct / n,
    )
