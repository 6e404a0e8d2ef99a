"""Precedence DAG construction and the canonical evidence ordering.

Four rule families induce a strict partial order over each group's
hyperedges: within-horizon phase ordering, cross-horizon evolution of the
same family toward landfall, within-horizon causal chains, and state-before-
transition edges into cross-horizon change hyperedges. Reachability questions
are answered from precomputed transitive-closure bitsets.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

from okh.errors import CycleDetected
from okh.hypergraph import Hyperedge, KnowledgeHypergraph
from okh.relations import (
    CROSS_HORIZON_FAMILY,
    DEFAULT_VOCABULARY,
    RelationVocabulary,
)


class Order(Enum):
    """Tri-state outcome of a precedence query."""

    BEFORE = "before"
    AFTER = "after"
    UNRELATED = "unrelated"


RULE_PHASE = "phase"
RULE_EVOLUTION = "evolution"
RULE_CAUSAL = "causal"
RULE_CHANGE = "change"
ALL_RULES = frozenset({RULE_PHASE, RULE_EVOLUTION, RULE_CAUSAL, RULE_CHANGE})

# Within-horizon causal chains: advisories precede hazard forecasts, hazard
# assessments precede operational decisions and impact predictions, and
# impact predictions precede recovery status.
_CAUSAL_CHAINS: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = (
    ((4,), (6,)),
    ((6, 7), (10,)),
    ((6, 7), (11,)),
    ((11,), (12,)),
)


def effective_lead(edge: Hyperedge) -> float:
    """Lead time used for ordering: own horizon, else the earliest anchor.

    Change edges span two horizons and sort at their origin (largest) lead.
    Edges with no temporal grounding are background context and sort first.
    """
    if edge.horizon is not None:
        return float(edge.horizon)
    anchors = edge.anchor_horizons()
    if anchors:
        return float(anchors[0])
    return float("inf")


def _sort_key(
    edge: Hyperedge, vocab: RelationVocabulary
) -> tuple[float, int, int, int, str]:
    return (
        -effective_lead(edge),
        edge.family,
        vocab.rank_in_family(edge.relation) if vocab.is_canonical(edge.relation) else 0,
        edge.text_position,
        edge.id,
    )


def _direct_edges(
    edges: Sequence[Hyperedge], rules: frozenset[str]
) -> set[tuple[str, str]]:
    pairs: set[tuple[str, str]] = set()

    by_horizon: dict[int, list[Hyperedge]] = {}
    by_family: dict[int, dict[int, list[Hyperedge]]] = {}
    for edge in edges:
        if edge.family == CROSS_HORIZON_FAMILY or edge.horizon is None:
            continue
        by_horizon.setdefault(edge.horizon, []).append(edge)
        by_family.setdefault(edge.family, {}).setdefault(edge.horizon, []).append(edge)

    if RULE_PHASE in rules:
        # Same horizon, ascending family; only consecutive present families
        # are materialized, transitivity supplies the rest.
        for horizon_edges in by_horizon.values():
            families = sorted({edge.family for edge in horizon_edges})
            for earlier, later in zip(families, families[1:]):
                for src in horizon_edges:
                    if src.family != earlier:
                        continue
                    for dst in horizon_edges:
                        if dst.family == later:
                            pairs.add((src.id, dst.id))

    if RULE_EVOLUTION in rules:
        # Same family across horizons, decreasing lead time toward landfall.
        for horizons in by_family.values():
            ordered = sorted(horizons, reverse=True)
            for earlier, later in zip(ordered, ordered[1:]):
                for src in horizons[earlier]:
                    for dst in horizons[later]:
                        pairs.add((src.id, dst.id))

    if RULE_CAUSAL in rules:
        for horizon_edges in by_horizon.values():
            for src_families, dst_families in _CAUSAL_CHAINS:
                for src in horizon_edges:
                    if src.family not in src_families:
                        continue
                    for dst in horizon_edges:
                        if dst.family in dst_families:
                            pairs.add((src.id, dst.id))

    if RULE_CHANGE in rules:
        # The before-state precedes the transition that consumes it.
        for change in edges:
            if change.family != CROSS_HORIZON_FAMILY:
                continue
            anchors = change.anchor_horizons()
            if not anchors:
                continue
            origin = anchors[0]
            stems = change.state_stems()
            if not stems:
                continue
            for src in by_horizon.get(origin, []):
                if src.state_stems() & stems:
                    pairs.add((src.id, change.id))

    pairs.difference_update((edge.id, edge.id) for edge in edges)
    return pairs


def _topological_order(
    edges: Sequence[Hyperedge],
    successors: Mapping[str, set[str]],
    vocab: RelationVocabulary,
) -> list[str]:
    """Kahn's algorithm with the canonical tie-break on the ready heap."""
    indegree = {edge.id: 0 for edge in edges}
    for src in successors:
        for dst in successors[src]:
            indegree[dst] += 1
    key_of = {edge.id: _sort_key(edge, vocab) for edge in edges}
    ready = [key_of[edge_id] for edge_id, degree in indegree.items() if degree == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        edge_id = heapq.heappop(ready)[-1]
        order.append(edge_id)
        for dst in successors.get(edge_id, ()):
            indegree[dst] -= 1
            if indegree[dst] == 0:
                heapq.heappush(ready, key_of[dst])
    if len(order) != len(edges):
        stuck = sorted(edge_id for edge_id, degree in indegree.items() if degree > 0)
        raise CycleDetected(_find_cycle(stuck, successors))
    return order


def _find_cycle(stuck: list[str], successors: Mapping[str, set[str]]) -> list[str]:
    # Every stuck node keeps at least one unprocessed predecessor, so a
    # backward walk inside the stuck set must revisit a node.
    remaining = set(stuck)
    predecessors: dict[str, list[str]] = {node: [] for node in stuck}
    for src in remaining:
        for dst in successors.get(src, ()):
            if dst in remaining:
                predecessors[dst].append(src)
    node = stuck[0]
    seen: dict[str, int] = {}
    path: list[str] = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = min(predecessors[node])
    cycle = path[seen[node] :] + [node]
    cycle.reverse()
    return cycle


@dataclass
class GroupPrecedence:
    """Precedence structure for one group's hyperedges."""

    edge_ids: list[str]
    index_of: dict[str, int]
    successors: dict[str, set[str]]
    closure: list[int]
    trajectory: list[str]
    position: dict[str, int]

    def reachable(self, src: str, dst: str) -> bool:
        i = self.index_of.get(src)
        j = self.index_of.get(dst)
        if i is None or j is None:
            return False
        return bool(self.closure[i] >> j & 1)

    def direct_pairs(self) -> list[tuple[str, str]]:
        return sorted(
            (src, dst) for src, dsts in self.successors.items() for dst in dsts
        )


def _build_group(
    edges: Sequence[Hyperedge],
    successors: dict[str, set[str]],
    vocab: RelationVocabulary,
) -> GroupPrecedence:
    edge_ids = sorted(edge.id for edge in edges)
    index_of = {edge_id: i for i, edge_id in enumerate(edge_ids)}
    trajectory = _topological_order(edges, successors, vocab)
    closure = [0] * len(edge_ids)
    for edge_id in reversed(trajectory):
        mask = 0
        for dst in successors.get(edge_id, ()):
            j = index_of[dst]
            mask |= (1 << j) | closure[j]
        closure[index_of[edge_id]] = mask
    position = {edge_id: i for i, edge_id in enumerate(trajectory)}
    return GroupPrecedence(edge_ids, index_of, successors, closure, trajectory, position)


def build_precedence(
    group_edges: Iterable[Hyperedge],
    rules: frozenset[str] = ALL_RULES,
    vocab: RelationVocabulary = DEFAULT_VOCABULARY,
) -> GroupPrecedence:
    """Apply the rule families to one group and index the resulting DAG."""
    edges = sorted(group_edges, key=lambda edge: edge.id)
    seen: dict[str, Hyperedge] = {}
    for edge in edges:
        if edge.id in seen:
            raise ValueError(f"duplicate hyperedge id {edge.id}")
        seen[edge.id] = edge
    pairs = _direct_edges(edges, rules)
    successors: dict[str, set[str]] = {}
    for src, dst in pairs:
        successors.setdefault(src, set()).add(dst)
    return _build_group(edges, successors, vocab)


def canonical_trajectory(
    index: GroupPrecedence, group_edges: Iterable[Hyperedge] | None = None
) -> list[str]:
    """Deterministic full ordering of a group: topological with tie-breaks.

    Ties between DAG-incomparable edges resolve by descending lead time,
    then family, then in-family relation rank, then text position, then id.
    """
    if group_edges is None:
        return list(index.trajectory)
    edges = sorted(group_edges, key=lambda edge: edge.id)
    return _topological_order(edges, index.successors, DEFAULT_VOCABULARY)


class PrecedenceIndex:
    """Precedence across all groups of a hypergraph."""

    def __init__(self, groups: dict[str, GroupPrecedence]):
        self.groups = groups
        self.group_of: dict[str, str] = {}
        for group, prec in groups.items():
            for edge_id in prec.edge_ids:
                self.group_of[edge_id] = group

    @classmethod
    def build(
        cls,
        hypergraph: KnowledgeHypergraph,
        rules: frozenset[str] = ALL_RULES,
        vocab: RelationVocabulary = DEFAULT_VOCABULARY,
    ) -> "PrecedenceIndex":
        return cls(
            {
                group: build_precedence(hypergraph.group_edges(group), rules, vocab)
                for group in sorted(hypergraph.groups)
            }
        )

    @classmethod
    def from_direct_edges(
        cls,
        hypergraph: KnowledgeHypergraph,
        direct: Mapping[str, Sequence[tuple[str, str]]],
        vocab: RelationVocabulary = DEFAULT_VOCABULARY,
    ) -> "PrecedenceIndex":
        """Rebuild closure and positions from persisted direct DAG edges."""
        groups = {}
        for group in sorted(hypergraph.groups):
            edges = hypergraph.group_edges(group)
            known = {edge.id for edge in edges}
            successors: dict[str, set[str]] = {}
            for src, dst in direct.get(group, ()):  # stale pairs are dropped
                if src in known and dst in known:
                    successors.setdefault(src, set()).add(dst)
            groups[group] = _build_group(edges, successors, vocab)
        return cls(groups)

    def precedes(self, first: str, second: str) -> Order:
        """Whether one edge must come before or after another, if comparable."""
        group = self.group_of.get(first)
        if group is None or group != self.group_of.get(second) or first == second:
            return Order.UNRELATED
        prec = self.groups[group]
        if prec.reachable(first, second):
            return Order.BEFORE
        if prec.reachable(second, first):
            return Order.AFTER
        return Order.UNRELATED

    def reachable(self, first: str, second: str) -> bool:
        group = self.group_of.get(first)
        if group is None or group != self.group_of.get(second):
            return False
        return self.groups[group].reachable(first, second)

    def position(self, edge_id: str) -> int | None:
        group = self.group_of.get(edge_id)
        if group is None:
            return None
        return self.groups[group].position.get(edge_id)

    def trajectory(self, group: str) -> list[str]:
        return list(self.groups[group].trajectory)

    def direct_edges(self) -> dict[str, list[tuple[str, str]]]:
        return {group: prec.direct_pairs() for group, prec in self.groups.items()}


def precedes(index: PrecedenceIndex, first: str, second: str) -> Order:
    return index.precedes(first, second)
