"""Trajectory retrieval: candidate scoping, beam search, and exact DP.

A trajectory is an ordered sequence of hyperedges scored by query relevance
plus weighted coherence (learned transition log-probability), precedence
consistency, entity continuity, and phase coverage. Beam search explores
distinct-step trajectories with a diversity penalty; the Viterbi recurrence
gives the exact optimum of the two-term relaxation for oracle checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from okh.embedding import EmbeddingStore
from okh.errors import EmptyCorpus, UnknownEdge
from okh.hypergraph import Hyperedge, KnowledgeHypergraph
from okh.precedence import Order, PrecedenceIndex
from okh.relations import COVERAGE_PHASES, phase_of_family
from okh.transition import TransitionModel, log_softmax_rows

HEURISTIC_FORWARD = 0.0
HEURISTIC_UNRELATED = -1.0
HEURISTIC_BACKWARD = -5.0

_PHASE_INDEX = {phase: i for i, phase in enumerate(COVERAGE_PHASES)}
_N_PHASES = len(COVERAGE_PHASES)


@dataclass(frozen=True)
class RetrievalWeights:
    """Objective weights: coherence, precedence, continuity, coverage."""

    lambda_coherence: float = 1.2
    mu_precedence: float = 0.3
    nu_continuity: float = 0.2
    rho_coverage: float = 0.5

    def __post_init__(self) -> None:
        for name in ("lambda_coherence", "mu_precedence", "nu_continuity", "rho_coverage"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class SearchConfig:
    beam_width: int = 8
    trajectory_length: int = 4
    num_trajectories: int = 3
    diversity_overlap_threshold: float = 0.5
    diversity_penalty: float = 0.5

    def __post_init__(self) -> None:
        if self.beam_width < 1 or self.trajectory_length < 1 or self.num_trajectories < 1:
            raise ValueError("beam width, trajectory length, and path count must be >= 1")
        if not 0.0 <= self.diversity_overlap_threshold <= 1.0:
            raise ValueError("diversity overlap threshold must be in [0, 1]")
        if self.diversity_penalty < 0:
            raise ValueError("diversity penalty must be non-negative")


@dataclass(frozen=True)
class ScopeConfig:
    top_k: int = 80
    pool_cap: int = 150
    group_reserve_fraction: float = 0.40

    def __post_init__(self) -> None:
        if self.top_k < 1 or self.pool_cap < 1:
            raise ValueError("top_k and pool_cap must be >= 1")
        if not 0.0 <= self.group_reserve_fraction <= 1.0:
            raise ValueError("group reserve fraction must be in [0, 1]")


@dataclass
class Trajectory:
    """Ordered hyperedge steps with the total score and its raw terms."""

    steps: list[str]
    total_score: float
    breakdown: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "steps": list(self.steps),
            "total": self.total_score,
            "breakdown": dict(sorted(self.breakdown.items())),
        }


def jaccard(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def precedence_consistency(steps: Sequence[str], precedence: PrecedenceIndex) -> float:
    """Fraction of comparable consecutive pairs that run in forward order.

    Pairs the partial order says nothing about are excluded from the
    denominator; a trajectory with no comparable pair scores 0.
    """
    forward = 0
    comparable = 0
    for first, second in zip(steps, steps[1:]):
        order = precedence.precedes(first, second)
        if order is Order.BEFORE:
            forward += 1
            comparable += 1
        elif order is Order.AFTER:
            comparable += 1
    return forward / comparable if comparable else 0.0


def entity_continuity(steps: Sequence[str], hypergraph: KnowledgeHypergraph) -> float:
    """Mean Jaccard overlap of consecutive entity sets; 0 for single steps."""
    if len(steps) < 2:
        return 0.0
    edges = [_edge(hypergraph, step) for step in steps]
    overlaps = [
        jaccard(prev.entity_ids, cur.entity_ids) for prev, cur in zip(edges, edges[1:])
    ]
    return float(sum(overlaps) / len(overlaps))


def phase_coverage(steps: Sequence[str], hypergraph: KnowledgeHypergraph) -> float:
    """Fraction of the six coverage phases visited by the trajectory."""
    seen = set()
    for step in steps:
        phase = phase_of_family(_edge(hypergraph, step).family)
        if phase in _PHASE_INDEX:
            seen.add(phase)
    return len(seen) / _N_PHASES


def _edge(hypergraph: KnowledgeHypergraph, edge_id: str) -> Hyperedge:
    edge = hypergraph.hyperedges.get(edge_id)
    if edge is None:
        raise UnknownEdge(f"hyperedge {edge_id!r} is not in the graph")
    return edge


def trajectory_score(
    steps: Sequence[str],
    relevance_of: Callable[[str], float],
    transition_of: Callable[[str, str], float],
    precedence: PrecedenceIndex,
    hypergraph: KnowledgeHypergraph,
    weights: RetrievalWeights,
) -> tuple[float, dict[str, float]]:
    """Total objective value of a trajectory plus its raw term breakdown.

    Sums are exactly rounded (math.fsum) so trajectories that are equal as
    step multisets score bit-identically regardless of visit order; ranking
    ties then fall through to the explicit tie-break instead of summation
    noise.
    """
    relevance = math.fsum(relevance_of(step) for step in steps)
    coherence = math.fsum(
        transition_of(prev, cur) for prev, cur in zip(steps, steps[1:])
    )
    precedence_term = precedence_consistency(steps, precedence)
    continuity = entity_continuity(steps, hypergraph)
    coverage = phase_coverage(steps, hypergraph)
    total = math.fsum(
        (
            relevance,
            weights.lambda_coherence * coherence,
            weights.mu_precedence * precedence_term,
            weights.nu_continuity * continuity,
            weights.rho_coverage * coverage,
        )
    )
    breakdown = {
        "relevance": relevance,
        "coherence": coherence,
        "precedence": precedence_term,
        "continuity": continuity,
        "coverage": coverage,
    }
    return total, breakdown


def scope_candidates(
    query_vector: np.ndarray,
    hypergraph: KnowledgeHypergraph,
    store: EmbeddingStore,
    config: ScopeConfig = ScopeConfig(),
    query_group: str | None = None,
) -> list[str]:
    """Bounded candidate pool: relevance seeds, graph expansion, group reserve.

    The top-k edges by cosine seed the pool, expanded with every edge from a
    seed's group and every edge sharing an entity with a seed. When the
    query's group is known, a fixed share of the pool is reserved for that
    group's most relevant edges before the remainder fills by relevance.
    Ties always break on edge id.
    """
    if not hypergraph.hyperedges:
        raise EmptyCorpus("candidate scoping needs a non-empty hypergraph")
    relevance = store.relevance(query_vector)
    rel_of = {edge_id: float(relevance[row]) for edge_id, row in store.row_of.items()}
    by_relevance = sorted(store.ids, key=lambda eid: (-rel_of[eid], eid))
    seeds = by_relevance[: config.top_k]

    pool = set(seeds)
    for group in {_edge(hypergraph, seed).group_id for seed in seeds}:
        pool.update(hypergraph.groups.get(group, ()))
    entity_index = hypergraph.edges_by_entity
    for seed in seeds:
        for entity_id in _edge(hypergraph, seed).entity_ids:
            pool.update(entity_index.get(entity_id, ()))

    def ranked(ids: Iterable[str]) -> list[str]:
        return sorted(ids, key=lambda eid: (-rel_of[eid], eid))

    if query_group is not None and query_group in hypergraph.groups:
        reserve = math.ceil(config.group_reserve_fraction * config.pool_cap)
        in_group = ranked(hypergraph.groups[query_group])[:reserve]
        chosen = set(in_group)
        remainder = ranked(pool - chosen)[: max(config.pool_cap - len(chosen), 0)]
        chosen.update(remainder)
        return ranked(chosen)
    return ranked(pool)[: config.pool_cap]


def heuristic_transition_matrix(
    candidate_ids: Sequence[str], precedence: PrecedenceIndex
) -> np.ndarray:
    """Rule-derived stand-in for learned transitions: forward 0, unrelated -1,
    backward -5."""
    n = len(candidate_ids)
    matrix = np.full((n, n), HEURISTIC_UNRELATED, dtype=np.float64)
    for i, src in enumerate(candidate_ids):
        for j, dst in enumerate(candidate_ids):
            if i == j:
                continue
            order = precedence.precedes(src, dst)
            if order is Order.BEFORE:
                matrix[i, j] = HEURISTIC_FORWARD
            elif order is Order.AFTER:
                matrix[i, j] = HEURISTIC_BACKWARD
    return matrix


class _CandidateContext:
    """Per-query precomputation shared by the search loops."""

    def __init__(
        self,
        query_vector: np.ndarray,
        candidate_ids: Sequence[str],
        hypergraph: KnowledgeHypergraph,
        store: EmbeddingStore,
        precedence: PrecedenceIndex | None,
        model: TransitionModel | None,
        transition_matrix: np.ndarray | None,
    ):
        self.ids = list(candidate_ids)
        n = len(self.ids)
        rows = np.stack([store.vector(eid) for eid in self.ids]) if n else np.zeros((0, store.dim))
        self.relevance = rows @ np.asarray(query_vector, dtype=np.float64)
        if transition_matrix is not None:
            if transition_matrix.shape != (n, n):
                raise ValueError("transition matrix must align with the candidate list")
            self.log_transition = transition_matrix
        elif model is not None and n:
            self.log_transition = model.log_transition_matrix(rows)
        else:
            self.log_transition = np.zeros((n, n), dtype=np.float64)

        self.edges = [_edge(hypergraph, eid) for eid in self.ids]
        entity_universe: dict[str, int] = {}
        self.entity_masks = []
        for edge in self.edges:
            mask = 0
            for entity_id in edge.entity_ids:
                bit = entity_universe.setdefault(entity_id, len(entity_universe))
                mask |= 1 << bit
            self.entity_masks.append(mask)
        self.phase_index = np.array(
            [_PHASE_INDEX.get(phase_of_family(edge.family), -1) for edge in self.edges],
            dtype=np.int64,
        )
        self.reach_masks = [0] * n
        if precedence is not None:
            index_of = {eid: i for i, eid in enumerate(self.ids)}
            for group, prec in precedence.groups.items():
                members = [
                    (index_of[eid], prec.index_of[eid]) for eid in prec.edge_ids if eid in index_of
                ]
                for i, local_i in members:
                    closure = prec.closure[local_i]
                    mask = 0
                    for j, local_j in members:
                        if closure >> local_j & 1:
                            mask |= 1 << j
                    self.reach_masks[i] = mask
        self._jaccard_rows: dict[int, np.ndarray] = {}
        # Tie-break piece per candidate: higher relevance first, then id.
        self.tie_piece = [(-float(self.relevance[i]), self.ids[i]) for i in range(n)]

    def jaccard_row(self, i: int) -> np.ndarray:
        row = self._jaccard_rows.get(i)
        if row is None:
            mask_i = self.entity_masks[i]
            row = np.array(
                [
                    (mask_i & mask_j).bit_count() / (mask_i | mask_j).bit_count()
                    for mask_j in self.entity_masks
                ],
                dtype=np.float64,
            )
            self._jaccard_rows[i] = row
        return row

    def reach_row(self, i: int) -> np.ndarray:
        mask = self.reach_masks[i]
        return np.array(
            [float(mask >> j & 1) for j in range(len(self.ids))], dtype=np.float64
        )


@dataclass
class _Beam:
    run_score: float
    tie: tuple
    steps: tuple[int, ...]
    used: int
    covered: int
    last: int
    # Per-step score increments; run_score is their exactly-rounded sum so
    # beams over the same step multiset tie instead of diverging by ulps.
    pieces: tuple[float, ...] = ()


def _greedy_diverse_select(
    entries: list[tuple[float, tuple, _Beam]],
    limit: int,
    threshold: float,
    penalty: float,
) -> list[tuple[float, _Beam]]:
    """Keep the best `limit` entries, penalizing near-duplicates of kept ones.

    Entries arrive as (score, tie, beam). Each candidate whose step overlap
    with an already-kept, higher-ranked beam exceeds the threshold has the
    penalty subtracted before the final comparison.
    """
    entries.sort(key=lambda item: (-item[0], item[1]))
    selected: list[tuple[float, tuple, _Beam]] = []

    for score, tie, beam in entries:
        if selected and len(selected) == limit:
            worst_penalized = min(kept for kept, _, _ in selected)
            if score < worst_penalized:
                # Sorted input: this and every later entry loses to the kept
                # set even before any penalty.
                break
        length = len(beam.steps)
        penalized = score
        if penalty > 0:
            for _, _, kept in selected:
                shared = (beam.used & kept.used).bit_count() / max(length, 1)
                if shared > threshold:
                    penalized = score - penalty
                    break
        if len(selected) < limit:
            selected.append((penalized, tie, beam))
        else:
            worst = max(range(len(selected)), key=lambda k: (-selected[k][0], selected[k][1]))
            if (-penalized, tie) < (-selected[worst][0], selected[worst][1]):
                selected[worst] = (penalized, tie, beam)
    selected.sort(key=lambda item: (-item[0], item[1]))
    return [(score, beam) for score, _, beam in selected]


def beam_search(
    query_vector: np.ndarray,
    candidate_ids: Sequence[str],
    hypergraph: KnowledgeHypergraph,
    store: EmbeddingStore,
    precedence: PrecedenceIndex,
    weights: RetrievalWeights = RetrievalWeights(),
    config: SearchConfig = SearchConfig(),
    model: TransitionModel | None = None,
    transition_matrix: np.ndarray | None = None,
) -> list[Trajectory]:
    """Beam search over distinct-step trajectories.

    Beams start from the top 2B singletons by relevance. Each round scores
    every unused candidate with relevance, weighted transition
    log-probability, a precedence bonus for forward-reachable steps, entity
    continuity with the previous step, and the marginal phase coverage gain.
    Retention keeps the best B beams after the diversity penalty. The final
    trajectories are re-scored with the exact objective, where precedence
    and continuity are normalized over the whole trajectory.
    """
    ctx = _CandidateContext(
        query_vector, candidate_ids, hypergraph, store, precedence, model, transition_matrix
    )
    n = len(ctx.ids)
    if n == 0:
        return []

    def singleton(i: int) -> _Beam:
        phase = int(ctx.phase_index[i])
        covered = 1 << phase if phase >= 0 else 0
        gain = weights.rho_coverage / _N_PHASES if phase >= 0 else 0.0
        piece = float(ctx.relevance[i]) + gain
        return _Beam(
            run_score=piece,
            tie=(ctx.tie_piece[i],),
            steps=(i,),
            used=1 << i,
            covered=covered,
            last=i,
            pieces=(piece,),
        )

    by_relevance = sorted(range(n), key=lambda i: ctx.tie_piece[i])
    beams = [singleton(i) for i in by_relevance[: 2 * config.beam_width]]

    for _ in range(config.trajectory_length - 1):
        extensions: list[tuple[float, tuple, _Beam]] = []
        for beam in beams:
            if beam.used.bit_count() == n:
                continue
            scores = (
                ctx.relevance
                + weights.lambda_coherence * ctx.log_transition[beam.last]
                + weights.mu_precedence * ctx.reach_row(beam.last)
                + weights.nu_continuity * ctx.jaccard_row(beam.last)
            )
            if weights.rho_coverage:
                new_phase = (ctx.phase_index >= 0) & (
                    (beam.covered >> np.maximum(ctx.phase_index, 0)) & 1 == 0
                )
                scores = scores + weights.rho_coverage * new_phase / _N_PHASES
            for j in range(n):
                if beam.used >> j & 1:
                    continue
                phase = int(ctx.phase_index[j])
                covered = beam.covered | (1 << phase if phase >= 0 else 0)
                pieces = beam.pieces + (float(scores[j]),)
                run = math.fsum(pieces)
                tie = beam.tie + (ctx.tie_piece[j],)
                extensions.append(
                    (
                        run,
                        tie,
                        _Beam(run, tie, beam.steps + (j,), beam.used | 1 << j, covered, j, pieces),
                    )
                )
        if not extensions:
            break
        beams = [
            beam
            for _, beam in _greedy_diverse_select(
                extensions,
                config.beam_width,
                config.diversity_overlap_threshold,
                config.diversity_penalty,
            )
        ]

    rel_of = {eid: float(ctx.relevance[i]) for i, eid in enumerate(ctx.ids)}
    index_of = {eid: i for i, eid in enumerate(ctx.ids)}

    def transition_of(prev: str, cur: str) -> float:
        return float(ctx.log_transition[index_of[prev], index_of[cur]])

    finals = []
    for beam in beams:
        steps = [ctx.ids[i] for i in beam.steps]
        total, breakdown = trajectory_score(
            steps, rel_of.__getitem__, transition_of, precedence, hypergraph, weights
        )
        finals.append((total, beam.tie, _Beam(total, beam.tie, beam.steps, beam.used, beam.covered, beam.last)))
    chosen = _greedy_diverse_select(
        finals,
        config.num_trajectories,
        config.diversity_overlap_threshold,
        config.diversity_penalty,
    )
    trajectories = []
    for _, beam in chosen:
        steps = [ctx.ids[i] for i in beam.steps]
        total, breakdown = trajectory_score(
            steps, rel_of.__getitem__, transition_of, precedence, hypergraph, weights
        )
        trajectories.append(Trajectory(steps, total, breakdown))
    return trajectories


def viterbi(
    query_vector: np.ndarray,
    candidate_ids: Sequence[str],
    store: EmbeddingStore,
    model: TransitionModel | None,
    lambda_coherence: float,
    length: int,
    no_repeat: bool = False,
    transition_matrix: np.ndarray | None = None,
) -> Trajectory:
    """Exact optimum of relevance plus weighted transition log-probability.

    The recurrence as written permits revisiting a candidate; `no_repeat`
    switches to an exact visited-set dynamic program intended for small
    oracle instances only. Score ties resolve toward the lexicographically
    smallest id sequence.
    """
    ids = list(candidate_ids)
    n = len(ids)
    if n == 0:
        raise EmptyCorpus("viterbi needs at least one candidate")
    rows = np.stack([store.vector(eid) for eid in ids])
    relevance = rows @ np.asarray(query_vector, dtype=np.float64)
    if transition_matrix is not None:
        log_transition = transition_matrix
    elif model is not None:
        log_transition = model.log_transition_matrix(rows)
    else:
        log_transition = np.zeros((n, n), dtype=np.float64)

    if no_repeat:
        if n > 22:
            raise ValueError("the no-repeat oracle is for small candidate sets only")
        best = _viterbi_no_repeat(ids, relevance, log_transition, lambda_coherence, length)
    else:
        best = _viterbi_repeats(ids, relevance, log_transition, lambda_coherence, length)
    score, steps = best
    rel_sum = float(sum(relevance[ids.index(step)] for step in steps))
    coh_sum = float(
        sum(
            log_transition[ids.index(prev), ids.index(cur)]
            for prev, cur in zip(steps, steps[1:])
        )
    )
    breakdown = {
        "relevance": rel_sum,
        "coherence": coh_sum,
        "precedence": 0.0,
        "continuity": 0.0,
        "coverage": 0.0,
    }
    return Trajectory(list(steps), score, breakdown)


def _viterbi_repeats(
    ids: list[str],
    relevance: np.ndarray,
    log_transition: np.ndarray,
    lam: float,
    length: int,
) -> tuple[float, tuple[str, ...]]:
    n = len(ids)
    states: list[tuple[float, tuple[str, ...]]] = [
        (float(relevance[j]), (ids[j],)) for j in range(n)
    ]
    for _ in range(length - 1):
        nxt: list[tuple[float, tuple[str, ...]]] = []
        for j in range(n):
            best: tuple[float, tuple[str, ...]] | None = None
            for i in range(n):
                score = (states[i][0] + float(relevance[j])) + lam * float(
                    log_transition[i, j]
                )
                cand = (score, states[i][1] + (ids[j],))
                if best is None or (-cand[0], cand[1]) < (-best[0], best[1]):
                    best = cand
            nxt.append(best)
        states = nxt
    return min(states, key=lambda state: (-state[0], state[1]))


def _viterbi_no_repeat(
    ids: list[str],
    relevance: np.ndarray,
    log_transition: np.ndarray,
    lam: float,
    length: int,
) -> tuple[float, tuple[str, ...]]:
    n = len(ids)
    length = min(length, n)
    states: dict[tuple[int, int], tuple[float, tuple[str, ...]]] = {
        (1 << j, j): (float(relevance[j]), (ids[j],)) for j in range(n)
    }
    for _ in range(length - 1):
        nxt: dict[tuple[int, int], tuple[float, tuple[str, ...]]] = {}
        for (mask, i), (score, seq) in states.items():
            for j in range(n):
                if mask >> j & 1:
                    continue
                cand = (
                    (score + float(relevance[j])) + lam * float(log_transition[i, j]),
                    seq + (ids[j],),
                )
                key = (mask | 1 << j, j)
                cur = nxt.get(key)
                if cur is None or (-cand[0], cand[1]) < (-cur[0], cur[1]):
                    nxt[key] = cand
        states = nxt
    return min(states.values(), key=lambda state: (-state[0], state[1]))


@dataclass
class Retriever:
    """Bundles a hypergraph, its embeddings, precedence, and the model."""

    hypergraph: KnowledgeHypergraph
    store: EmbeddingStore
    precedence: PrecedenceIndex
    model: TransitionModel

    def transition_matrix(self, candidate_ids: Sequence[str], kind: str = "learned") -> np.ndarray:
        if kind == "heuristic":
            return heuristic_transition_matrix(candidate_ids, self.precedence)
        rows = np.stack([self.store.vector(eid) for eid in candidate_ids])
        return log_softmax_rows(self.model.logits(rows))

    def retrieve(
        self,
        query: str | np.ndarray,
        weights: RetrievalWeights = RetrievalWeights(),
        search: SearchConfig = SearchConfig(),
        scope: ScopeConfig = ScopeConfig(),
        query_group: str | None = None,
        transition: str = "learned",
    ) -> list[Trajectory]:
        query_vector = (
            self.store.embed_query(query) if isinstance(query, str) else np.asarray(query)
        )
        candidates = scope_candidates(
            query_vector, self.hypergraph, self.store, scope, query_group
        )
        return beam_search(
            query_vector,
            candidates,
            self.hypergraph,
            self.store,
            self.precedence,
            weights,
            search,
            transition_matrix=self.transition_matrix(candidates, transition),
        )

    def result_dict(self, query_text: str, trajectories: Sequence[Trajectory]) -> dict:
        return {
            "query": query_text,
            "trajectories": [trajectory.to_dict() for trajectory in trajectories],
        }
