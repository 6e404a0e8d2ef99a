"""Order-aware knowledge hypergraph retrieval."""

from okh.corpus import (
    GeneratedCorpus,
    GroupScenario,
    QAItem,
    generate_synthetic,
    group_id_for,
    split_horizons,
)
from okh.embedding import (
    EmbeddingCache,
    EmbeddingStore,
    LocalHashingEmbedder,
    RemoteEmbeddingClient,
    compose_text,
    cosine,
)
from okh.errors import (
    ConflictingHorizon,
    CycleDetected,
    DimensionMismatch,
    ElementMismatch,
    EmptyBatch,
    EmptyCorpus,
    NonFiniteLoss,
    OkhError,
    ProviderError,
    SchemaError,
    UnknownEdge,
    UnparseableNumeric,
    ZeroNorm,
)
from okh.evaluation import (
    AblationReport,
    AblationVariant,
    extract_answer,
    kendall_tau,
    run_ablation,
)
from okh.evidence import (
    AnswerRecord,
    ChatCompletionClient,
    EvidenceStep,
    aggregate_answers,
    assemble_prompt,
    build_evidence_steps,
    format_trajectory,
)
from okh.hypergraph import (
    Entity,
    Hyperedge,
    KnowledgeHypergraph,
    canonical_entity_id,
    dedup_id,
    entity_stem,
    horizon_anchor_id,
    inject_horizon,
    merge_facts,
    synthesize_cross_horizon,
    validate_fact,
)
from okh.precedence import (
    Order,
    PrecedenceIndex,
    build_precedence,
    canonical_trajectory,
    effective_lead,
    precedes,
)
from okh.relations import (
    CROSS_HORIZON_FAMILY,
    DEFAULT_VOCABULARY,
    EntityType,
    RelationVocabulary,
    normalize_relation,
    phase_of_family,
)
from okh.retrieval import (
    RetrievalWeights,
    Retriever,
    ScopeConfig,
    SearchConfig,
    Trajectory,
    beam_search,
    entity_continuity,
    phase_coverage,
    precedence_consistency,
    scope_candidates,
    trajectory_score,
    viterbi,
)
from okh.transition import (
    TrainingConfig,
    TrainingPairs,
    TransitionModel,
    build_pairs,
    contrastive_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
