"""Relation vocabulary, semantic families, and phase mapping.

Relations are grouped into 13 numbered families. Families 1-12 describe
within-horizon statements ordered from situational context (cyclone state,
track, timing) through advisories, hazards, operations, and impacts to
recovery; family 13 holds the cross-horizon change relations that connect
states of the same entity at consecutive lead times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class EntityType(str, Enum):
    """Controlled vocabulary for hypergraph node types."""

    PORT = "port"
    CYCLONE = "cyclone"
    CYCLONE_STATE = "cyclone_state"
    OPERATION_STATUS = "operation_status"
    HAZARD_FORECAST = "hazard_forecast"
    HAZARD_OBSERVATION = "hazard_observation"
    ADVISORY_STATUS = "advisory_status"
    PROBABILITY_STATE = "probability_state"
    IMPACT_PREDICTION = "impact_prediction"
    RECOVERY_STATUS = "recovery_status"
    HORIZON_TIME = "horizon_time"
    OTHER = "other"

    @classmethod
    def parse(cls, raw: str) -> "EntityType":
        """Case-insensitive lookup; unrecognized strings fall back to OTHER."""
        try:
            return cls(str(raw).strip().lower())
        except ValueError:
            return cls.OTHER


CROSS_HORIZON_FAMILY = 13
FALLBACK_RELATION = "has_attribute"

# (family number, family label, canonical relations in rank order)
_FAMILY_TABLE: tuple[tuple[int, str, tuple[str, ...]], ...] = (
    (1, "cyclone_state", ("has_cyclone_state", "has_category_state", "has_motion", FALLBACK_RELATION)),
    (2, "track_landfall", ("forecasts_track", "forecasts_landfall")),
    (3, "timing", ("has_hours_to_landfall", "has_forecast_window")),
    (4, "advisory", ("has_watch_status", "has_warning_status")),
    (5, "probability", ("has_leadtime_probability", "has_cumulative_probability")),
    (6, "hazard_forecast", ("forecasts_hazard_at_horizon",)),
    (7, "hazard_observation", ("observes_hazard_at_horizon",)),
    (8, "threshold", ("has_threshold_status",)),
    (9, "additional_hazards", ("has_additional_hazard",)),
    (10, "operation_status", ("has_operation_status", "affects_vessel_handling")),
    (11, "impact_prediction", ("has_impact_prediction", "causes_operational_disruption")),
    (12, "recovery_status", ("has_recovery_status", "starts_recovery")),
    (13, "cross_horizon", ("forecast_updates_to", "intensifies_to", "changes_status_to", "changes_probability_to")),
)

# Phase labels used by trajectory coverage scoring. Families outside the six
# coverage phases all read as "other".
PHASE_BY_FAMILY: dict[int, str] = {
    4: "advisory",
    6: "hazard_forecast",
    7: "hazard_observation",
    10: "operation_status",
    11: "impact_prediction",
    12: "recovery_status",
}
COVERAGE_PHASES: tuple[str, ...] = (
    "advisory",
    "hazard_forecast",
    "hazard_observation",
    "operation_status",
    "impact_prediction",
    "recovery_status",
)

# Which change relation a given within-horizon family evolves through.
CHANGE_RELATION_BY_FAMILY: dict[int, str] = {
    1: "intensifies_to",
    4: "changes_status_to",
    5: "changes_probability_to",
    8: "changes_status_to",
    10: "changes_status_to",
    12: "changes_status_to",
}
DEFAULT_CHANGE_RELATION = "forecast_updates_to"

_DEFAULT_ALIASES: dict[str, str] = {
    "closes_port": "has_operation_status",
}


def _fold(raw: str) -> str:
    return "_".join(str(raw).strip().lower().split())


def _tokens(name: str) -> frozenset[str]:
    return frozenset(name.replace("_", " ").split())


@dataclass(frozen=True)
class RelationVocabulary:
    """Canonical relations, per-relation family, and an extensible alias map."""

    families: tuple[tuple[int, str, tuple[str, ...]], ...] = _FAMILY_TABLE
    aliases: dict[str, str] = field(default_factory=lambda: dict(_DEFAULT_ALIASES))

    def __post_init__(self) -> None:
        family_of: dict[str, int] = {}
        rank_of: dict[str, int] = {}
        label_of: dict[int, str] = {}
        for number, label, relations in self.families:
            label_of[number] = label
            for rank, relation in enumerate(relations, start=1):
                if relation in family_of:
                    raise ValueError(f"relation {relation!r} assigned to two families")
                family_of[relation] = number
                rank_of[relation] = rank
        lookup = {name: name for name in family_of}
        for raw, canonical in self.aliases.items():
            if canonical not in family_of:
                raise ValueError(f"alias {raw!r} points at unknown relation {canonical!r}")
            lookup[_fold(raw)] = canonical
        object.__setattr__(self, "_family_of", family_of)
        object.__setattr__(self, "_rank_of", rank_of)
        object.__setattr__(self, "_label_of", label_of)
        object.__setattr__(self, "_lookup", lookup)
        object.__setattr__(
            self, "_token_index", tuple(sorted((key, _tokens(key)) for key in lookup))
        )

    def extended(self, aliases: dict[str, str]) -> "RelationVocabulary":
        """A copy of this vocabulary with extra raw-string aliases."""
        merged = dict(self.aliases)
        merged.update(aliases)
        return RelationVocabulary(self.families, merged)

    def is_canonical(self, relation: str) -> bool:
        return relation in self._family_of

    def family(self, relation: str) -> int:
        return self._family_of[relation]

    def family_label(self, number: int) -> str:
        return self._label_of[number]

    def rank_in_family(self, relation: str) -> int:
        return self._rank_of[relation]

    def normalize(self, raw: str) -> tuple[str, int]:
        """Map a raw relation string to (canonical relation, family number).

        Resolution order: case/whitespace-folded exact match against canonical
        names and aliases, then best token-overlap match (Jaccard >= 0.5,
        ties broken by the lexicographically smallest alias), and finally the
        generic fallback relation. The function is total: every input maps to
        a relation with a family in 1-13.
        """
        folded = _fold(raw)
        hit = self._lookup.get(folded)
        if hit is not None:
            return hit, self._family_of[hit]
        raw_tokens = _tokens(folded)
        if raw_tokens:
            best_key = None
            best_score = 0.0
            for key, key_tokens in self._token_index:
                union = len(raw_tokens | key_tokens)
                if union == 0:
                    continue
                score = len(raw_tokens & key_tokens) / union
                if score > best_score:
                    best_key, best_score = key, score
            if best_key is not None and best_score >= 0.5:
                hit = self._lookup[best_key]
                return hit, self._family_of[hit]
        return FALLBACK_RELATION, self._family_of[FALLBACK_RELATION]


DEFAULT_VOCABULARY = RelationVocabulary()


def normalize_relation(raw: str, vocab: RelationVocabulary = DEFAULT_VOCABULARY) -> tuple[str, int]:
    return vocab.normalize(raw)


def phase_rank(relation: str, vocab: RelationVocabulary = DEFAULT_VOCABULARY) -> int:
    """Family number of a relation, used as its coarse ordering rank."""
    if vocab.is_canonical(relation):
        return vocab.family(relation)
    return vocab.normalize(relation)[1]


def family_rank(relation: str, vocab: RelationVocabulary = DEFAULT_VOCABULARY) -> int:
    """Rank of a relation inside its own family, for fine tie-breaking."""
    if not vocab.is_canonical(relation):
        relation = vocab.normalize(relation)[0]
    return vocab.rank_in_family(relation)


def phase_of_family(family: int) -> str:
    return PHASE_BY_FAMILY.get(family, "other")


def change_relation_for_family(family: int) -> str:
    return CHANGE_RELATION_BY_FAMILY.get(family, DEFAULT_CHANGE_RELATION)
