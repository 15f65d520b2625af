"""Cross-candidate agreement: tallies, similarity, clusters, conflicts.

This stage only measures; it never decides. Its output is a report the
governance stage (or a human reading the audit trail) consumes.

Similarity is token-set Jaccard over normalized text. Claim clustering is
greedy single link: claims are visited in a fixed order (candidates sorted
by model_id, claims in document order) and each claim joins the first
existing cluster whose representative, the cluster's founding claim, is at
least ``similarity_threshold`` similar; otherwise it founds a new cluster.
Cluster ids are assigned in founding order.

Three conflict kinds exist and they are enumerated exhaustively:

* contradiction: two or more distinct values on one closed field (the
  label slot, or an item's status slot).
* severity_divergence: expressed severities on one item span a gap of at
  least ``severity_divergence_step`` grades on the ordered scale.
* omission: some but not all candidates assigned an item. Fires only for
  labeled_items; free text neither promises nor owes any particular claim.

Open claim content has no closed value slot, so text kinds produce no
contradiction conflicts; weak support shows up as uncertainty flags and in
the decision's discards instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import EmptyAfterNormalization, NoComparableContent
from .parsing import candidate_claims
from .textops import token_set
from .types import (
    KIND_LABELED_ITEMS,
    KIND_SINGLE_LABEL,
    STATUS_OK,
    STRUCTURED_KINDS,
    TEXT_KINDS,
    CandidateOutput,
    OutputSchema,
    PolicySet,
)

CONFLICT_CONTRADICTION = "contradiction"
CONFLICT_SEVERITY_DIVERGENCE = "severity_divergence"
CONFLICT_OMISSION = "omission"

FLAG_TIE = "tie"
FLAG_INSUFFICIENT_SUPPORT = "insufficient_support"
FLAG_SEVERITY_DIVERGENCE = "severity_divergence"
FLAG_OMISSION = "omission"
FLAG_EMPTY_CLAIM = "empty_after_normalization"

LABEL_FIELD = "label"


def field_status(item: str) -> str:
    return f"{item}.status"


def field_severity(item: str) -> str:
    return f"{item}.severity"


@dataclass(frozen=True)
class Conflict:
    """A disagreement worth surfacing, never silently resolved."""

    target: str
    kind: str
    positions: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", tuple(sorted(self.positions)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "kind": self.kind,
            "positions": {model: value for model, value in self.positions},
        }


@dataclass(frozen=True)
class UncertaintyFlag:
    target: str
    reason: str

    def to_dict(self) -> dict[str, str]:
        return {"target": self.target, "reason": self.reason}


@dataclass(frozen=True)
class ClaimMember:
    model_id: str
    section: str
    text: str

    def to_dict(self) -> dict[str, str]:
        return {"model_id": self.model_id, "section": self.section, "text": self.text}


@dataclass(frozen=True)
class ClaimCluster:
    """Claims judged to say the same thing; the representative is the
    founding member's text and section."""

    cluster_id: str
    representative: str
    section: str
    members: tuple[ClaimMember, ...]

    def supporters(self) -> tuple[str, ...]:
        return tuple(sorted({m.model_id for m in self.members}))

    def to_dict(self) -> dict[str, Any]:
        return {
            "cluster_id": self.cluster_id,
            "representative": self.representative,
            "section": self.section,
            "members": [m.to_dict() for m in self.members],
            "supporters": list(self.supporters()),
        }


@dataclass(frozen=True)
class ConsensusReport:
    """Everything the run learned about agreement, in one value."""

    run_id: str
    schema_kind: str
    model_order: tuple[str, ...]
    label_tally: Mapping[str, tuple[str, ...]]
    item_status_tally: Mapping[str, Mapping[str, tuple[str, ...]]]
    item_severity_tally: Mapping[str, Mapping[str, tuple[str, ...]]]
    claim_clusters: tuple[ClaimCluster, ...]
    similarity_matrix: tuple[tuple[float, ...], ...]
    agreement_ratio: float
    conflicts: tuple[Conflict, ...]
    uncertainty_flags: tuple[UncertaintyFlag, ...]

    def claim_support(self) -> dict[str, tuple[str, ...]]:
        return {c.representative: c.supporters() for c in self.claim_clusters}

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "schema_kind": self.schema_kind,
            "model_order": list(self.model_order),
            "label_tally": {k: list(v) for k, v in self.label_tally.items()},
            "item_status_tally": {
                item: {label: list(ids) for label, ids in tally.items()}
                for item, tally in self.item_status_tally.items()
            },
            "item_severity_tally": {
                item: {grade: list(ids) for grade, ids in tally.items()}
                for item, tally in self.item_severity_tally.items()
            },
            "claim_clusters": [c.to_dict() for c in self.claim_clusters],
            "similarity_matrix": [list(row) for row in self.similarity_matrix],
            "agreement_ratio": self.agreement_ratio,
            "conflicts": [c.to_dict() for c in self.conflicts],
            "uncertainty_flags": [f.to_dict() for f in self.uncertainty_flags],
        }


def text_similarity(a: str, b: str) -> float:
    """Jaccard similarity of the two texts' normalized token sets."""
    tokens_a = token_set(a)
    tokens_b = token_set(b)
    if not tokens_a or not tokens_b:
        raise EmptyAfterNormalization(a if not tokens_a else b)
    union = tokens_a | tokens_b
    return len(tokens_a & tokens_b) / len(union)


def _pair_similarity(a: str, b: str) -> float:
    # Matrix building tolerates empty texts instead of erroring: two empty
    # texts are identical, an empty against a non-empty shares nothing.
    tokens_a = token_set(a)
    tokens_b = token_set(b)
    if not tokens_a and not tokens_b:
        return 1.0
    if not tokens_a or not tokens_b:
        return 0.0
    return len(tokens_a & tokens_b) / len(tokens_a | tokens_b)


def cluster_claims(
    claims: Sequence[ClaimMember], threshold: float
) -> tuple[ClaimCluster, ...]:
    """Greedy single-link clustering in visit order; see module docs."""
    reps: list[ClaimMember] = []
    members: list[list[ClaimMember]] = []
    for claim in claims:
        placed = False
        for index, rep in enumerate(reps):
            if _pair_similarity(rep.text, claim.text) >= threshold:
                members[index].append(claim)
                placed = True
                break
        if not placed:
            reps.append(claim)
            members.append([claim])
    return tuple(
        ClaimCluster(
            cluster_id=f"c{index:03d}",
            representative=rep.text,
            section=rep.section,
            members=tuple(group),
        )
        for index, (rep, group) in enumerate(zip(reps, members))
    )


def _similarity_for_kind(
    kind: str, a: CandidateOutput, b: CandidateOutput
) -> float:
    if kind == KIND_SINGLE_LABEL:
        return 1.0 if a.parsed.label == b.parsed.label else 0.0
    if kind == KIND_LABELED_ITEMS:
        map_a = a.parsed.items_map()
        map_b = b.parsed.items_map()
        union = set(map_a) | set(map_b)
        if not union:
            return 1.0
        agree = sum(
            1
            for item in union
            if item in map_a
            and item in map_b
            and map_a[item].status == map_b[item].status
            and map_a[item].severity == map_b[item].severity
        )
        return agree / len(union)
    return _pair_similarity(a.raw_text, b.raw_text)


def top_of(tally: Mapping[str, tuple[str, ...]]) -> tuple[int, list[str]]:
    top = max(len(ids) for ids in tally.values())
    winners = sorted(value for value, ids in tally.items() if len(ids) == top)
    return top, winners


def compute_consensus(
    candidates: Sequence[CandidateOutput],
    schema: OutputSchema,
    policies: PolicySet,
    *,
    run_id: str = "",
) -> ConsensusReport:
    """Measure agreement across the ok candidates.

    Pure and deterministic: candidate order does not matter because the
    computation starts by sorting on model_id.
    """
    ordered = tuple(
        sorted(
            (c for c in candidates if c.status == STATUS_OK),
            key=lambda c: c.model_id,
        )
    )
    if schema.kind in STRUCTURED_KINDS and not any(
        c.parsed is not None for c in ordered
    ):
        raise NoComparableContent(
            f"no candidate parsed under the {schema.kind} schema"
        )

    n_ok = len(ordered)
    model_order = tuple(c.model_id for c in ordered)
    threshold = policies.support_threshold

    label_tally: dict[str, tuple[str, ...]] = {}
    item_status_tally: dict[str, dict[str, tuple[str, ...]]] = {}
    item_severity_tally: dict[str, dict[str, tuple[str, ...]]] = {}
    clusters: tuple[ClaimCluster, ...] = ()
    conflicts: list[Conflict] = []
    flags: list[UncertaintyFlag] = []
    # (field target, top support count, tied?) for the agreement ratio
    fields: list[tuple[str, int, bool]] = []

    if schema.kind == KIND_SINGLE_LABEL:
        grouped: dict[str, list[str]] = {}
        for candidate in ordered:
            grouped.setdefault(candidate.parsed.label, []).append(candidate.model_id)
        label_tally = {label: tuple(ids) for label, ids in grouped.items()}
        if label_tally:
            top, winners = top_of(label_tally)
            fields.append((LABEL_FIELD, top, len(winners) > 1))
            if len(label_tally) > 1:
                conflicts.append(
                    Conflict(
                        target=LABEL_FIELD,
                        kind=CONFLICT_CONTRADICTION,
                        positions=tuple(
                            (c.model_id, c.parsed.label) for c in ordered
                        ),
                    )
                )

    elif schema.kind == KIND_LABELED_ITEMS:
        status_grouped: dict[str, dict[str, list[str]]] = {}
        severity_grouped: dict[str, dict[str, list[str]]] = {}
        for candidate in ordered:
            for finding in candidate.parsed.items:
                status_grouped.setdefault(finding.item, {}).setdefault(
                    finding.status, []
                ).append(candidate.model_id)
                if finding.severity is not None:
                    severity_grouped.setdefault(finding.item, {}).setdefault(
                        finding.severity, []
                    ).append(candidate.model_id)
        item_status_tally = {
            item: {label: tuple(ids) for label, ids in tally.items()}
            for item, tally in sorted(status_grouped.items())
        }
        item_severity_tally = {
            item: {grade: tuple(ids) for grade, ids in tally.items()}
            for item, tally in sorted(severity_grouped.items())
        }
        for item, tally in item_status_tally.items():
            top, winners = top_of(tally)
            fields.append((field_status(item), top, len(winners) > 1))
            positions = tuple(
                (model, label) for label, ids in tally.items() for model in ids
            )
            if len(tally) > 1:
                conflicts.append(
                    Conflict(
                        target=item,
                        kind=CONFLICT_CONTRADICTION,
                        positions=positions,
                    )
                )
            expressed = {model for _, ids in tally.items() for model in ids}
            if 0 < len(expressed) < n_ok:
                conflicts.append(
                    Conflict(
                        target=item, kind=CONFLICT_OMISSION, positions=positions
                    )
                )
                flags.append(UncertaintyFlag(item, FLAG_OMISSION))
            severities = item_severity_tally.get(item, {})
            if severities:
                top_sev, sev_winners = top_of(severities)
                fields.append((field_severity(item), top_sev, len(sev_winners) > 1))
                indices = [schema.severity_index(g) for g in severities]
                if max(indices) - min(indices) >= policies.severity_divergence_step:
                    conflicts.append(
                        Conflict(
                            target=item,
                            kind=CONFLICT_SEVERITY_DIVERGENCE,
                            positions=tuple(
                                (model, grade)
                                for grade, ids in severities.items()
                                for model in ids
                            ),
                        )
                    )
                    flags.append(UncertaintyFlag(item, FLAG_SEVERITY_DIVERGENCE))

    else:
        members: list[ClaimMember] = []
        for candidate in ordered:
            for section, claim in candidate_claims(candidate):
                if not token_set(claim):
                    flags.append(UncertaintyFlag(claim[:60], FLAG_EMPTY_CLAIM))
                    continue
                members.append(
                    ClaimMember(
                        model_id=candidate.model_id, section=section, text=claim
                    )
                )
        clusters = cluster_claims(members, policies.similarity_threshold)
        for cluster in clusters:
            fields.append((cluster.cluster_id, len(cluster.supporters()), False))

    for target, top, tied in fields:
        if tied:
            flags.append(UncertaintyFlag(target, FLAG_TIE))
        elif top < threshold:
            flags.append(UncertaintyFlag(target, FLAG_INSUFFICIENT_SUPPORT))

    if fields:
        decided = sum(1 for _, top, _ in fields if top >= threshold)
        ratio = decided / len(fields)
    else:
        ratio = 1.0

    matrix = tuple(
        tuple(
            1.0 if i == j else _similarity_for_kind(schema.kind, a, b)
            for j, b in enumerate(ordered)
        )
        for i, a in enumerate(ordered)
    )

    return ConsensusReport(
        run_id=run_id,
        schema_kind=schema.kind,
        model_order=model_order,
        label_tally=label_tally,
        item_status_tally=item_status_tally,
        item_severity_tally=item_severity_tally,
        claim_clusters=clusters,
        similarity_matrix=matrix,
        agreement_ratio=ratio,
        conflicts=tuple(conflicts),
        uncertainty_flags=tuple(flags),
    )
