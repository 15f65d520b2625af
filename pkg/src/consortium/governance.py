"""Consolidation of candidate outputs into one governed decision.

Two consolidation modes exist. The reasoner mode hands the full candidate
set, the consensus report, and the policy text to a dedicated reasoning
model and parses its reply against a strict decision grammar. The
deterministic mode applies fixed rules to the consensus report. When the
reasoner cannot be invoked or replies outside the grammar, the run falls
back to the deterministic mode if policy allows, and errors otherwise.

Deterministic rules, per field:

* A unique top value whose support reaches ``support_threshold`` is
  accepted; its confidence is the band of supporters / ok candidates.
* A tie at the top is never broken. The field is marked uncertain: a
  single_label decision carries the "Uncertain" pseudo label, a
  labeled_items item is flagged for secondary review. Tied values are
  discarded as contradiction_unresolved so nothing vanishes silently.
* A unique top below the threshold is treated the same way but the losing
  values are discarded as insufficient_support.
* Severity on labeled_items is resolved by supported median: each grade is
  weighted by its supporter count and the lower median of the resulting
  multiset wins. A divergence conflict (gap >= severity_divergence_step)
  then applies ``divergence_action``: downgrade_and_flag keeps the median
  at low confidence with a secondary_review flag; reject discards every
  expressed grade as contradiction_unresolved.
* A unanimous "Unknown" under ``unknown_escalation`` becomes a
  high-confidence decision flagged anomalous: every model declining to
  classify is itself a strong, reportable signal.
* Text claims must clear the support threshold, must not match a banned
  pattern, and, when ``grounding_required``, must share at least
  ``grounding_min_overlap`` of their tokens with the shared context.

The reasoner decision grammar is line oriented (see DECISION_GRAMMAR_TEXT).
Reasoner entries must cite supporting model_ids from the run; citations of
unknown models are dropped, and an entry left with no valid citation is
demoted to low confidence and flagged uncited. For structured schemas the
reasoner may only pick values that actually appear in the tallies; fields
it does not mention are filled deterministically and flagged. Tallied
values the reasoner declined are discarded as outlier.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from .backends import BackendRegistry, resolve_backend
from .consensus import (
    ConsensusReport,
    field_severity,
    field_status,
    CONFLICT_SEVERITY_DIVERGENCE,
    LABEL_FIELD,
    top_of,
)
from .errors import (
    BackendError,
    ReasonerFailed,
    ReasonerOutputInvalid,
)
from .prompting import render_canonical_prompt
from .textops import token_set
from .types import (
    CONFIDENCE_HIGH,
    CONFIDENCE_LOW,
    CONFIDENCES,
    DIVERGENCE_REJECT,
    KIND_CLINICAL_REPORT,
    KIND_FREE_TEXT,
    KIND_LABELED_ITEMS,
    KIND_SINGLE_LABEL,
    STATUS_OK,
    STRUCTURED_KINDS,
    TEXT_KINDS,
    UNCERTAIN_LABEL,
    UNKNOWN_LABEL,
    CandidateOutput,
    ItemFinding,
    OutputSchema,
    PolicySet,
    Section,
    SharedContext,
    StructuredPayload,
    TaskSpec,
)

MODE_REASONER = "reasoner"
MODE_DETERMINISTIC = "deterministic"

FLAG_SECONDARY_REVIEW = "secondary_review"
FLAG_UNCERTAIN = "uncertain"
FLAG_ANOMALOUS = "anomalous"
FLAG_UNCITED = "uncited"
FLAG_DETERMINISTIC_FILL = "deterministic_fill"

REASON_INSUFFICIENT_SUPPORT = "insufficient_support"
REASON_UNGROUNDED = "ungrounded"
REASON_BANNED = "banned"
REASON_OUTLIER = "outlier"
REASON_CONTRADICTION_UNRESOLVED = "contradiction_unresolved"

DECISION_GRAMMAR_TEXT = """\
Reply with exactly one DECISION block followed by one RATIONALE block.

DECISION:
<field> | <value> | <confidence> | cites: <model_id>[, <model_id>...]

One line per decided field. <confidence> is high, medium, or low.
For a single label task the field is "label". For itemized tasks the
fields are "<item>.status" and "<item>.severity", and values must be
drawn from the positions the candidates actually took. For report and
free text tasks, use the section name (or the word "claim") as the field
and put one supported sentence in <value>, citing the models that state
it.

RATIONALE:
<free text explaining the consolidation>
"""


@dataclass(frozen=True)
class DecisionEntry:
    """One accepted field of the decision, with provenance."""

    target: str
    value: str
    confidence: str
    provenance: tuple[str, ...]
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "provenance", tuple(self.provenance))
        object.__setattr__(self, "flags", tuple(self.flags))

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "value": self.value,
            "confidence": self.confidence,
            "provenance": list(self.provenance),
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class DiscardedEntry:
    """One rejected value and why; discard reasons are part of the record."""

    target: str
    value: str
    reason: str
    model_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "model_ids", tuple(self.model_ids))

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "value": self.value,
            "reason": self.reason,
            "model_ids": list(self.model_ids),
        }


@dataclass(frozen=True)
class ConsolidatedDecision:
    run_id: str
    schema_kind: str
    payload: StructuredPayload
    entries: tuple[DecisionEntry, ...]
    discarded: tuple[DiscardedEntry, ...]
    consolidation_mode: str
    reasoner_rationale: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "discarded", tuple(self.discarded))

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "schema_kind": self.schema_kind,
            "payload": self.payload.to_dict(),
            "entries": [e.to_dict() for e in self.entries],
            "discarded": [d.to_dict() for d in self.discarded],
            "consolidation_mode": self.consolidation_mode,
            "reasoner_rationale": self.reasoner_rationale,
        }


def context_token_pool(context: SharedContext) -> frozenset[str]:
    parts = [t.text for t in context.text_inputs]
    parts.extend(context.metadata.values())
    return token_set("\n".join(parts))


def grounding_overlap(claim: str, pool: frozenset[str]) -> float:
    """Fraction of the claim's tokens that appear in the context pool."""
    tokens = token_set(claim)
    if not tokens:
        return 0.0
    return len(tokens & pool) / len(tokens)


def _uncertain_entry(target: str, *extra_flags: str) -> DecisionEntry:
    return DecisionEntry(
        target=target,
        value=UNCERTAIN_LABEL,
        confidence=CONFIDENCE_LOW,
        provenance=(),
        flags=(FLAG_UNCERTAIN, *extra_flags),
    )


def _supported_median(
    tally: Mapping[str, tuple[str, ...]], scale: tuple[str, ...]
) -> str:
    indices: list[int] = []
    for grade, ids in tally.items():
        indices.extend([scale.index(grade)] * len(ids))
    indices.sort()
    return scale[indices[(len(indices) - 1) // 2]]


def consolidate_deterministic(
    report: ConsensusReport,
    schema: OutputSchema,
    policies: PolicySet,
    context: SharedContext,
) -> ConsolidatedDecision:
    """Apply the fixed consolidation rules; see the module docstring."""
    n_ok = max(len(report.model_order), 1)
    k = policies.support_threshold
    bands = policies.confidence_bands
    entries: list[DecisionEntry] = []
    discarded: list[DiscardedEntry] = []

    def _resolve_closed_field(
        target: str, tally: Mapping[str, tuple[str, ...]], uncertain_flags: tuple[str, ...]
    ) -> DecisionEntry:
        top, winners = top_of(tally)
        if len(winners) > 1:
            for value in sorted(tally):
                discarded.append(
                    DiscardedEntry(
                        target, value, REASON_CONTRADICTION_UNRESOLVED, tally[value]
                    )
                )
            return _uncertain_entry(target, *uncertain_flags)
        winner = winners[0]
        for value in sorted(tally):
            if value != winner:
                discarded.append(
                    DiscardedEntry(
                        target, value, REASON_INSUFFICIENT_SUPPORT, tally[value]
                    )
                )
        if top < k:
            discarded.append(
                DiscardedEntry(
                    target, winner, REASON_INSUFFICIENT_SUPPORT, tally[winner]
                )
            )
            return _uncertain_entry(target, *uncertain_flags)
        return DecisionEntry(
            target=target,
            value=winner,
            confidence=bands.classify(top / n_ok),
            provenance=tuple(sorted(tally[winner])),
        )

    if schema.kind == KIND_SINGLE_LABEL:
        tally = report.label_tally
        if not tally:
            entries.append(_uncertain_entry(LABEL_FIELD))
        elif (
            policies.unknown_escalation
            and set(tally) == {UNKNOWN_LABEL}
            and len(tally[UNKNOWN_LABEL]) == n_ok
        ):
            # Every model independently declining to classify is treated as
            # a confident anomaly signal, not as a weak answer.
            entries.append(
                DecisionEntry(
                    target=LABEL_FIELD,
                    value=UNKNOWN_LABEL,
                    confidence=CONFIDENCE_HIGH,
                    provenance=tuple(sorted(tally[UNKNOWN_LABEL])),
                    flags=(FLAG_ANOMALOUS,),
                )
            )
        else:
            entries.append(_resolve_closed_field(LABEL_FIELD, tally, ()))
        payload = StructuredPayload(kind=schema.kind, label=entries[0].value)

    elif schema.kind == KIND_LABELED_ITEMS:
        divergent_items = {
            c.target
            for c in report.conflicts
            if c.kind == CONFLICT_SEVERITY_DIVERGENCE
        }
        findings: list[ItemFinding] = []
        for item in sorted(report.item_status_tally):
            status_entry = _resolve_closed_field(
                field_status(item),
                report.item_status_tally[item],
                (FLAG_SECONDARY_REVIEW,),
            )
            severity_value: Optional[str] = None
            severity_tally = report.item_severity_tally.get(item, {})
            if severity_tally:
                median = _supported_median(severity_tally, schema.severity_scale)
                if item in divergent_items and policies.divergence_action == DIVERGENCE_REJECT:
                    for grade in sorted(severity_tally):
                        discarded.append(
                            DiscardedEntry(
                                field_severity(item),
                                grade,
                                REASON_CONTRADICTION_UNRESOLVED,
                                severity_tally[grade],
                            )
                        )
                    if FLAG_SECONDARY_REVIEW not in status_entry.flags:
                        status_entry = replace(
                            status_entry,
                            flags=(*status_entry.flags, FLAG_SECONDARY_REVIEW),
                        )
                else:
                    confidence = bands.classify(len(severity_tally[median]) / n_ok)
                    flags: tuple[str, ...] = ()
                    if item in divergent_items:
                        confidence = CONFIDENCE_LOW
                        flags = (FLAG_UNCERTAIN, FLAG_SECONDARY_REVIEW)
                    entries_severity = DecisionEntry(
                        target=field_severity(item),
                        value=median,
                        confidence=confidence,
                        provenance=tuple(sorted(severity_tally[median])),
                        flags=flags,
                    )
                    severity_value = median
                    for grade in sorted(severity_tally):
                        if grade != median:
                            discarded.append(
                                DiscardedEntry(
                                    field_severity(item),
                                    grade,
                                    REASON_INSUFFICIENT_SUPPORT,
                                    severity_tally[grade],
                                )
                            )
                    entries.append(status_entry)
                    entries.append(entries_severity)
                    findings.append(
                        ItemFinding(item=item, status=status_entry.value, severity=severity_value)
                    )
                    continue
            entries.append(status_entry)
            findings.append(
                ItemFinding(item=item, status=status_entry.value, severity=severity_value)
            )
        payload = StructuredPayload(kind=schema.kind, items=tuple(findings))

    else:
        pool = context_token_pool(context)
        banned = policies.compiled_banned()
        accepted_clusters = []
        for cluster in report.claim_clusters:
            supporters = cluster.supporters()
            rep = cluster.representative
            if any(p.search(rep) for p in banned):
                discarded.append(
                    DiscardedEntry(cluster.cluster_id, rep, REASON_BANNED, supporters)
                )
                continue
            if (
                policies.grounding_required
                and grounding_overlap(rep, pool) < policies.grounding_min_overlap
            ):
                discarded.append(
                    DiscardedEntry(
                        cluster.cluster_id, rep, REASON_UNGROUNDED, supporters
                    )
                )
                continue
            if len(supporters) < k:
                discarded.append(
                    DiscardedEntry(
                        cluster.cluster_id,
                        rep,
                        REASON_INSUFFICIENT_SUPPORT,
                        supporters,
                    )
                )
                continue
            entries.append(
                DecisionEntry(
                    target=cluster.cluster_id,
                    value=rep,
                    confidence=bands.classify(len(supporters) / n_ok),
                    provenance=supporters,
                )
            )
            accepted_clusters.append(cluster)
        if schema.kind == KIND_FREE_TEXT:
            payload = StructuredPayload(
                kind=schema.kind, claims=tuple(e.value for e in entries)
            )
        else:
            grouped: dict[str, list[str]] = {}
            for cluster in accepted_clusters:
                grouped.setdefault(cluster.section, []).append(
                    cluster.representative
                )
            payload = StructuredPayload(
                kind=schema.kind,
                sections=tuple(
                    Section(name, tuple(claims)) for name, claims in grouped.items()
                ),
            )

    return ConsolidatedDecision(
        run_id=report.run_id,
        schema_kind=schema.kind,
        payload=payload,
        entries=tuple(entries),
        discarded=tuple(sorted(discarded, key=lambda d: (d.target, d.value, d.reason))),
        consolidation_mode=MODE_DETERMINISTIC,
    )


def enforce_policies(
    decision: ConsolidatedDecision, policies: PolicySet
) -> ConsolidatedDecision:
    """Post filter: move accepted values matching a banned pattern to the
    discard list and repair the payload.

    Idempotent: applying it twice changes nothing the second time. The
    "Uncertain" pseudo label is exempt so a replacement can never be
    re-banned into an infinite loop. Values that are already discarded are
    left alone.
    """
    patterns = policies.compiled_banned()
    if not patterns:
        return decision
    existing = {(d.target, d.value, d.reason) for d in decision.discarded}
    new_entries: list[DecisionEntry] = []
    new_discarded = list(decision.discarded)
    removed_values: set[str] = set()
    replaced_targets: set[str] = set()
    changed = False
    for entry in decision.entries:
        if entry.value == UNCERTAIN_LABEL or not any(
            p.search(entry.value) for p in patterns
        ):
            new_entries.append(entry)
            continue
        changed = True
        removed_values.add(entry.value)
        key = (entry.target, entry.value, REASON_BANNED)
        if key not in existing:
            new_discarded.append(
                DiscardedEntry(entry.target, entry.value, REASON_BANNED, entry.provenance)
            )
            existing.add(key)
        if decision.schema_kind == KIND_SINGLE_LABEL or (
            decision.schema_kind == KIND_LABELED_ITEMS
            and entry.target.endswith(".status")
        ):
            new_entries.append(_uncertain_entry(entry.target))
            replaced_targets.add(entry.target)
    if not changed:
        return decision

    payload = decision.payload
    if decision.schema_kind == KIND_SINGLE_LABEL:
        if payload.label in removed_values:
            payload = StructuredPayload(kind=payload.kind, label=UNCERTAIN_LABEL)
    elif decision.schema_kind == KIND_LABELED_ITEMS:
        findings = []
        for finding in payload.items:
            status = (
                UNCERTAIN_LABEL
                if field_status(finding.item) in replaced_targets
                else finding.status
            )
            severity = finding.severity
            if severity is not None and severity in removed_values:
                severity = None
            findings.append(
                ItemFinding(finding.item, status, severity, finding.rationale)
            )
        payload = StructuredPayload(kind=payload.kind, items=tuple(findings))
    elif decision.schema_kind == KIND_FREE_TEXT:
        payload = StructuredPayload(
            kind=payload.kind,
            claims=tuple(c for c in payload.claims if c not in removed_values),
        )
    else:
        sections = []
        for section in payload.sections:
            kept = tuple(c for c in section.claims if c not in removed_values)
            if kept:
                sections.append(Section(section.name, kept))
        payload = StructuredPayload(kind=payload.kind, sections=tuple(sections))

    return replace(
        decision,
        payload=payload,
        entries=tuple(new_entries),
        discarded=tuple(
            sorted(new_discarded, key=lambda d: (d.target, d.value, d.reason))
        ),
    )


def fence_candidate(model_id: str, text: str) -> str:
    """Wrap a candidate so it survives embedding in the reasoner prompt.

    The fence width grows until neither fence marker can appear inside the
    text, so adversarial content cannot spoof a block boundary and the
    original bytes round-trip exactly.
    """
    width = 3
    while ("<" * width) in text or (">" * width) in text:
        width += 1
    opening = f"{'<' * width}CANDIDATE {model_id}{'>' * width}"
    closing = f"{'<' * width}END CANDIDATE{'>' * width}"
    return f"{opening}\n{text}\n{closing}"


_FENCE_OPEN = re.compile(r"^(<{3,})CANDIDATE (.+?)(>{3,})$")


def unfence_candidates(block: str) -> list[tuple[str, str]]:
    """Inverse of fence_candidate over a sequence of fenced blocks."""
    out: list[tuple[str, str]] = []
    lines = block.split("\n")
    i = 0
    while i < len(lines):
        match = _FENCE_OPEN.match(lines[i])
        if not match or len(match.group(1)) != len(match.group(3)):
            i += 1
            continue
        width = len(match.group(1))
        closing = f"{'<' * width}END CANDIDATE{'>' * width}"
        body: list[str] = []
        i += 1
        while i < len(lines) and lines[i] != closing:
            body.append(lines[i])
            i += 1
        out.append((match.group(2), "\n".join(body)))
        i += 1
    return out


def render_consensus_summary(report: ConsensusReport) -> str:
    lines = [f"agreement_ratio: {report.agreement_ratio:.3f}"]
    if report.label_tally:
        lines.append("label tally:")
        for label in sorted(report.label_tally):
            lines.append(f"  {label}: {', '.join(report.label_tally[label])}")
    for item in report.item_status_tally:
        tally = report.item_status_tally[item]
        rendered = "; ".join(
            f"{label}={', '.join(ids)}" for label, ids in sorted(tally.items())
        )
        lines.append(f"item {item} status: {rendered}")
        severities = report.item_severity_tally.get(item)
        if severities:
            rendered = "; ".join(
                f"{grade}={', '.join(ids)}" for grade, ids in sorted(severities.items())
            )
            lines.append(f"item {item} severity: {rendered}")
    if report.claim_clusters:
        lines.append("claim clusters:")
        for cluster in report.claim_clusters:
            prefix = f"[{cluster.section}] " if cluster.section else ""
            lines.append(
                f"  {cluster.cluster_id} ({', '.join(cluster.supporters())}): "
                f"{prefix}{cluster.representative}"
            )
    if report.conflicts:
        lines.append("conflicts:")
        for conflict in report.conflicts:
            positions = " ".join(f"{m}={v}" for m, v in conflict.positions)
            lines.append(f"  {conflict.target} {conflict.kind}: {positions}")
    if report.uncertainty_flags:
        lines.append("uncertainty:")
        for flag in report.uncertainty_flags:
            lines.append(f"  {flag.target}: {flag.reason}")
    return "\n".join(lines)


def render_policy_text(policies: PolicySet) -> str:
    doc = policies.to_dict()
    lines = []
    for key in sorted(doc):
        value = doc[key]
        if isinstance(value, dict):
            value = ", ".join(f"{k}={v}" for k, v in sorted(value.items()))
        elif isinstance(value, list):
            value = ", ".join(str(v) for v in value) or "none"
        lines.append(f"{key}: {value}")
    return "\n".join(lines)


def build_reasoner_prompt(
    reasoner_template: str,
    candidates: Sequence[CandidateOutput],
    report: ConsensusReport,
    policies: PolicySet,
    context: SharedContext,
):
    """Render the reasoner's prompt.

    The template may reference any context field plus the reserved names
    ``candidates`` (every ok candidate, fenced and attributed),
    ``consensus``, ``policies``, ``output_grammar``, and
    ``image_manifest`` (images are passed by reference, not re-attached).
    """
    ok_sorted = sorted(
        (c for c in candidates if c.status == STATUS_OK), key=lambda c: c.model_id
    )
    blocks = "\n\n".join(
        fence_candidate(c.model_id, c.raw_text) for c in ok_sorted
    )
    manifest = "\n".join(
        f"{image.source_id}: {image.content_hash}" for image in context.image_inputs
    )
    extra = {
        "candidates": blocks,
        "consensus": render_consensus_summary(report),
        "policies": render_policy_text(policies),
        "output_grammar": DECISION_GRAMMAR_TEXT,
        "image_manifest": manifest,
    }
    return render_canonical_prompt(
        reasoner_template,
        context,
        template_id="reasoner",
        extra_fields=extra,
        attach_images=False,
    )


_CITES = re.compile(r"^cites:\s*(.*)$", re.IGNORECASE)


def parse_reasoner_decision(
    text: str,
) -> tuple[tuple[tuple[str, str, str, tuple[str, ...]], ...], str]:
    """Parse a reasoner reply into raw (target, value, confidence, cites)
    tuples plus the rationale text. Strict: one malformed entry line fails
    the whole response."""
    lines = text.split("\n")
    start = next(
        (i for i, line in enumerate(lines) if line.strip().lower() == "decision:"),
        None,
    )
    if start is None:
        raise ReasonerOutputInvalid("no DECISION block")
    entries: list[tuple[str, str, str, tuple[str, ...]]] = []
    rationale_lines: list[str] = []
    in_rationale = False
    for line in lines[start + 1 :]:
        if not in_rationale and line.strip().lower() == "rationale:":
            in_rationale = True
            continue
        if in_rationale:
            rationale_lines.append(line)
            continue
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 4:
            raise ReasonerOutputInvalid(f"entry line needs 4 fields: {line!r}")
        target, value, confidence = parts[0], parts[1], parts[2].lower()
        cites_match = _CITES.match(parts[3])
        if not target or not value or cites_match is None:
            raise ReasonerOutputInvalid(f"malformed entry line: {line!r}")
        if confidence not in CONFIDENCES:
            raise ReasonerOutputInvalid(f"unknown confidence {parts[2]!r}")
        cites = tuple(
            s.strip() for s in cites_match.group(1).split(",") if s.strip()
        )
        entries.append((target, value, confidence, cites))
    if not entries:
        raise ReasonerOutputInvalid("DECISION block has no entries")
    return tuple(entries), "\n".join(rationale_lines).strip()


def _merge_reasoner_entries(
    base: ConsolidatedDecision,
    raw_entries: Sequence[tuple[str, str, str, tuple[str, ...]]],
    rationale: str,
    report: ConsensusReport,
    schema: OutputSchema,
    policies: PolicySet,
    context: SharedContext,
) -> ConsolidatedDecision:
    ok_ids = set(report.model_order)
    entries: list[DecisionEntry] = []
    discarded: list[DiscardedEntry] = []

    def _cited(
        confidence: str, cites: tuple[str, ...]
    ) -> tuple[str, tuple[str, ...], tuple[str, ...]]:
        provenance = tuple(sorted(set(cites) & ok_ids))
        if provenance:
            return confidence, provenance, ()
        return CONFIDENCE_LOW, (), (FLAG_UNCITED,)

    if schema.kind in STRUCTURED_KINDS:
        tallies: dict[str, Mapping[str, tuple[str, ...]]] = {}
        if schema.kind == KIND_SINGLE_LABEL:
            tallies[LABEL_FIELD] = report.label_tally
        else:
            for item, tally in report.item_status_tally.items():
                tallies[field_status(item)] = tally
            for item, tally in report.item_severity_tally.items():
                tallies[field_severity(item)] = tally
        covered: set[str] = set()
        for target, value, confidence, cites in raw_entries:
            if target not in tallies:
                raise ReasonerOutputInvalid(f"unknown field {target!r}")
            if target in covered:
                raise ReasonerOutputInvalid(f"duplicate field {target!r}")
            tally = tallies[target]
            if value not in tally:
                raise ReasonerOutputInvalid(
                    f"value {value!r} is outside the tally space of {target!r}"
                )
            confidence, provenance, flags = _cited(confidence, cites)
            covered.add(target)
            entries.append(
                DecisionEntry(target, value, confidence, provenance, flags)
            )
            for other in sorted(tally):
                if other != value:
                    discarded.append(
                        DiscardedEntry(target, other, REASON_OUTLIER, tally[other])
                    )
        # Fields the reasoner did not rule on keep their deterministic
        # resolution, visibly flagged.
        for entry in base.entries:
            if entry.target not in covered:
                entries.append(
                    replace(entry, flags=(*entry.flags, FLAG_DETERMINISTIC_FILL))
                )
        covered_targets = {e.target for e in entries}
        for discard in base.discarded:
            if discard.target not in covered:
                discarded.append(discard)
        entries.sort(key=lambda e: e.target)
        payload = _assemble_structured_payload(schema.kind, entries)

    else:
        pool = context_token_pool(context)
        accepted_values: list[str] = []
        free_index = 0
        section_order: list[str] = []
        section_claims: dict[str, list[str]] = {}
        for target, value, confidence, cites in raw_entries:
            confidence, provenance, flags = _cited(confidence, cites)
            if (
                policies.grounding_required
                and grounding_overlap(value, pool) < policies.grounding_min_overlap
            ):
                discarded.append(
                    DiscardedEntry(
                        target if schema.kind == KIND_CLINICAL_REPORT else f"r{free_index:03d}",
                        value,
                        REASON_UNGROUNDED,
                        provenance,
                    )
                )
                free_index += 1
                continue
            if schema.kind == KIND_FREE_TEXT:
                entry_target = f"r{free_index:03d}"
                free_index += 1
            else:
                entry_target = target
                if target not in section_claims:
                    section_order.append(target)
                    section_claims[target] = []
                section_claims[target].append(value)
            entries.append(
                DecisionEntry(entry_target, value, confidence, provenance, flags)
            )
            accepted_values.append(value)
        # Conservation: every tallied cluster either reappears verbatim in
        # the accepted set or is discarded as an outlier.
        accepted_set = set(accepted_values)
        for cluster in report.claim_clusters:
            if cluster.representative not in accepted_set:
                discarded.append(
                    DiscardedEntry(
                        cluster.cluster_id,
                        cluster.representative,
                        REASON_OUTLIER,
                        cluster.supporters(),
                    )
                )
        if schema.kind == KIND_FREE_TEXT:
            payload = StructuredPayload(kind=schema.kind, claims=tuple(accepted_values))
        else:
            payload = StructuredPayload(
                kind=schema.kind,
                sections=tuple(
                    Section(name, tuple(section_claims[name]))
                    for name in section_order
                ),
            )

    return ConsolidatedDecision(
        run_id=base.run_id,
        schema_kind=schema.kind,
        payload=payload,
        entries=tuple(entries),
        discarded=tuple(
            sorted(discarded, key=lambda d: (d.target, d.value, d.reason))
        ),
        consolidation_mode=MODE_REASONER,
        reasoner_rationale=rationale or None,
    )


def _assemble_structured_payload(
    kind: str, entries: Sequence[DecisionEntry]
) -> StructuredPayload:
    if kind == KIND_SINGLE_LABEL:
        label = next(e.value for e in entries if e.target == LABEL_FIELD)
        return StructuredPayload(kind=kind, label=label)
    statuses: dict[str, str] = {}
    severities: dict[str, str] = {}
    for entry in entries:
        if entry.target.endswith(".status"):
            statuses[entry.target[: -len(".status")]] = entry.value
        elif entry.target.endswith(".severity"):
            severities[entry.target[: -len(".severity")]] = entry.value
    findings = tuple(
        ItemFinding(item=item, status=status, severity=severities.get(item))
        for item, status in statuses.items()
    )
    return StructuredPayload(kind=kind, items=findings)


def consolidate_with_reasoner(
    task: TaskSpec,
    candidates: Sequence[CandidateOutput],
    report: ConsensusReport,
    registry: BackendRegistry,
) -> tuple[ConsolidatedDecision, dict[str, Any]]:
    """Reasoner-led consolidation with deterministic fallback.

    Returns the decision plus an invocation summary for the audit trail.
    The summary preserves the reasoner's raw response verbatim.
    """
    base = consolidate_deterministic(report, task.schema, task.policies, task.context)
    prompt = build_reasoner_prompt(
        task.reasoner_template, candidates, report, task.policies, task.context
    )
    info: dict[str, Any] = {
        "model_id": task.reasoner.model_id,
        "backend_ref": task.reasoner.backend_ref,
        "prompt_hash": prompt.prompt_hash,
    }
    allow_fallback = task.policies.allow_deterministic_fallback
    backend = resolve_backend(registry, task.reasoner.backend_ref)
    try:
        result = backend.invoke(prompt)
    except BackendError as exc:
        info.update(
            status="invocation_failed",
            error=str(exc),
            fallback_applied=allow_fallback,
        )
        if allow_fallback:
            return base, info
        raise ReasonerFailed(str(exc)) from exc
    info["response_text"] = result.text
    info["latency_ms"] = result.latency_ms
    try:
        raw_entries, rationale = parse_reasoner_decision(result.text)
        decision = _merge_reasoner_entries(
            base,
            raw_entries,
            rationale,
            report,
            task.schema,
            task.policies,
            task.context,
        )
    except ReasonerOutputInvalid as exc:
        info.update(
            status="output_invalid", error=str(exc), fallback_applied=allow_fallback
        )
        if allow_fallback:
            return base, info
        raise
    info.update(status="ok", fallback_applied=False)
    return decision, info
