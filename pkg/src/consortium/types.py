"""Domain types shared by every stage of a consortium run.

Everything here is a value: instances are frozen dataclasses, safe to share
across threads once constructed. Serialization helpers emit plain dicts with
stable shapes so the same object always produces the same canonical JSON.

A note on confidence: it is categorical (high, medium, low), never a raw
probability. The bands map a support fraction to a category and nothing
downstream ever reads the fraction back out of a decision.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional

from .errors import ConfigError
from .hashing import hash_canonical

ROLE_CONSORTIUM_MEMBER = "consortium_member"
ROLE_REASONER = "reasoner"
ROLES = (ROLE_CONSORTIUM_MEMBER, ROLE_REASONER)

MODALITY_TEXT = "text"
MODALITY_VISION_TEXT = "vision_text"
MODALITIES = (MODALITY_TEXT, MODALITY_VISION_TEXT)

KIND_FREE_TEXT = "free_text"
KIND_SINGLE_LABEL = "single_label"
KIND_LABELED_ITEMS = "labeled_items"
KIND_CLINICAL_REPORT = "clinical_report"
SCHEMA_KINDS = (
    KIND_FREE_TEXT,
    KIND_SINGLE_LABEL,
    KIND_LABELED_ITEMS,
    KIND_CLINICAL_REPORT,
)
# Kinds whose payloads are compared claim by claim rather than value by value.
TEXT_KINDS = (KIND_FREE_TEXT, KIND_CLINICAL_REPORT)
STRUCTURED_KINDS = (KIND_SINGLE_LABEL, KIND_LABELED_ITEMS)

STATUS_OK = "ok"
STATUS_BACKEND_ERROR = "backend_error"
STATUS_TIMEOUT = "timeout"
STATUS_PARSE_FAILED = "parse_failed"
CANDIDATE_STATUSES = (
    STATUS_OK,
    STATUS_BACKEND_ERROR,
    STATUS_TIMEOUT,
    STATUS_PARSE_FAILED,
)

# "Unknown" is a reserved label: with allows_unknown it is always part of the
# accepted output space even when the universe does not list it. "Uncertain"
# is a pseudo label that only decisions may carry; candidates never may.
UNKNOWN_LABEL = "Unknown"
UNCERTAIN_LABEL = "Uncertain"

CONFIDENCE_HIGH = "high"
CONFIDENCE_MEDIUM = "medium"
CONFIDENCE_LOW = "low"
CONFIDENCES = (CONFIDENCE_HIGH, CONFIDENCE_MEDIUM, CONFIDENCE_LOW)

DIVERGENCE_DOWNGRADE = "downgrade_and_flag"
DIVERGENCE_REJECT = "reject"
DIVERGENCE_ACTIONS = (DIVERGENCE_DOWNGRADE, DIVERGENCE_REJECT)


@dataclass(frozen=True)
class ModelDescriptor:
    """One participant: a consortium member or the reasoner."""

    model_id: str
    display_name: str
    role: str
    modality: str
    backend_ref: str

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ConfigError("model_id must be non-empty")
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r} for {self.model_id}")
        if self.modality not in MODALITIES:
            raise ConfigError(
                f"unknown modality {self.modality!r} for {self.model_id}"
            )
        if not self.backend_ref:
            raise ConfigError(f"backend_ref missing for {self.model_id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "display_name": self.display_name,
            "role": self.role,
            "modality": self.modality,
            "backend_ref": self.backend_ref,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelDescriptor":
        return cls(
            model_id=doc["model_id"],
            display_name=doc["display_name"],
            role=doc["role"],
            modality=doc["modality"],
            backend_ref=doc["backend_ref"],
        )


@dataclass(frozen=True)
class TextInput:
    source_id: str
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"source_id": self.source_id, "text": self.text}


@dataclass(frozen=True)
class ImageInput:
    """Reference to an image file plus the hash of its bytes.

    The hash is computed when the input is loaded so later stages can check
    resolvability without rereading the file.
    """

    source_id: str
    path: str
    content_hash: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "path": self.path,
            "content_hash": self.content_hash,
        }


@dataclass(frozen=True)
class SharedContext:
    """The one input bundle every consortium member receives.

    Immutable once a run begins. Text inputs and metadata form the
    placeholder namespace for templates; image inputs are attached to the
    canonical prompt by reference, in order.
    """

    text_inputs: tuple[TextInput, ...] = ()
    image_inputs: tuple[ImageInput, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "text_inputs", tuple(self.text_inputs))
        object.__setattr__(self, "image_inputs", tuple(self.image_inputs))
        object.__setattr__(self, "metadata", dict(self.metadata))
        seen: set[str] = set()
        for entry in (*self.text_inputs, *self.image_inputs):
            if entry.source_id in seen:
                raise ConfigError(f"duplicate source_id {entry.source_id!r}")
            seen.add(entry.source_id)

    def field_map(self) -> dict[str, str]:
        """Placeholder namespace: metadata keys first, text inputs override."""
        names: dict[str, str] = dict(self.metadata)
        for text in self.text_inputs:
            names[text.source_id] = text.text
        return names

    def to_dict(self) -> dict[str, Any]:
        return {
            "text_inputs": [t.to_dict() for t in self.text_inputs],
            "image_inputs": [i.to_dict() for i in self.image_inputs],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SharedContext":
        return cls(
            text_inputs=tuple(
                TextInput(t["source_id"], t["text"]) for t in doc["text_inputs"]
            ),
            image_inputs=tuple(
                ImageInput(i["source_id"], i["path"], i["content_hash"])
                for i in doc["image_inputs"]
            ),
            metadata=dict(doc["metadata"]),
        )

    @property
    def context_hash(self) -> str:
        return hash_canonical(self.to_dict())


@dataclass(frozen=True)
class CanonicalPrompt:
    """The single rendered prompt sent unchanged to every member."""

    template_id: str
    rendered_text: str
    attached_images: tuple[str, ...]
    prompt_hash: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "template_id": self.template_id,
            "rendered_text": self.rendered_text,
            "attached_images": list(self.attached_images),
            "prompt_hash": self.prompt_hash,
        }


@dataclass(frozen=True)
class OutputSchema:
    """What shape of answer the task demands from every candidate."""

    kind: str
    label_universe: tuple[str, ...] = ()
    item_universe: tuple[str, ...] = ()
    severity_scale: tuple[str, ...] = ()
    allows_unknown: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "label_universe", tuple(self.label_universe))
        object.__setattr__(self, "item_universe", tuple(self.item_universe))
        object.__setattr__(self, "severity_scale", tuple(self.severity_scale))
        if self.kind not in SCHEMA_KINDS:
            raise ConfigError(f"unknown schema kind {self.kind!r}")
        if self.kind == KIND_SINGLE_LABEL and not self.label_universe:
            raise ConfigError("single_label requires a non-empty label_universe")
        if self.kind == KIND_LABELED_ITEMS:
            if not self.item_universe:
                raise ConfigError("labeled_items requires a non-empty item_universe")
            if not self.label_universe:
                raise ConfigError("labeled_items requires a non-empty label_universe")
        for name, values in (
            ("label_universe", self.label_universe),
            ("item_universe", self.item_universe),
            ("severity_scale", self.severity_scale),
        ):
            if len(set(values)) != len(values):
                raise ConfigError(f"{name} contains duplicates")

    def accepted_labels(self) -> frozenset[str]:
        labels = set(self.label_universe)
        if self.allows_unknown:
            labels.add(UNKNOWN_LABEL)
        return frozenset(labels)

    def severity_index(self, grade: str) -> int:
        try:
            return self.severity_scale.index(grade)
        except ValueError:
            raise ConfigError(f"severity {grade!r} is not on the scale") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "label_universe": list(self.label_universe),
            "item_universe": list(self.item_universe),
            "severity_scale": list(self.severity_scale),
            "allows_unknown": self.allows_unknown,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "OutputSchema":
        return cls(
            kind=doc["kind"],
            label_universe=tuple(doc.get("label_universe") or ()),
            item_universe=tuple(doc.get("item_universe") or ()),
            severity_scale=tuple(doc.get("severity_scale") or ()),
            allows_unknown=bool(doc.get("allows_unknown", False)),
        )


@dataclass(frozen=True)
class ItemFinding:
    """One labeled item inside a labeled_items payload."""

    item: str
    status: str
    severity: Optional[str] = None
    rationale: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "item": self.item,
            "status": self.status,
            "severity": self.severity,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class Section:
    name: str
    claims: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "claims", tuple(self.claims))

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "claims": list(self.claims)}


@dataclass(frozen=True)
class StructuredPayload:
    """Schema-shaped content extracted from a candidate or issued as a decision.

    Only the fields matching ``kind`` are meaningful; the rest stay at their
    empty defaults. Items are kept sorted by item id so two payloads with the
    same content always compare equal and hash identically.
    """

    kind: str
    label: Optional[str] = None
    rationale: Optional[str] = None
    items: tuple[ItemFinding, ...] = ()
    sections: tuple[Section, ...] = ()
    claims: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in SCHEMA_KINDS:
            raise ConfigError(f"unknown payload kind {self.kind!r}")
        object.__setattr__(
            self, "items", tuple(sorted(self.items, key=lambda f: f.item))
        )
        object.__setattr__(self, "sections", tuple(self.sections))
        object.__setattr__(self, "claims", tuple(self.claims))

    def items_map(self) -> dict[str, ItemFinding]:
        return {f.item: f for f in self.items}

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind}
        if self.kind == KIND_SINGLE_LABEL:
            doc["label"] = self.label
            doc["rationale"] = self.rationale
        elif self.kind == KIND_LABELED_ITEMS:
            doc["items"] = {
                f.item: {
                    "status": f.status,
                    "severity": f.severity,
                    "rationale": f.rationale,
                }
                for f in self.items
            }
        elif self.kind == KIND_CLINICAL_REPORT:
            doc["sections"] = [s.to_dict() for s in self.sections]
        else:
            doc["claims"] = list(self.claims)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "StructuredPayload":
        kind = doc["kind"]
        if kind == KIND_SINGLE_LABEL:
            return cls(kind=kind, label=doc.get("label"), rationale=doc.get("rationale"))
        if kind == KIND_LABELED_ITEMS:
            findings = tuple(
                ItemFinding(
                    item=item,
                    status=entry["status"],
                    severity=entry.get("severity"),
                    rationale=entry.get("rationale"),
                )
                for item, entry in doc["items"].items()
            )
            return cls(kind=kind, items=findings)
        if kind == KIND_CLINICAL_REPORT:
            sections = tuple(
                Section(s["name"], tuple(s["claims"])) for s in doc["sections"]
            )
            return cls(kind=kind, sections=sections)
        return cls(kind=kind, claims=tuple(doc.get("claims") or ()))


def payload_violations(
    payload: StructuredPayload,
    schema: OutputSchema,
    *,
    decision: bool = False,
) -> list[str]:
    """Return every way ``payload`` breaks ``schema``; empty means valid.

    Candidate payloads must stay inside the schema's output space. Decision
    payloads (``decision=True``) may additionally carry the "Uncertain"
    pseudo label, which marks a field the run refused to resolve.
    """
    problems: list[str] = []
    if payload.kind != schema.kind:
        return [f"payload kind {payload.kind!r} does not match schema {schema.kind!r}"]
    allowed = set(schema.accepted_labels())
    if decision:
        allowed.add(UNCERTAIN_LABEL)
    if schema.kind == KIND_SINGLE_LABEL:
        if payload.label not in allowed:
            problems.append(f"label {payload.label!r} outside accepted labels")
    elif schema.kind == KIND_LABELED_ITEMS:
        if not payload.items:
            problems.append("labeled_items payload has no items")
        for finding in payload.items:
            if finding.item not in schema.item_universe:
                problems.append(f"item {finding.item!r} outside item_universe")
            if finding.status not in allowed:
                problems.append(
                    f"status {finding.status!r} on {finding.item} outside accepted labels"
                )
            if finding.severity is not None and finding.severity not in schema.severity_scale:
                problems.append(
                    f"severity {finding.severity!r} on {finding.item} not on the scale"
                )
    return problems


@dataclass(frozen=True)
class ConfidenceBands:
    """Thresholds mapping a support fraction to a categorical confidence."""

    high: float = 1.0
    medium: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 < self.medium <= self.high <= 1.0):
            raise ConfigError(
                f"confidence bands must satisfy 0 < medium <= high <= 1, "
                f"got medium={self.medium} high={self.high}"
            )

    def classify(self, fraction: float) -> str:
        if fraction >= self.high:
            return CONFIDENCE_HIGH
        if fraction >= self.medium:
            return CONFIDENCE_MEDIUM
        return CONFIDENCE_LOW

    def to_dict(self) -> dict[str, float]:
        return {"high": self.high, "medium": self.medium}


@dataclass(frozen=True)
class PolicySet:
    """Every knob governance and consensus consult during consolidation."""

    support_threshold: int = 2
    confidence_bands: ConfidenceBands = field(default_factory=ConfidenceBands)
    grounding_required: bool = False
    grounding_min_overlap: float = 0.3
    unknown_escalation: bool = False
    divergence_action: str = DIVERGENCE_DOWNGRADE
    banned_patterns: tuple[str, ...] = ()
    allow_deterministic_fallback: bool = True
    similarity_threshold: float = 0.6
    severity_divergence_step: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "banned_patterns", tuple(self.banned_patterns))
        if self.support_threshold < 1:
            raise ConfigError("support_threshold must be at least 1")
        if not (0.0 <= self.grounding_min_overlap <= 1.0):
            raise ConfigError("grounding_min_overlap must lie in [0, 1]")
        if not (0.0 < self.similarity_threshold <= 1.0):
            raise ConfigError("similarity_threshold must lie in (0, 1]")
        if self.severity_divergence_step < 1:
            raise ConfigError("severity_divergence_step must be at least 1")
        if self.divergence_action not in DIVERGENCE_ACTIONS:
            raise ConfigError(
                f"divergence_action must be one of {DIVERGENCE_ACTIONS}, "
                f"got {self.divergence_action!r}"
            )
        for pattern in self.banned_patterns:
            try:
                re.compile(pattern)
            except re.error as exc:
                raise ConfigError(f"banned pattern {pattern!r} does not compile: {exc}")

    def compiled_banned(self) -> tuple[re.Pattern[str], ...]:
        return tuple(re.compile(p) for p in self.banned_patterns)

    def to_dict(self) -> dict[str, Any]:
        return {
            "support_threshold": self.support_threshold,
            "confidence_bands": self.confidence_bands.to_dict(),
            "grounding_required": self.grounding_required,
            "grounding_min_overlap": self.grounding_min_overlap,
            "unknown_escalation": self.unknown_escalation,
            "divergence_action": self.divergence_action,
            "banned_patterns": list(self.banned_patterns),
            "allow_deterministic_fallback": self.allow_deterministic_fallback,
            "similarity_threshold": self.similarity_threshold,
            "severity_divergence_step": self.severity_divergence_step,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PolicySet":
        bands = doc.get("confidence_bands") or {}
        return cls(
            support_threshold=int(doc.get("support_threshold", 2)),
            confidence_bands=ConfidenceBands(
                high=float(bands.get("high", 1.0)),
                medium=float(bands.get("medium", 0.5)),
            ),
            grounding_required=bool(doc.get("grounding_required", False)),
            grounding_min_overlap=float(doc.get("grounding_min_overlap", 0.3)),
            unknown_escalation=bool(doc.get("unknown_escalation", False)),
            divergence_action=doc.get("divergence_action", DIVERGENCE_DOWNGRADE),
            banned_patterns=tuple(doc.get("banned_patterns") or ()),
            allow_deterministic_fallback=bool(
                doc.get("allow_deterministic_fallback", True)
            ),
            similarity_threshold=float(doc.get("similarity_threshold", 0.6)),
            severity_divergence_step=int(doc.get("severity_divergence_step", 2)),
        )


@dataclass(frozen=True)
class CandidateOutput:
    """One member's reply, preserved verbatim.

    ``raw_text`` is exactly what the backend produced; ``content_hash`` is
    the hash of those bytes. ``received_at`` and ``latency_ms`` are timing
    metadata and are excluded from every content hash.
    """

    run_id: str
    model_id: str
    raw_text: str
    parsed: Optional[StructuredPayload]
    latency_ms: int
    received_at: float
    content_hash: str
    status: str

    def __post_init__(self) -> None:
        if self.status not in CANDIDATE_STATUSES:
            raise ConfigError(f"unknown candidate status {self.status!r}")
        if self.latency_ms < 0:
            raise ConfigError("latency_ms must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "model_id": self.model_id,
            "raw_text": self.raw_text,
            "parsed": self.parsed.to_dict() if self.parsed is not None else None,
            "latency_ms": self.latency_ms,
            "received_at": self.received_at,
            "content_hash": self.content_hash,
            "status": self.status,
        }


@dataclass(frozen=True)
class TaskSpec:
    """Everything one run needs: who runs, on what input, under which rules."""

    workflow_id: str
    run_id: str
    consortium: tuple[ModelDescriptor, ...]
    reasoner: ModelDescriptor
    prompt_template: str
    reasoner_template: str
    context: SharedContext
    schema: OutputSchema
    policies: PolicySet
    quorum: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "consortium", tuple(self.consortium))

    def validate(self) -> None:
        if not self.workflow_id:
            raise ConfigError("workflow_id must be non-empty")
        if not self.run_id:
            raise ConfigError("run_id must be non-empty")
        if len(self.consortium) < 2:
            raise ConfigError("a consortium needs at least 2 members")
        ids = [m.model_id for m in self.consortium]
        if len(set(ids)) != len(ids):
            raise ConfigError("consortium model_ids must be unique")
        if self.reasoner.model_id in ids:
            raise ConfigError("the reasoner cannot also be a consortium member")
        for member in self.consortium:
            if member.role != ROLE_CONSORTIUM_MEMBER:
                raise ConfigError(
                    f"{member.model_id} must have role {ROLE_CONSORTIUM_MEMBER!r}"
                )
        if self.reasoner.role != ROLE_REASONER:
            raise ConfigError("the reasoner descriptor must carry the reasoner role")
        if not (2 <= self.quorum <= len(self.consortium)):
            raise ConfigError(
                f"quorum must lie in [2, {len(self.consortium)}], got {self.quorum}"
            )
        # Keeps the agreement invariants meaningful under partial failure:
        # once quorum passes, enough candidates exist to clear the threshold.
        if self.policies.support_threshold > self.quorum:
            raise ConfigError(
                f"support_threshold {self.policies.support_threshold} exceeds "
                f"quorum {self.quorum}"
            )
        if not self.prompt_template.strip():
            raise ConfigError("prompt_template must be non-empty")
        if not self.reasoner_template.strip():
            raise ConfigError("reasoner_template must be non-empty")

    def member_ids(self) -> tuple[str, ...]:
        return tuple(sorted(m.model_id for m in self.consortium))

    def to_dict(self) -> dict[str, Any]:
        return {
            "workflow_id": self.workflow_id,
            "run_id": self.run_id,
            "consortium": [m.to_dict() for m in self.consortium],
            "reasoner": self.reasoner.to_dict(),
            "prompt_template": self.prompt_template,
            "reasoner_template": self.reasoner_template,
            "context": self.context.to_dict(),
            "schema": self.schema.to_dict(),
            "policies": self.policies.to_dict(),
            "quorum": self.quorum,
        }
