"""Append-only, hash-chained audit trail plus replay and explanation.

Every pipeline stage appends one record to ``{run_id}.audit.jsonl``, one
canonical JSON document per line. Records link into a chain::

    body_hash   = hash(canonical(body minus wall-clock fields))
    record_hash = hash("{seq}:{kind}:{body_hash}:{prev_hash}")

The first record's ``prev_hash`` is the zero digest (64 zeros). Wall-clock
fields (``wall_time``, ``received_at``, ``latency_ms``, ``started_at``,
``finished_at``) are stored for inspection but excluded from hashing at
any nesting depth, so two logically identical runs produce identical
chains even though their clocks differ. Everything else is covered:
flipping any hashed byte of a record, or deleting a record, breaks
verification at a well-defined sequence number.

Verification walks the file once. For each line it checks, in order, that
the line parses, that the record is internally consistent (stored hashes
match recomputed ones), that the stored seq matches the position, and
that ``prev_hash`` continues the chain. An internally consistent record
found at the wrong position reports its own stored seq (that is what a
deletion in front of it looks like); a corrupted record reports the
position it occupies.

Replay rebuilds the decision from the recorded task parameters and raw
candidate texts by rerunning parsing, consensus, and deterministic
consolidation, then compares against the recorded decision byte for byte.
Replay trusts record bodies and does not verify the chain first; a
mutated body therefore surfaces as a divergence, not an integrity error.
Reasoner-mode trails are not replayable without the scripted reasoner
that produced them.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional

from .consensus import compute_consensus
from .errors import (
    IncompleteTrail,
    MalformedRecord,
    ReplayDivergence,
    ReplayUnsupported,
    StorageError,
)
from .governance import (
    MODE_DETERMINISTIC,
    ConsolidatedDecision,
    consolidate_deterministic,
    enforce_policies,
)
from .hashing import HASH_ALGORITHM, ZERO_DIGEST, canonical_json, hash_canonical, hash_text
from .parsing import parse_candidates
from .types import (
    CandidateOutput,
    OutputSchema,
    PolicySet,
    SharedContext,
    StructuredPayload,
)

WALL_CLOCK_FIELDS = frozenset(
    {"wall_time", "received_at", "latency_ms", "started_at", "finished_at"}
)

KIND_RUN_STARTED = "run_started"
KIND_PROMPT_RENDERED = "prompt_rendered"
KIND_CANDIDATE_RECEIVED = "candidate_received"
KIND_CONSENSUS_COMPUTED = "consensus_computed"
KIND_REASONER_INVOKED = "reasoner_invoked"
KIND_POLICY_APPLIED = "policy_applied"
KIND_DECISION_ISSUED = "decision_issued"
KIND_RUN_FAILED = "run_failed"
RECORD_KINDS = (
    KIND_RUN_STARTED,
    KIND_PROMPT_RENDERED,
    KIND_CANDIDATE_RECEIVED,
    KIND_CONSENSUS_COMPUTED,
    KIND_REASONER_INVOKED,
    KIND_POLICY_APPLIED,
    KIND_DECISION_ISSUED,
    KIND_RUN_FAILED,
)

_RECORD_FIELDS = (
    "seq",
    "run_id",
    "kind",
    "body",
    "body_hash",
    "prev_hash",
    "record_hash",
    "wall_time",
)


def strip_wall_clock(value: Any) -> Any:
    """Drop wall-clock keys at every nesting depth; pure, copies as it goes."""
    if isinstance(value, dict):
        return {
            key: strip_wall_clock(inner)
            for key, inner in value.items()
            if key not in WALL_CLOCK_FIELDS
        }
    if isinstance(value, list):
        return [strip_wall_clock(inner) for inner in value]
    return value


def body_digest(body: Mapping[str, Any]) -> str:
    return hash_canonical(strip_wall_clock(dict(body)))


def record_digest(seq: int, kind: str, body_hash: str, prev_hash: str) -> str:
    return hash_text(f"{seq}:{kind}:{body_hash}:{prev_hash}")


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    run_id: str
    kind: str
    body: Mapping[str, Any]
    body_hash: str
    prev_hash: str
    record_hash: str
    wall_time: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "run_id": self.run_id,
            "kind": self.kind,
            "body": dict(self.body),
            "body_hash": self.body_hash,
            "prev_hash": self.prev_hash,
            "record_hash": self.record_hash,
            "wall_time": self.wall_time,
        }


class AuditTrail:
    """Writer for one run's trail. Appends flush before returning so a
    record exists on disk before the pipeline acts on it."""

    def __init__(self, path: str, run_id: str) -> None:
        self.path = str(path)
        self.run_id = run_id
        self._seq = 0
        self._prev_hash = ZERO_DIGEST
        try:
            self._handle = open(self.path, "x", encoding="utf-8")
        except FileExistsError:
            raise StorageError(f"trail already exists: {self.path}") from None
        except OSError as exc:
            raise StorageError(f"cannot create trail {self.path}: {exc}") from exc

    @property
    def closed(self) -> bool:
        return self._handle is None

    def append(self, kind: str, body: Mapping[str, Any]) -> AuditRecord:
        if self._handle is None:
            raise StorageError("trail is closed")
        if kind not in RECORD_KINDS:
            raise StorageError(f"unknown record kind {kind!r}")
        body_hash = body_digest(body)
        record = AuditRecord(
            seq=self._seq,
            run_id=self.run_id,
            kind=kind,
            body=dict(body),
            body_hash=body_hash,
            prev_hash=self._prev_hash,
            record_hash=record_digest(self._seq, kind, body_hash, self._prev_hash),
            wall_time=time.time(),
        )
        try:
            self._handle.write(canonical_json(record.to_dict()) + "\n")
            self._handle.flush()
        except OSError as exc:
            raise StorageError(f"cannot append to {self.path}: {exc}") from exc
        self._seq += 1
        self._prev_hash = record.record_hash
        return record

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "AuditTrail":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


def read_trail(path: str) -> list[AuditRecord]:
    """Parse a trail file without judging chain integrity."""
    records: list[AuditRecord] = []
    with open(path, encoding="utf-8") as handle:
        for position, line in enumerate(handle):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except ValueError as exc:
                raise MalformedRecord(position, str(exc)) from None
            if not isinstance(doc, dict) or any(
                field not in doc for field in _RECORD_FIELDS
            ):
                raise MalformedRecord(position, "missing record fields")
            records.append(
                AuditRecord(
                    seq=doc["seq"],
                    run_id=doc["run_id"],
                    kind=doc["kind"],
                    body=doc["body"],
                    body_hash=doc["body_hash"],
                    prev_hash=doc["prev_hash"],
                    record_hash=doc["record_hash"],
                    wall_time=doc["wall_time"],
                )
            )
    return records


def verify_chain(path: str) -> Optional[int]:
    """Walk the chain; return None when intact, else the seq where it breaks.

    See the module docstring for how the reported seq is chosen when a
    record is displaced versus corrupted.
    """
    prev_hash = ZERO_DIGEST
    with open(path, encoding="utf-8") as handle:
        position = -1
        for line in handle:
            if not line.strip():
                continue
            position += 1
            try:
                doc = json.loads(line)
            except ValueError:
                return position
            if not isinstance(doc, dict) or any(
                field not in doc for field in _RECORD_FIELDS
            ):
                return position
            seq = doc["seq"]
            if not isinstance(seq, int):
                return position
            recomputed_body = body_digest(doc["body"]) if isinstance(doc["body"], dict) else ""
            internally_consistent = (
                recomputed_body == doc["body_hash"]
                and record_digest(seq, doc["kind"], doc["body_hash"], doc["prev_hash"])
                == doc["record_hash"]
            )
            if not internally_consistent:
                return position
            if seq != position:
                return seq
            if doc["prev_hash"] != prev_hash:
                return seq
            prev_hash = doc["record_hash"]
    return None


@dataclass(frozen=True)
class TrailView:
    """The reconstructable content of one trail."""

    run_id: str
    started: Mapping[str, Any]
    schema: OutputSchema
    policies: PolicySet
    context: SharedContext
    candidates: tuple[CandidateOutput, ...]
    consensus_body: Optional[Mapping[str, Any]]
    reasoner_body: Optional[Mapping[str, Any]]
    decision_body: Optional[Mapping[str, Any]]
    failure_body: Optional[Mapping[str, Any]]


def load_trail_view(path: str) -> TrailView:
    records = read_trail(path)
    started = next((r for r in records if r.kind == KIND_RUN_STARTED), None)
    if started is None:
        raise IncompleteTrail("trail has no run_started record")
    body = started.body
    candidates = []
    for record in records:
        if record.kind != KIND_CANDIDATE_RECEIVED:
            continue
        doc = record.body
        parsed = doc.get("parsed")
        candidates.append(
            CandidateOutput(
                run_id=doc["run_id"],
                model_id=doc["model_id"],
                raw_text=doc["raw_text"],
                parsed=StructuredPayload.from_dict(parsed) if parsed else None,
                latency_ms=doc.get("latency_ms", 0),
                received_at=doc.get("received_at", 0.0),
                content_hash=doc["content_hash"],
                status=doc["status"],
            )
        )
    consensus_body = next(
        (r.body for r in records if r.kind == KIND_CONSENSUS_COMPUTED), None
    )
    reasoner_body = next(
        (r.body for r in records if r.kind == KIND_REASONER_INVOKED), None
    )
    decision_body = next(
        (r.body for r in records if r.kind == KIND_DECISION_ISSUED), None
    )
    failure_body = next((r.body for r in records if r.kind == KIND_RUN_FAILED), None)
    return TrailView(
        run_id=started.run_id,
        started=body,
        schema=OutputSchema.from_dict(body["schema"]),
        policies=PolicySet.from_dict(body["policies"]),
        context=SharedContext.from_dict(body["context"]),
        candidates=tuple(candidates),
        consensus_body=consensus_body,
        reasoner_body=reasoner_body,
        decision_body=decision_body,
        failure_body=failure_body,
    )


def _dict_diff(expected: Any, actual: Any, path: str = "$") -> list[str]:
    if isinstance(expected, dict) and isinstance(actual, dict):
        diffs: list[str] = []
        for key in sorted(set(expected) | set(actual)):
            if key not in expected:
                diffs.append(f"{path}.{key} (unexpected)")
            elif key not in actual:
                diffs.append(f"{path}.{key} (missing)")
            else:
                diffs.extend(_dict_diff(expected[key], actual[key], f"{path}.{key}"))
        return diffs
    if isinstance(expected, list) and isinstance(actual, list):
        if len(expected) != len(actual):
            return [f"{path} (length {len(expected)} != {len(actual)})"]
        diffs = []
        for index, (e, a) in enumerate(zip(expected, actual)):
            diffs.extend(_dict_diff(e, a, f"{path}[{index}]"))
        return diffs
    if expected != actual:
        return [path]
    return []


def replay(path: str) -> ConsolidatedDecision:
    """Recompute the decision from recorded inputs and compare.

    Byte-identical agreement with the recorded decision is required; any
    difference raises ReplayDivergence with the diverging field paths.
    """
    view = load_trail_view(path)
    if view.decision_body is None:
        raise IncompleteTrail("trail has no decision_issued record")
    if not view.candidates:
        raise IncompleteTrail("trail has no candidate_received records")
    recorded_mode = view.decision_body.get("consolidation_mode")
    if recorded_mode != MODE_DETERMINISTIC:
        raise ReplayUnsupported(
            "only deterministic-mode trails replay without the scripted reasoner"
        )
    parsed = parse_candidates(view.candidates, view.schema)
    report = compute_consensus(
        parsed, view.schema, view.policies, run_id=view.run_id
    )
    decision = consolidate_deterministic(
        report, view.schema, view.policies, view.context
    )
    decision = enforce_policies(decision, view.policies)
    recomputed = decision.to_dict()
    recorded = dict(view.decision_body)
    if canonical_json(recomputed) != canonical_json(recorded):
        raise ReplayDivergence(tuple(_dict_diff(recorded, recomputed)))
    return decision


def _render_candidate_lines(view: TrailView) -> list[str]:
    lines = ["candidates:"]
    for candidate in sorted(view.candidates, key=lambda c: c.model_id):
        lines.append(
            f"  {candidate.model_id} [{candidate.status}] "
            f"hash={candidate.content_hash[:12]}"
        )
    return lines


def explain_report(path: str) -> str:
    """Human-readable account of how the decision came to be."""
    doc = explain_document(path)
    lines = [
        f"run {doc['run_id']} ({doc['schema_kind']}, {doc['consolidation_mode']} mode)",
        f"agreement_ratio: {doc['agreement_ratio']:.3f}",
    ]
    lines.append("candidates:")
    for candidate in doc["candidates"]:
        lines.append(f"  {candidate['model_id']} [{candidate['status']}]")
    lines.append("fields:")
    for entry in doc["entries"]:
        provenance = ", ".join(entry["provenance"]) or "none"
        flags = f" flags: {', '.join(entry['flags'])}" if entry["flags"] else ""
        lines.append(
            f"  {entry['target']} = {entry['value']} "
            f"[{entry['confidence']}] (cites: {provenance}){flags}"
        )
        for model, value in entry.get("positions", {}).items():
            lines.append(f"    {model}: {value}")
        for member in entry.get("support", []):
            lines.append(f"    {member['model_id']}: {member['text']}")
    if doc["conflicts"]:
        lines.append("conflicts:")
        for conflict in doc["conflicts"]:
            positions = " ".join(
                f"{m}={v}" for m, v in sorted(conflict["positions"].items())
            )
            lines.append(f"  {conflict['target']} {conflict['kind']}: {positions}")
    else:
        lines.append("conflicts: none")
    if doc["discarded"]:
        lines.append("discarded:")
        for discard in doc["discarded"]:
            models = ", ".join(discard["model_ids"]) or "none"
            lines.append(
                f"  {discard['target']}: {discard['value']!r} "
                f"({discard['reason']}; from {models})"
            )
    else:
        lines.append("discarded: none")
    if doc["uncertainty_flags"]:
        lines.append("uncertainty:")
        for flag in doc["uncertainty_flags"]:
            lines.append(f"  {flag['target']}: {flag['reason']}")
    if doc.get("reasoner_rationale"):
        lines.append("rationale:")
        for line in doc["reasoner_rationale"].split("\n"):
            lines.append(f"  {line}")
    return "\n".join(lines) + "\n"


def explain_document(path: str) -> dict[str, Any]:
    """Machine-readable variant of the explanation."""
    view = load_trail_view(path)
    if view.decision_body is None:
        raise IncompleteTrail("trail has no decision_issued record")
    if not view.candidates:
        raise IncompleteTrail("trail has no candidate_received records")
    consensus_doc = view.consensus_body
    if consensus_doc is None:
        parsed = parse_candidates(view.candidates, view.schema)
        consensus_doc = compute_consensus(
            parsed, view.schema, view.policies, run_id=view.run_id
        ).to_dict()
    decision = view.decision_body
    cluster_members: dict[str, list[dict[str, str]]] = {}
    positions_by_target: dict[str, dict[str, str]] = {}
    for cluster in consensus_doc.get("claim_clusters", []):
        cluster_members[cluster["representative"]] = [
            {"model_id": m["model_id"], "text": m["text"]}
            for m in cluster["members"]
        ]
    for label, ids in consensus_doc.get("label_tally", {}).items():
        for model in ids:
            positions_by_target.setdefault("label", {})[model] = label
    for item, tally in consensus_doc.get("item_status_tally", {}).items():
        for label, ids in tally.items():
            for model in ids:
                positions_by_target.setdefault(f"{item}.status", {})[model] = label
    for item, tally in consensus_doc.get("item_severity_tally", {}).items():
        for grade, ids in tally.items():
            for model in ids:
                positions_by_target.setdefault(f"{item}.severity", {})[model] = grade
    entries = []
    for entry in decision["entries"]:
        doc = dict(entry)
        if entry["target"] in positions_by_target:
            doc["positions"] = dict(sorted(positions_by_target[entry["target"]].items()))
        if entry["value"] in cluster_members:
            doc["support"] = cluster_members[entry["value"]]
        entries.append(doc)
    return {
        "run_id": view.run_id,
        "schema_kind": decision["schema_kind"],
        "consolidation_mode": decision["consolidation_mode"],
        "agreement_ratio": consensus_doc["agreement_ratio"],
        "candidates": [
            {"model_id": c.model_id, "status": c.status, "content_hash": c.content_hash}
            for c in sorted(view.candidates, key=lambda c: c.model_id)
        ],
        "entries": entries,
        "discarded": list(decision["discarded"]),
        "conflicts": list(consensus_doc["conflicts"]),
        "uncertainty_flags": list(consensus_doc["uncertainty_flags"]),
        "payload": decision["payload"],
        "reasoner_rationale": decision.get("reasoner_rationale"),
    }
