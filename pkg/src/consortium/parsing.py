"""Schema-directed extraction of structured payloads from candidate text.

The candidate output grammar is line oriented. Keys are matched
case-insensitively at the start of a line; everything else is tolerated as
prose and ignored. Parse failures are data, not exceptions: a candidate
that cannot be parsed keeps its raw text and is marked ``parse_failed``.

single_label::

    label: <value>
    rationale: <text, may continue on following lines>

The first ``label:`` line wins; the value must be one of the schema's
accepted labels. Lines after ``rationale:`` that are not another known key
are appended to the rationale.

labeled_items::

    <item>: <status>[, <severity>[, <rationale>]]

A line whose key is an item from the schema's item_universe assigns that
item. The first line for an item wins; later duplicates are ignored.
Status must be an accepted label and severity, when present, must be on
the schema's severity scale; a recognized item line that breaks either
rule fails the whole parse. At least one item line is required.

clinical_report::

    <Section Name>:
    <sentences...>

A section header is a line consisting of a name followed by a single
trailing colon. Sentences under a header are segmented into claims; text
before the first header lands in a section called "general". This parse
never fails: a report with no headers at all is one "general" section.

free_text candidates are not parsed here at all; their claims are
segmented on demand when consensus runs. An ok free_text candidate
therefore carries ``parsed=None`` by design.
"""

from __future__ import annotations

import dataclasses
import re
from typing import Iterable, Sequence

from .textops import segment_claims
from .types import (
    KIND_CLINICAL_REPORT,
    KIND_FREE_TEXT,
    KIND_LABELED_ITEMS,
    KIND_SINGLE_LABEL,
    STATUS_OK,
    STATUS_PARSE_FAILED,
    CandidateOutput,
    ItemFinding,
    OutputSchema,
    Section,
    StructuredPayload,
    payload_violations,
)


class _ParseFailure(Exception):
    """Internal signal; never escapes parse_candidates."""


_KEY_LINE = re.compile(r"^\s*([^:\n]+?)\s*:\s*(.*)$")
_SECTION_HEADER = re.compile(r"^\s*([A-Za-z][A-Za-z0-9 _/\-]*?)\s*:\s*$")

GENERAL_SECTION = "general"


def parse_single_label(raw_text: str, schema: OutputSchema) -> StructuredPayload:
    label: str | None = None
    rationale_parts: list[str] = []
    capturing = False
    for line in raw_text.splitlines():
        match = _KEY_LINE.match(line)
        key = match.group(1).lower() if match else None
        if key == "label":
            if label is None:
                label = match.group(2).strip()
            capturing = False
        elif key == "rationale":
            if match.group(2).strip():
                rationale_parts.append(match.group(2).strip())
            capturing = True
        elif capturing and line.strip():
            rationale_parts.append(line.strip())
    if label is None:
        raise _ParseFailure("no label line")
    payload = StructuredPayload(
        kind=KIND_SINGLE_LABEL,
        label=label,
        rationale="\n".join(rationale_parts) or None,
    )
    problems = payload_violations(payload, schema)
    if problems:
        raise _ParseFailure("; ".join(problems))
    return payload


def parse_labeled_items(raw_text: str, schema: OutputSchema) -> StructuredPayload:
    items = set(schema.item_universe)
    findings: dict[str, ItemFinding] = {}
    for line in raw_text.splitlines():
        match = _KEY_LINE.match(line)
        if not match or match.group(1) not in items:
            continue
        item = match.group(1)
        if item in findings:
            continue
        parts = [p.strip() for p in match.group(2).split(",")]
        status = parts[0]
        severity = parts[1] if len(parts) > 1 and parts[1] else None
        rationale = ", ".join(parts[2:]) if len(parts) > 2 else None
        findings[item] = ItemFinding(
            item=item, status=status, severity=severity, rationale=rationale
        )
    if not findings:
        raise _ParseFailure("no item lines")
    payload = StructuredPayload(
        kind=KIND_LABELED_ITEMS, items=tuple(findings.values())
    )
    problems = payload_violations(payload, schema)
    if problems:
        raise _ParseFailure("; ".join(problems))
    return payload


def parse_clinical_report(raw_text: str) -> StructuredPayload:
    sections: list[tuple[str, list[str]]] = []
    current_name = GENERAL_SECTION
    current_body: list[str] = []

    def _close() -> None:
        claims = segment_claims("\n".join(current_body))
        if claims:
            sections.append((current_name, list(claims)))

    for line in raw_text.splitlines():
        header = _SECTION_HEADER.match(line)
        if header:
            _close()
            current_name = header.group(1).strip()
            current_body = []
        else:
            current_body.append(line)
    _close()
    return StructuredPayload(
        kind=KIND_CLINICAL_REPORT,
        sections=tuple(Section(name, tuple(claims)) for name, claims in sections),
    )


def parse_candidates(
    candidates: Sequence[CandidateOutput], schema: OutputSchema
) -> tuple[CandidateOutput, ...]:
    """Attach parsed payloads to ok candidates; failures become data.

    Raw text is never modified or discarded. Candidates that arrived in a
    failed state pass through untouched.
    """
    out: list[CandidateOutput] = []
    for candidate in candidates:
        if candidate.status != STATUS_OK or schema.kind == KIND_FREE_TEXT:
            out.append(candidate)
            continue
        try:
            if schema.kind == KIND_SINGLE_LABEL:
                payload = parse_single_label(candidate.raw_text, schema)
            elif schema.kind == KIND_LABELED_ITEMS:
                payload = parse_labeled_items(candidate.raw_text, schema)
            else:
                payload = parse_clinical_report(candidate.raw_text)
        except _ParseFailure:
            out.append(dataclasses.replace(candidate, status=STATUS_PARSE_FAILED))
            continue
        out.append(dataclasses.replace(candidate, parsed=payload))
    return tuple(out)


def candidate_claims(candidate: CandidateOutput) -> tuple[tuple[str, str], ...]:
    """(section, claim) pairs for a text-kind candidate.

    free_text claims come straight from segmentation of the raw text with
    an empty section name; clinical_report claims come from the parsed
    sections.
    """
    if candidate.parsed is not None and candidate.parsed.kind == KIND_CLINICAL_REPORT:
        return tuple(
            (section.name, claim)
            for section in candidate.parsed.sections
            for claim in section.claims
        )
    return tuple(("", claim) for claim in segment_claims(candidate.raw_text))
