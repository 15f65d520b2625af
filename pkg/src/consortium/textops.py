"""Claim segmentation and token normalization.

These two operations are shared by candidate parsing, similarity scoring,
and grounding checks, so they live in one place and never diverge.

Claim segmentation splits on sentence terminators (``.``, ``!``, ``?``)
followed by whitespace, then trims each piece and drops empties. A chunk
without a terminator stays glued to whatever follows it; that is accepted
behavior, not a defect.

Normalization lowercases, replaces every non word character with a space,
and splits on whitespace. Token comparisons are set based.
"""

from __future__ import annotations

import re

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_NON_WORD = re.compile(r"[^\w\s]+", re.UNICODE)


def segment_claims(text: str) -> tuple[str, ...]:
    pieces = _SENTENCE_SPLIT.split(text)
    return tuple(p.strip() for p in pieces if p.strip())


def normalize_tokens(text: str) -> tuple[str, ...]:
    cleaned = _NON_WORD.sub(" ", text.lower())
    return tuple(cleaned.split())


def token_set(text: str) -> frozenset[str]:
    return frozenset(normalize_tokens(text))
