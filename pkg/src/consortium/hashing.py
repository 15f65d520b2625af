"""Content hashing and canonical serialization.

One hash algorithm (sha256, hex encoded) is used for every content hash in
the project: prompts, candidate texts, audit record bodies, and chain links.
The algorithm name is written into each run's first audit record so stored
trails are self-describing.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

HASH_ALGORITHM = "sha256"
ZERO_DIGEST = "0" * 64


def hash_content(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_text(text: str) -> str:
    return hash_content(text.encode("utf-8"))


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and no insignificant whitespace.

    The same value always yields the same byte sequence, which makes the
    output safe to hash and to compare byte for byte.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def hash_canonical(obj: Any) -> str:
    return hash_text(canonical_json(obj))
