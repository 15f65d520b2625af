"""Canonical serialization and digest behavior."""

import hashlib
import json

from hypothesis import given
from hypothesis import strategies as st

from consortium.hashing import (
    HASH_ALGORITHM,
    ZERO_DIGEST,
    canonical_json,
    hash_canonical,
    hash_content,
    hash_text,
)


def test_zero_digest_is_sixty_four_zeros() -> None:
    assert ZERO_DIGEST == "0" * 64
    assert HASH_ALGORITHM == "sha256"


def test_hash_text_matches_reference_sha256() -> None:
    assert hash_text("abc") == hashlib.sha256(b"abc").hexdigest()
    assert hash_content(b"abc") == hash_text("abc")


def test_canonical_json_sorts_keys_and_strips_whitespace() -> None:
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_canonical_json_keeps_unicode_unescaped() -> None:
    assert canonical_json({"k": "naïve"}) == '{"k":"naïve"}'


def test_hash_canonical_is_order_insensitive() -> None:
    assert hash_canonical({"a": 1, "b": 2}) == hash_canonical({"b": 2, "a": 1})


def test_hash_canonical_distinguishes_values() -> None:
    assert hash_canonical({"a": 1}) != hash_canonical({"a": 2})


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-5, 5) | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=3)
    | st.dictionaries(st.text(max_size=5), inner, max_size=3),
    max_leaves=10,
)


@given(json_values)
def test_canonical_json_round_trips(value) -> None:
    assert json.loads(canonical_json(value)) == value


@given(json_values)
def test_canonical_json_is_deterministic(value) -> None:
    assert canonical_json(value) == canonical_json(json.loads(canonical_json(value)))
