"""Canonical prompt rendering.

Template syntax is literal substitution only: ``{{name}}`` is replaced by
the context field called ``name`` and nothing else is interpreted. No
conditionals, no loops, no nesting. Text outside placeholders passes
through byte for byte, including stray braces.

The placeholder namespace is the context's metadata keys plus its text
input source_ids; a text input shadows a metadata key of the same name.
Every image input in the context is attached to the prompt by reference,
in context order, and must resolve to an existing file at render time.

Rendering is pure: the same template and context always produce the same
``rendered_text`` and the same ``prompt_hash``. The hash covers the
rendered text and the attached image content hashes, so any change to
either changes the hash.
"""

from __future__ import annotations

import os
import re
from typing import Mapping

from .errors import MissingImage, UnresolvedPlaceholder
from .hashing import hash_canonical
from .types import CanonicalPrompt, SharedContext

PLACEHOLDER = re.compile(r"\{\{([A-Za-z0-9_.\-]+)\}\}")


def substitute(template: str, names: Mapping[str, str]) -> str:
    """Replace every ``{{name}}`` in ``template`` from ``names``."""

    def _replace(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in names:
            raise UnresolvedPlaceholder(name)
        return names[name]

    return PLACEHOLDER.sub(_replace, template)


def prompt_digest(rendered_text: str, image_hashes: tuple[str, ...]) -> str:
    return hash_canonical({"text": rendered_text, "images": list(image_hashes)})


def render_canonical_prompt(
    template: str,
    context: SharedContext,
    *,
    template_id: str = "task",
    extra_fields: Mapping[str, str] | None = None,
    attach_images: bool = True,
) -> CanonicalPrompt:
    """Render the one prompt every consortium member will receive.

    ``extra_fields`` extends the namespace (used for the reasoner prompt,
    whose template also references the candidate set); an extra field
    shadows a context field of the same name.
    """
    names = context.field_map()
    if extra_fields:
        names.update(extra_fields)
    rendered = substitute(template, names)

    attached: tuple[str, ...] = ()
    image_hashes: tuple[str, ...] = ()
    if attach_images:
        for image in context.image_inputs:
            if not os.path.isfile(image.path):
                raise MissingImage(image.source_id)
        attached = tuple(i.source_id for i in context.image_inputs)
        image_hashes = tuple(i.content_hash for i in context.image_inputs)

    return CanonicalPrompt(
        template_id=template_id,
        rendered_text=rendered,
        attached_images=attached,
        prompt_hash=prompt_digest(rendered, image_hashes),
    )
