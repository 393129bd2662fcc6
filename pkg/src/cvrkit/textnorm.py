"""Text canonicalization helpers for captions, narrations and instructions."""

from __future__ import annotations

import re

_WS = re.compile(r"\s+")

# Case is preserved: the leading "#C C" camera-wearer convention is meaningful.
def canonical_text(text: str) -> str:
    """Trim and collapse internal whitespace."""
    return _WS.sub(" ", text.strip())


def narration_group_key(text: str) -> str:
    """Key under which equivalent narrations are grouped.

    Lowercased, whitespace-collapsed, trailing punctuation stripped, so
    "#C C puts down the cloth." and "#C C puts down the cloth" collide.
    """
    return canonical_text(text).lower().rstrip(".!?,;: ")


_WEARER_PREFIX = re.compile(r"^#\s*c\b\s*c?\b", re.IGNORECASE)


def narration_verb(text: str) -> str:
    """Heuristic action key: first token after the camera-wearer prefix.

    Used for same-action exclusion when a manifest carries no action labels.
    """
    body = _WEARER_PREFIX.sub("", canonical_text(text)).strip()
    if not body:
        return ""
    first = body.split(" ", 1)[0]
    return first.lower().strip(".,;:!?")
