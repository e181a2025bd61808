from __future__ import annotations

import re

_PUNCT = re.compile(r"[^\w\s]+", re.UNICODE)
_WS = re.compile(r"\s+")


def tokenize(text: str) -> list[str]:
    """Casefold, drop punctuation, split on whitespace."""
    return _PUNCT.sub("", text.casefold()).split()


def normalize_answer(text: str) -> str:
    text = _WS.sub(" ", text.casefold().strip())
    return text.rstrip(".!?;:,。").strip()
