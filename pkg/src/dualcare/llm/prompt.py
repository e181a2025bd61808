"""Prompt layout helpers shared by the agents and the offline mock."""

from __future__ import annotations

import re


def round_tag(r: int) -> str:
    """Marker every per-round prompt carries, so scripts can key on the round."""
    return f"[round {r}]"


def section(name: str, body: str) -> str:
    return f"## {name}\n{body.strip()}"


def join_sections(*parts: str) -> str:
    return "\n\n".join(p for p in parts if p)


def read_section(prompt: str, name: str) -> str:
    m = re.search(rf"^## {re.escape(name)}\n(.*?)(?=^## |\Z)", prompt, re.DOTALL | re.MULTILINE)
    return m.group(1).strip() if m else ""


_OPTION_LINE = re.compile(r"^([A-Z])\.\s+(.+)$", re.MULTILINE)


def format_options(options) -> str:
    return "\n".join(f"{letter}. {text}" for letter, text in options)


def read_options(prompt: str, name: str) -> list[tuple[str, str]]:
    return _OPTION_LINE.findall(read_section(prompt, name))
