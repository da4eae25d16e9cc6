"""Rule-based sentence splitting."""
from __future__ import annotations

import re

ABBREVIATIONS = frozenset({
    "inc", "ltd", "corp", "co", "mr", "mrs", "ms", "dr", "no", "st", "jr", "sr",
    "vs", "etc", "e.g", "i.e", "u.s", "approx", "dept", "est", "fig", "jan", "feb",
    "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "plc", "llc",
})

_BLANK_LINE = re.compile(r"\n\s*\n")
_BOUNDARY = re.compile(r"([.!?])[\"')\]]*\s+(?=[\"'(\[]?[A-Z0-9])")
_WORD_BEFORE = re.compile(r"([A-Za-z][A-Za-z.]*)$")


def _guarded(text: str, end: int) -> bool:
    m = _WORD_BEFORE.search(text, 0, end)
    return bool(m) and m.group(1).lower().rstrip(".") in ABBREVIATIONS


def split_sentences(raw_text: str) -> list[str]:
    """Split on ``. ! ?`` + whitespace + capital, and on blank lines.

    A period ending a known abbreviation ("Inc.", "Mr.", "No.") never ends a
    sentence.  Line breaks inside a paragraph are treated as spaces.
    """
    sentences = []
    for block in _BLANK_LINE.split(raw_text or ""):
        block = " ".join(block.split())
        start = 0
        for m in _BOUNDARY.finditer(block):
            if m.group(1) == "." and _guarded(block, m.start(1)):
                continue
            piece = block[start:m.end()].strip()
            if piece:
                sentences.append(piece)
            start = m.end()
        tail = block[start:].strip()
        if tail:
            sentences.append(tail)
    return sentences
