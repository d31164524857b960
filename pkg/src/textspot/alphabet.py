"""38-class output alphabet: digits, case-folded letters, PUNCT, END."""

from __future__ import annotations

import string

DIGITS = string.digits
LETTERS = string.ascii_lowercase
SYMBOLS = DIGITS + LETTERS  # indices 0..35

PUNCT = 36
END = 37
NUM_CLASSES = 38
# START is a decoder-input-only token, not part of the output space
START = 38
NUM_INPUT_TOKENS = 39

_CHAR_TO_INDEX = {ch: i for i, ch in enumerate(SYMBOLS)}


class EmptyTextError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    """Case-fold, collapse non-alphanumerics to PUNCT, append END."""
    if not text:
        raise EmptyTextError("EMPTY_TEXT")
    out = [_CHAR_TO_INDEX.get(ch, PUNCT) for ch in text.lower()]
    out.append(END)
    return out


def detokenize(indices) -> str:
    """Inverse of tokenize up to the PUNCT collapse; stops at END."""
    chars = []
    for i in indices:
        if i == END:
            break
        chars.append("!" if i == PUNCT else SYMBOLS[i])
    return "".join(chars)


def normalize_for_match(text: str) -> str:
    """Case-fold and strip punctuation, the form used for transcription matching."""
    return "".join(ch for ch in text.lower() if ch in _CHAR_TO_INDEX)
