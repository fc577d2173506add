"""Deterministic token counting for prompt budgeting and cost accounting.

The built-in "default-split" scheme is a conservative local approximation:
provider-reported usage overrides these counts in the ledger whenever it is
available, so only pre-send budgeting depends on this module.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

DEFAULT_SCHEME = "default-split"


@dataclass(frozen=True)
class TokenCounter:
    scheme_id: str
    count: Callable[[str], int]


def _char_class(ch: str) -> str:
    if ch.isalpha():
        return "a"
    if ch.isdigit():
        return "d"
    return "p"


def default_split_tokens(text: str) -> list[str]:
    """Split on whitespace, then split each run into maximal same-class
    (letter / digit / punctuation) sub-runs; each sub-run is one token."""
    tokens: list[str] = []
    for run in text.split():
        start = 0
        prev = _char_class(run[0])
        for i in range(1, len(run)):
            cls = _char_class(run[i])
            if cls != prev:
                tokens.append(run[start:i])
                start = i
                prev = cls
        tokens.append(run[start:])
    return tokens


def default_split_count(text: str) -> int:
    return len(default_split_tokens(text))


_SCHEMES: dict[str, Callable[[str], int]] = {DEFAULT_SCHEME: default_split_count}


def register_scheme(scheme_id: str, count: Callable[[str], int]) -> None:
    """Register a counting scheme, e.g. a model-exact tokenizer."""
    _SCHEMES[scheme_id] = count


def get_counter(scheme_id: str = DEFAULT_SCHEME) -> TokenCounter:
    try:
        return TokenCounter(scheme_id, _SCHEMES[scheme_id])
    except KeyError:
        known = ", ".join(sorted(_SCHEMES))
        raise ValueError(f"unknown tokenizer scheme {scheme_id!r} (known: {known})") from None


def count_tokens(text: str, scheme_id: str = DEFAULT_SCHEME) -> int:
    return get_counter(scheme_id).count(text)
