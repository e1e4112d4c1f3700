"""Approximate token counting.

Providers report authoritative usage; when they don't, the gateway and the
static-feature extractor fall back to a characters/4 approximation. The
counter is pluggable so a real tokenizer can be swapped in.
"""

from __future__ import annotations

from typing import Callable

Tokenizer = Callable[[str], int]


def approx_token_count(text: str) -> int:
    """ceil(len/4); the conventional rough tokens-per-character ratio."""
    return (len(text) + 3) // 4


def message_tokens(message: dict, tokenizer: Tokenizer = approx_token_count) -> int:
    return tokenizer(message.get("content") or "")


def conversation_tokens(messages: list[dict], tokenizer: Tokenizer = approx_token_count) -> int:
    return sum(message_tokens(m, tokenizer) for m in messages)
