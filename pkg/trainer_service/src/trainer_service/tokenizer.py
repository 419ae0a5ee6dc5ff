"""Byte-level tokenizer for the trainer's causal language model.

Every UTF-8 byte maps to its own token id (0..255), followed by three special
tokens.  The scheme needs no vocabulary files, round-trips arbitrary text, and
keeps the embedding table small enough for a desk-scale model.
"""

from __future__ import annotations

from typing import List, Sequence


class ByteTokenizer:
    """Reversible byte-level tokenizer with BOS/EOS/PAD specials."""

    bos_id = 256
    eos_id = 257
    pad_id = 258
    vocab_size = 259

    def encode(self, text: str) -> List[int]:
        """Map text to byte token ids (no special tokens added)."""
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        """Map token ids back to text, skipping special tokens."""
        data = bytes(i for i in ids if 0 <= i < 256)
        return data.decode("utf-8", errors="replace")
