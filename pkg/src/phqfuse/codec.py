"""Deterministic byte-level tokenizer with special tokens.

Token ids 0-255 are raw UTF-8 byte values; the four specials sit above
them. The AUDIO marker reserves the position where projected audio
embeddings are spliced into an input sequence.
"""

from __future__ import annotations

from .errors import RangeError

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
AUDIO_ID = 259

VOCAB_SIZE = 260

_SPECIALS = frozenset((BOS_ID, EOS_ID, PAD_ID, AUDIO_ID))


def encode(text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    """Map UTF-8 text to token ids, one id per byte."""
    ids = list(text.encode("utf-8"))
    if add_bos:
        ids.insert(0, BOS_ID)
    if add_eos:
        ids.append(EOS_ID)
    return ids


def decode(ids, errors: str = "strict") -> str:
    """Inverse of encode; special tokens are dropped.

    `errors` follows bytes.decode. Sampled model output is not guaranteed
    to be valid UTF-8, so generation paths decode with "replace".
    """
    data = bytearray()
    for token in ids:
        token = int(token)
        if token in _SPECIALS:
            continue
        if not 0 <= token <= 255:
            raise RangeError(f"token id {token} outside vocabulary of size {VOCAB_SIZE}")
        data.append(token)
    return data.decode("utf-8", errors=errors)
