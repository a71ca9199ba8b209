"""Hashing word tokenizer for text cues.

No vocabulary file is needed: each lower-cased word maps to a stable id via
CRC32. Id 0 is padding and id 1 is a leading [CLS]-style marker, so a single
word ("polyp") and a full sentence both tokenize without any setup.
"""

from __future__ import annotations

import re
import zlib
from typing import Sequence

import torch

PAD_ID = 0
CLS_ID = 1
_RESERVED = 2
_WORD = re.compile(r"[\w']+", re.UNICODE)


def tokenize(text: str, vocab_size: int, max_len: int) -> list[int]:
    if vocab_size <= _RESERVED:
        raise ValueError(f"vocab_size must exceed {_RESERVED}")
    ids = [CLS_ID]
    for word in _WORD.findall(text.lower()):
        ids.append(zlib.crc32(word.encode("utf-8")) % (vocab_size - _RESERVED) + _RESERVED)
    return ids[:max_len]


def batch_token_ids(texts: Sequence[str], vocab_size: int, max_len: int) -> torch.Tensor:
    """Tokenize and right-pad with ``PAD_ID`` into a ``(B, L)`` long tensor."""
    seqs = [tokenize(t, vocab_size, max_len) for t in texts]
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out
