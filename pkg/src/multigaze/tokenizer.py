"""Byte-level tokenizer with special tokens and a fixed merge table.

Ids ``0..255`` are raw bytes, followed by the special tokens and then the
multi-byte merges. Encoding is greedy longest-match. No merge contains ``P``
or a digit, so ``P<k>:`` headers and coordinates always tokenize per byte and
a header's ``P`` is always a token boundary.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Sequence

EOS = "<|endoftext|>"
GAZE_PAD = "<|gaze_pad|>"
VISION_PAD = "<|vision_pad|>"
SPECIAL_TOKENS = (EOS, GAZE_PAD, VISION_PAD)

_JSON_PIECES = [
    '{"', '"}', '": "', '", "', '": [', '], "', ']}', ', ', "]",
    "bbox_2d", "status", "inside", "outside", "point_2d", "category",
]
_EXTRA_WORDS = [
    "person", "red", "green", "blue", "yellow", "white", "purple", "black",
    "orange", "cup", "mug", "ball", "book", "phone", "table", "chair", "screen",
]


def _merge_table() -> List[str]:
    words = set()
    for name in ("localize", "semantic"):
        text = system_prompt(name)
        for w in re.findall(r" ?[A-Za-z]+", text):
            words.add(w)
    for w in _EXTRA_WORDS:
        words.add(w)
        words.add(" " + w)
    merges = set(_JSON_PIECES) | words
    merges = {m for m in merges if len(m.encode("utf-8")) > 1 and "P" not in m and not re.search(r"\d", m.replace("_2d", ""))}
    return sorted(merges)


def system_prompt(task_mode: str) -> str:
    """The versioned system prompt text for ``localize`` or ``semantic`` mode."""
    name = {"localize": "localize", "semantic": "semantic", "localize+semantic": "semantic"}[task_mode]
    return resources.files("multigaze.assets").joinpath(f"system_prompt_{name}.v1.txt").read_text(encoding="utf-8")


class ByteTokenizer:
    def __init__(self, merges: Sequence[str] = ()):
        self.specials = list(SPECIAL_TOKENS)
        self.merges = list(merges)
        self.pieces: List[bytes] = [bytes([b]) for b in range(256)]
        self.pieces += [s.encode("utf-8") for s in self.specials]
        self.pieces += [m.encode("utf-8") for m in self.merges]
        self._special_ids = {s: 256 + k for k, s in enumerate(self.specials)}
        self._merge_ids: Dict[bytes, int] = {
            m.encode("utf-8"): 256 + len(self.specials) + k for k, m in enumerate(self.merges)
        }
        self._max_merge = max((len(m) for m in self._merge_ids), default=1)
        self._special_re = re.compile("|".join(re.escape(s) for s in self.specials))

    @property
    def vocab_size(self) -> int:
        return len(self.pieces)

    @property
    def eos_id(self) -> int:
        return self._special_ids[EOS]

    @property
    def gaze_pad_id(self) -> int:
        return self._special_ids[GAZE_PAD]

    @property
    def vision_pad_id(self) -> int:
        return self._special_ids[VISION_PAD]

    def is_special(self, token_id: int) -> bool:
        return 256 <= token_id < 256 + len(self.specials)

    def _encode_plain(self, data: bytes, out: List[int]) -> None:
        i, n = 0, len(data)
        while i < n:
            for size in range(min(self._max_merge, n - i), 1, -1):
                tid = self._merge_ids.get(data[i:i + size])
                if tid is not None:
                    out.append(tid)
                    i += size
                    break
            else:
                out.append(data[i])
                i += 1

    def encode(self, text: str) -> List[int]:
        out: List[int] = []
        pos = 0
        for m in self._special_re.finditer(text):
            self._encode_plain(text[pos:m.start()].encode("utf-8"), out)
            out.append(self._special_ids[m.group(0)])
            pos = m.end()
        self._encode_plain(text[pos:].encode("utf-8"), out)
        return out

    def token_bytes(self, token_id: int) -> bytes:
        return self.pieces[token_id]

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.pieces[int(t)] for t in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


@lru_cache(maxsize=None)
def default_tokenizer() -> ByteTokenizer:
    return ByteTokenizer(_merge_table())
