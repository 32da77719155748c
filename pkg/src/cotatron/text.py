"""Symbol inventory, tokenization and grapheme/phoneme representation mixing."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

PAD = "_"
EOS = "~"
SPACE = " "
PUNCTUATION = list("!'(),-.:;?")
LETTERS = list("abcdefghijklmnopqrstuvwxyz")
ARPABET = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P",
    "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
]
PHONEME_PREFIX = "@"

_WORD_RE = re.compile(r"[a-z']+|[^a-z'\s]")
_STRESS_RE = re.compile(r"\d")


class SymbolTable:
    """Immutable two-way symbol <-> id map.

    Markers and punctuation come first, then graphemes, then phonemes
    (``@``-prefixed ARPAbet); graphemes and phonemes never share ids.
    """

    def __init__(self, symbols: Sequence[str] | None = None):
        if symbols is None:
            symbols = ([PAD, EOS, SPACE] + PUNCTUATION + LETTERS
                       + [PHONEME_PREFIX + p for p in ARPABET])
        self._symbols = tuple(symbols)
        if len(set(self._symbols)) != len(self._symbols):
            raise ValidationError("duplicate symbols in table")
        self._index = {s: i for i, s in enumerate(self._symbols)}

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolTable) and self._symbols == other._symbols

    def __hash__(self) -> int:
        return hash(self._symbols)

    @property
    def symbols(self) -> tuple[str, ...]:
        return self._symbols

    def symbol(self, i: int) -> str:
        return self._symbols[i]

    def lookup(self, s: str) -> int:
        return self._index[s]

    def is_phoneme(self, i: int) -> bool:
        return self._symbols[i].startswith(PHONEME_PREFIX)

    def is_grapheme(self, i: int) -> bool:
        return self._symbols[i] in LETTERS

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps(list(self._symbols), ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "SymbolTable":
        return cls(json.loads(payload))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SymbolTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


DEFAULT_TABLE = SymbolTable()


@dataclass(frozen=True)
class SymbolSequence:
    ids: tuple[int, ...]
    dropped: int = 0

    def __post_init__(self):
        if len(self.ids) < 1:
            raise ValidationError("symbol sequence must be nonempty")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def length(self) -> int:
        return len(self.ids)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    def decode(self, table: SymbolTable = DEFAULT_TABLE) -> list[str]:
        return [table.symbol(i) for i in self.ids]


def _clean(text: str, table: SymbolTable) -> tuple[str, int]:
    text = " ".join(text.lower().split())
    kept = [c for c in text if c in table]
    dropped = len(text) - len(kept)
    return "".join(kept).strip(), dropped


def normalize_text(text: str, table: SymbolTable = DEFAULT_TABLE) -> str:
    """Lowercase, collapse whitespace and drop characters outside the table."""
    cleaned, _ = _clean(text, table)
    return " ".join(cleaned.split())


def tokenize(text: str, table: SymbolTable = DEFAULT_TABLE) -> SymbolSequence:
    cleaned, dropped = _clean(text, table)
    cleaned = " ".join(cleaned.split())
    if not cleaned:
        raise ValidationError("text is empty after normalization")
    if dropped:
        log.warning("dropped %d unknown character(s) from %r", dropped, text)
    return SymbolSequence(tuple(table.lookup(c) for c in cleaned), dropped)


def load_lexicon(path) -> dict[str, tuple[str, ...]]:
    """Read a CMU-style dictionary; first variant wins, stress digits removed."""
    lexicon: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8", errors="replace") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith(";;;"):
                continue
            parts = line.split()
            word = parts[0].lower()
            if word.endswith(")") and "(" in word:
                continue  # alternate pronunciation
            if word in lexicon or len(parts) < 2:
                continue
            lexicon[word] = tuple(_STRESS_RE.sub("", p).upper() for p in parts[1:])
    return lexicon


def mix_representation(text: str, lexicon: Mapping[str, Sequence[str]], p: float = 0.5,
                       seed: int = 0, table: SymbolTable = DEFAULT_TABLE) -> SymbolSequence:
    """Swap whole words for their lexicon phonemes with probability ``p``.

    One uniform draw is consumed per word (in or out of the lexicon) from a
    Philox stream, so output depends only on ``(text, p, seed)``.
    Punctuation and spaces are never replaced.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"mixing probability must be in [0, 1], got {p}")
    base = tokenize(text, table)
    if p == 0.0:
        return base
    cleaned = normalize_text(text, table)
    rng = np.random.Generator(np.random.Philox(seed))
    ids: list[int] = []
    for i, chunk in enumerate(cleaned.split(" ")):
        if i:
            ids.append(table.lookup(SPACE))
        for tok in _WORD_RE.findall(chunk):
            if not tok[0].isalpha() and tok[0] != "'":
                ids.append(table.lookup(tok))
                continue
            u = rng.random()
            phones = lexicon.get(tok)
            if phones is not None and u < p and all(PHONEME_PREFIX + ph in table for ph in phones):
                ids.extend(table.lookup(PHONEME_PREFIX + ph) for ph in phones)
            else:
                ids.extend(table.lookup(c) for c in tok)
    return SymbolSequence(tuple(ids), base.dropped)


def batch_ids(seqs: Iterable[SymbolSequence], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    seqs = list(seqs)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s.ids
    return out, lengths
