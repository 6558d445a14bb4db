"""Character-level vocabulary with word-initial token variants.

Whitespace is never a token in the default configuration: the first character
of every word after the first is emitted as a distinct *word-initial* variant,
so ``"apple pie"`` becomes ``a p p l e ^p i e``.
"""
from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from pathlib import Path

REGULAR = "regular"
WORD_INITIAL = "word-initial"
SPECIAL = "special"

PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
MASK = "<mask>"
UNK = "<unk>"
SEP = "<sep>"

DEFAULT_SPECIALS = (PAD, BOS, EOS, MASK, UNK, SEP)
REQUIRED_SPECIALS = (PAD, BOS, EOS)
# 94 printable non-space ASCII characters
DEFAULT_CHARSET = "".join(c for c in string.printable if c.isprintable() and not c.isspace())


@dataclass(frozen=True)
class VocabConfig:
    charset: str = DEFAULT_CHARSET
    specials: tuple[str, ...] = DEFAULT_SPECIALS
    word_initial: bool = True
    target_size: int | None = 194


@dataclass(frozen=True)
class Entry:
    id: int
    surface: str
    kind: str


@dataclass
class TokenSequence:
    """Encoded text. ``length`` counts content tokens; ``ids`` may be padded."""

    ids: list[int]
    length: int
    max_length: int | None = None
    unknown: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def content(self) -> list[int]:
        return self.ids[: self.length]


class Vocabulary:
    def __init__(self, entries: list[Entry]):
        self.entries = tuple(entries)
        self._index: dict[tuple[str, str], int] = {}
        for e in self.entries:
            key = (e.surface, e.kind)
            if key in self._index:
                raise ValueError(f"duplicate vocabulary entry {key!r}")
            self._index[key] = e.id
        if [e.id for e in self.entries] != list(range(len(self.entries))):
            raise ValueError("token ids must be contiguous from 0")
        for name in REQUIRED_SPECIALS:
            if (name, SPECIAL) not in self._index:
                raise ValueError(f"missing mandatory special token {name}")
        self.word_initial = any(e.kind == WORD_INITIAL for e in self.entries)
        self.pad_id = self._index[(PAD, SPECIAL)]
        self.bos_id = self._index[(BOS, SPECIAL)]
        self.eos_id = self._index[(EOS, SPECIAL)]
        self.mask_id = self._index.get((MASK, SPECIAL))
        self.unk_id = self._index.get((UNK, SPECIAL))
        self.sep_id = self._index.get((SEP, SPECIAL))
        self._alpha = frozenset(
            e.id for e in self.entries if e.kind != SPECIAL and e.surface.isalpha()
        )

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def token_id(self, surface: str, kind: str = REGULAR) -> int:
        return self._index[(surface, kind)]

    def get(self, surface: str, kind: str = REGULAR) -> int | None:
        return self._index.get((surface, kind))

    def is_alpha(self, token_id: int) -> bool:
        return token_id in self._alpha

    def is_special(self, token_id: int) -> bool:
        return self.entries[token_id].kind == SPECIAL

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(f"{e.id}\t{e.kind}\t{e.surface}\n".encode())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        lines = [f"{e.id}\t{e.kind}\t{_escape(e.surface)}" for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tid, kind, surface = line.split("\t")
            entries.append(Entry(int(tid), _unescape(surface), kind))
        return cls(entries)


def build_vocabulary(config: VocabConfig | None = None) -> Vocabulary:
    config = config or VocabConfig()
    specials = list(config.specials)
    missing = [s for s in REQUIRED_SPECIALS if s not in specials]
    if missing:
        raise ValueError(f"special token list must include {', '.join(missing)}")
    if len(set(config.charset)) != len(config.charset):
        raise ValueError("charset contains duplicate characters")
    if len(set(specials)) != len(specials):
        raise ValueError("special token list contains duplicates")

    entries: list[Entry] = []
    for s in specials:
        entries.append(Entry(len(entries), s, SPECIAL))
    for c in config.charset:
        entries.append(Entry(len(entries), c, REGULAR))
    if config.word_initial:
        for c in config.charset:
            if not c.isspace():
                entries.append(Entry(len(entries), c, WORD_INITIAL))

    if config.target_size is not None and len(entries) != config.target_size:
        raise ValueError(
            f"vocabulary composition gives {len(entries)} tokens, "
            f"declared target size is {config.target_size}"
        )
    return Vocabulary(entries)


def encode(text: str, vocab: Vocabulary, max_length: int | None = None) -> TokenSequence:
    """Map ``text`` to token ids; pads to ``max_length`` when given."""
    ids: list[int] = []
    unknown = 0
    words = text.split()
    space_id = vocab.get(" ")
    for w, word in enumerate(words):
        if w > 0 and not vocab.word_initial:
            if space_id is not None:
                ids.append(space_id)
            elif vocab.unk_id is not None:
                ids.append(vocab.unk_id)
                unknown += 1
        for i, ch in enumerate(word):
            kind = WORD_INITIAL if (w > 0 and i == 0 and vocab.word_initial) else REGULAR
            tid = vocab.get(ch, kind)
            if tid is None:
                if vocab.unk_id is None:
                    raise ValueError(f"character {ch!r} not in vocabulary and no unknown token")
                tid = vocab.unk_id
                unknown += 1
            ids.append(tid)
    length = len(ids)
    if max_length is not None:
        if length > max_length:
            raise ValueError(f"encoded length {length} exceeds maximum {max_length}")
        ids = ids + [vocab.pad_id] * (max_length - length)
    return TokenSequence(ids=ids, length=length, max_length=max_length, unknown=unknown)


def decode(seq: TokenSequence | list[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    out: list[str] = []
    seen_pad = False
    for pos, tid in enumerate(ids):
        if tid == vocab.eos_id:
            break
        if tid == vocab.mask_id:
            raise ValueError(f"mask token at position {pos}")
        if tid == vocab.pad_id:
            seen_pad = True
            continue
        if seen_pad:
            raise ValueError(f"content token after padding at position {pos}")
        if tid == vocab.bos_id and pos == 0:
            continue
        e = vocab.entries[tid]
        if e.kind == WORD_INITIAL:
            if out:
                out.append(" ")
            out.append(e.surface)
        elif e.kind == SPECIAL:
            if tid == vocab.unk_id:
                out.append("�")
            # other specials carry no surface text
        else:
            out.append(e.surface)
    return "".join(out)


_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", " ": "\\s"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


def _escape(s: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in s)


def _unescape(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append(_UNESCAPES[s[i : i + 2]])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)
