"""Pretraining corpus assembly: windowing, coverage filtering, deduplication."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vocab import Vocabulary, encode

logger = logging.getLogger(__name__)

SOURCE_TAGS = ("scene-text", "nlp-text", "poi")


@dataclass(frozen=True)
class CorpusEntry:
    text: str
    source: str


@dataclass(frozen=True)
class SourceFile:
    path: Path
    tag: str


def window_words(words: list[str], size: int = 3, overlapping: bool = False) -> list[list[str]]:
    if len(words) <= size:
        return [words] if words else []
    if overlapping:
        return [words[i : i + size] for i in range(len(words) - size + 1)]
    return [words[i : i + size] for i in range(0, len(words), size)]


def build_corpus(
    sources: list[SourceFile],
    vocab: Vocabulary,
    window: int = 3,
    overlapping: bool = False,
    max_unknown_ratio: float = 0.0,
    exclude: set[str] | None = None,
    max_tokens: int | None = None,
) -> list[CorpusEntry]:
    """Read tagged sources into a deduplicated list of 1-``window`` word entries.

    Lines longer than ``window`` words are cut into windows. Entries whose
    unknown-character ratio exceeds ``max_unknown_ratio`` are dropped, as are
    entries in ``exclude`` (held-out evaluation text).
    """
    if not sources:
        raise ValueError("no corpus sources given")
    exclude = exclude or set()
    seen: set[str] = set()
    entries: list[CorpusEntry] = []
    dropped = 0
    for src in sources:
        if src.tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source tag {src.tag!r} for {src.path}")
        try:
            lines = Path(src.path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise OSError(f"cannot read corpus source {src.path}: {exc}") from exc
        for line in lines:
            for chunk in window_words(line.split(), window, overlapping):
                text = " ".join(chunk)
                if text in seen or text in exclude:
                    continue
                seq = encode(text, vocab)
                if seq.length == 0 or seq.unknown / seq.length > max_unknown_ratio:
                    dropped += 1
                    continue
                if max_tokens is not None and seq.length > max_tokens:
                    dropped += 1
                    continue
                seen.add(text)
                entries.append(CorpusEntry(text, src.tag))
    if dropped:
        logger.info("dropped %d corpus entries on coverage/length", dropped)
    if not entries:
        raise ValueError("corpus is empty after filtering")
    return entries


def write_corpus(entries: list[CorpusEntry], path: str | Path) -> None:
    Path(path).write_text("".join(f"{e.source}\t{e.text}\n" for e in entries), encoding="utf-8")


def read_corpus(path: str | Path) -> list[CorpusEntry]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            tag, text = line.split("\t", 1)
            out.append(CorpusEntry(text, tag))
    return out


# Synthetic desk sources ---------------------------------------------------

_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "z", "br", "ch", "cl", "dr", "fl", "gr", "pl", "sh", "st", "tr", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "oo", "ou"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck"]


def pseudo_word(rng: np.random.Generator, min_len: int = 3, max_len: int = 10) -> str:
    while True:
        n_syl = int(rng.integers(1, 4))
        w = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(n_syl)
        )
        if min_len <= len(w) <= max_len:
            return w


def pseudo_lexicon(n: int, seed: int = 0, min_len: int = 3, max_len: int = 10) -> list[str]:
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        w = pseudo_word(rng, min_len, max_len)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _styled(word: str, rng: np.random.Generator) -> str:
    r = rng.random()
    if r < 0.4:
        return word.upper()
    if r < 0.8:
        return word.capitalize()
    return word


def write_desk_sources(
    out_dir: str | Path,
    seed: int = 0,
    n_scene: int = 250,
    n_sentences: int = 40,
    n_poi: int = 130,
    lexicon_size: int = 300,
) -> list[SourceFile]:
    """Write three synthetic source files standing in for scene text, NLP text and POIs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lex = pseudo_lexicon(lexicon_size, seed=seed)

    scene = []
    for i in range(n_scene):
        w = _styled(lex[i % len(lex)], rng)
        if rng.random() < 0.1:
            w = w + str(int(rng.integers(1, 100)))
        scene.append(w)

    sentences = []
    for _ in range(n_sentences):
        n = int(rng.integers(6, 13))
        sentences.append(" ".join(rng.choice(lex[:150], size=n)))

    poi = []
    for _ in range(n_poi):
        n = int(rng.integers(2, 4))
        words = [w.capitalize() for w in rng.choice(lex, size=n, replace=False)]
        if rng.random() < 0.2:
            words[-1] = str(int(rng.integers(1, 300)))
        poi.append(" ".join(words))

    files = {
        "scene-text": out_dir / "scene_text.txt",
        "nlp-text": out_dir / "nlp_text.txt",
        "poi": out_dir / "poi.txt",
    }
    files["scene-text"].write_text("\n".join(scene) + "\n", encoding="utf-8")
    files["nlp-text"].write_text("\n".join(sentences) + "\n", encoding="utf-8")
    files["poi"].write_text("\n".join(poi) + "\n", encoding="utf-8")
    return [SourceFile(path, tag) for tag, path in files.items()]
