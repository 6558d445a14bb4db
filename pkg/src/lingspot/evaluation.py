"""Scoring: edit distance, lexicon correction, detection matching and report tables."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import Polygon
from shapely.validation import make_valid

logger = logging.getLogger(__name__)

LENGTH_BINS = ("<3", "3-5", "6-10", "11+")
LEXICON_MODES = ("absolute", "normalized", "none")


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance (unit-cost insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class Lexicon:
    entries: list[str]
    mode: str = "absolute"
    max_distance: int = 2
    max_ratio: float = 0.3

    def __post_init__(self):
        if self.mode not in LEXICON_MODES:
            raise ValueError(f"unknown lexicon mode {self.mode!r}")
        self.entries = list(dict.fromkeys(self.entries))
        if self.mode != "none" and not self.entries:
            raise ValueError("lexicon needs at least one entry")

    @classmethod
    def from_file(cls, path: str | Path, mode: str = "absolute") -> "Lexicon":
        words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls([w for w in words if w], mode)

    def correct(self, pred: str) -> str | None:
        return lexicon_correct(pred, self)


def nearest(pred: str, entries: Iterable[str]) -> tuple[str, int]:
    """Closest entry by edit distance; ties go to the lexicographically smallest."""
    best = min(((edit_distance(pred, e), e) for e in entries), default=None)
    if best is None:
        raise ValueError("no entries to search")
    return best[1], best[0]


def lexicon_correct(pred: str, lex: Lexicon) -> str | None:
    """Replace ``pred`` by its nearest lexicon word, or return None to reject it."""
    if lex.mode == "none":
        return pred or None
    if not pred:
        return None
    word, dist = nearest(pred, lex.entries)
    if lex.mode == "absolute":
        ok = dist <= lex.max_distance
    else:
        ok = dist / max(len(pred), len(word)) <= lex.max_ratio + 1e-12
    return word if ok else None


# Matching --------------------------------------------------------------------

@dataclass
class Instance:
    polygon: np.ndarray  # (P, 2)
    text: str
    score: float = 1.0


def to_polygon(points) -> Polygon | None:
    """Shapely polygon for a vertex list; None when it has no area."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3 or not np.isfinite(pts).all():
        return None
    poly = Polygon(pts)
    if not poly.is_valid:
        poly = make_valid(poly)
    return poly if poly.area > 0 else None


def polygon_iou(a, b) -> float:
    pa = a if isinstance(a, Polygon) or a is None else to_polygon(a)
    pb = b if isinstance(b, Polygon) or b is None else to_polygon(b)
    if pa is None or pb is None:
        return 0.0
    union = pa.union(pb).area
    return pa.intersection(pb).area / union if union > 0 else 0.0


@dataclass
class ImagePairing:
    pairs: list[tuple[int, int, float]]  # (prediction, ground truth, IoU)
    correct: list[bool]  # per pair: transcription matches
    gt_texts: list[str]
    pred_texts: list[str]  # after lexicon correction, rejected ones removed
    degenerate: int = 0

    @property
    def n_pred(self) -> int:
        return len(self.pred_texts)

    @property
    def n_gt(self) -> int:
        return len(self.gt_texts)

    def gt_status(self) -> dict[int, bool]:
        """Ground-truth index -> transcription correct, for detected instances."""
        return {g: ok for (_, g, _), ok in zip(self.pairs, self.correct)}


def match_detections(
    predictions: Sequence[Instance],
    ground_truth: Sequence[Instance],
    iou_threshold: float = 0.5,
    lexicon: Lexicon | None = None,
    case_sensitive: bool = True,
) -> ImagePairing:
    """Greedy one-to-one pairing by descending IoU at or above the threshold."""
    kept: list[tuple[Polygon, str]] = []
    degenerate = 0
    for p in predictions:
        text = p.text if lexicon is None else lexicon_correct(p.text, lexicon)
        if text is None:
            continue
        poly = to_polygon(p.polygon)
        if poly is None:
            degenerate += 1
            continue
        kept.append((poly, text))
    gts = []
    for g in ground_truth:
        poly = to_polygon(g.polygon)
        if poly is None:
            degenerate += 1
        gts.append((poly, g.text))
    if degenerate:
        logger.warning("skipped %d degenerate polygon(s)", degenerate)

    cands = []
    for i, (pp, _) in enumerate(kept):
        for j, (gp, _) in enumerate(gts):
            if gp is None:
                continue
            iou = polygon_iou(pp, gp)
            if iou >= iou_threshold:
                cands.append((-iou, i, j))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for neg, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg))
    norm = (lambda s: s) if case_sensitive else str.lower
    correct = [norm(kept[i][1]) == norm(gts[j][1]) for i, j, _ in pairs]
    return ImagePairing(pairs, correct, [t for _, t in gts], [t for _, t in kept], degenerate)


# Reports ---------------------------------------------------------------------

def hmean(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def length_bin(word: str) -> str:
    n = len(word)
    if n < 3:
        return "<3"
    if n <= 5:
        return "3-5"
    if n <= 10:
        return "6-10"
    return "11+"


@dataclass
class Bucket:
    count: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0

    def add(self, ok: bool) -> None:
        self.count += 1
        self.correct += int(ok)


@dataclass
class EvalReport:
    precision: float
    recall: float
    hmean: float
    det_precision: float
    det_recall: float
    det_hmean: float
    n_pred: int
    n_gt: int
    true_positives: int
    detected: int
    length_bins: dict[str, Bucket]
    vocab: dict[str, Bucket]
    degenerate: int = 0
    empty: bool = False
    comparison: dict | None = None

    @property
    def word_accuracy(self) -> float:
        """Exact-match end-to-end accuracy over ground-truth words."""
        return self.recall

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("length_bins", "vocab"):
            d[key] = {k: {**v, "accuracy": getattr(self, key)[k].accuracy} for k, v in d[key].items()}
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def render(self) -> str:
        lines = [
            f"end-to-end   P {self.precision:.4f}  R {self.recall:.4f}  H {self.hmean:.4f}",
            f"detection    P {self.det_precision:.4f}  R {self.det_recall:.4f}  H {self.det_hmean:.4f}",
            f"predictions {self.n_pred}  ground truth {self.n_gt}  correct {self.true_positives}",
            "",
            f"{'length':<10}{'count':>7}{'acc':>9}",
        ]
        lines += [f"{k:<10}{b.count:>7}{b.accuracy:>9.4f}" for k, b in self.length_bins.items()]
        if self.vocab:
            lines += ["", f"{'vocab':<10}{'count':>7}{'acc':>9}"]
            lines += [f"{k:<10}{b.count:>7}{b.accuracy:>9.4f}" for k, b in self.vocab.items()]
        if self.comparison:
            c = self.comparison
            lines += ["", f"both detected: {c['intersection']}",
                      f"accuracy on intersection: {c['accuracy_a']:.4f} vs {c['accuracy_b']:.4f}"]
        if self.empty:
            lines.append("(no predictions and no ground truth)")
        return "\n".join(lines)


def _tables(items: Iterable[tuple[str, bool]], train_words: set[str] | None, case_sensitive: bool):
    bins = {k: Bucket() for k in LENGTH_BINS}
    vocab = {"in-vocab": Bucket(), "oov": Bucket()} if train_words is not None else {}
    norm = (lambda s: s) if case_sensitive else str.lower
    words = None if train_words is None else {norm(w) for w in train_words}
    for text, ok in items:
        bins[length_bin(text)].add(ok)
        if words is not None:
            vocab["in-vocab" if norm(text) in words else "oov"].add(ok)
    return bins, vocab


def analyze(
    pairings: Sequence[ImagePairing],
    train_words: Iterable[str] | None = None,
    case_sensitive: bool = True,
    other: Sequence[ImagePairing] | None = None,
) -> EvalReport:
    """Aggregate per-image pairings into an EvalReport.

    Length and vocabulary buckets cover detected ground-truth words. With
    ``other`` (a second model on the same images) they are restricted to
    words both models detect, and the second model's tables are attached
    under ``comparison``.
    """
    words = set(train_words) if train_words is not None else None
    n_pred = sum(p.n_pred for p in pairings)
    n_gt = sum(p.n_gt for p in pairings)
    tp = sum(sum(p.correct) for p in pairings)
    det = sum(len(p.pairs) for p in pairings)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gt if n_gt else 0.0
    dprec = det / n_pred if n_pred else 0.0
    drec = det / n_gt if n_gt else 0.0

    comparison = None
    if other is None:
        items = [(p.gt_texts[g], ok) for p in pairings for g, ok in p.gt_status().items()]
    else:
        if len(other) != len(pairings):
            raise ValueError("comparison needs pairings for the same images")
        items, items_b = [], []
        for pa, pb in zip(pairings, other):
            sa, sb = pa.gt_status(), pb.gt_status()
            for g in sorted(set(sa) & set(sb)):
                items.append((pa.gt_texts[g], sa[g]))
                items_b.append((pa.gt_texts[g], sb[g]))
        bins_b, vocab_b = _tables(items_b, words, case_sensitive)
        n = len(items)
        comparison = {
            "intersection": n,
            "accuracy_a": sum(ok for _, ok in items) / n if n else 0.0,
            "accuracy_b": sum(ok for _, ok in items_b) / n if n else 0.0,
            "length_bins_b": {k: {**asdict(b), "accuracy": b.accuracy} for k, b in bins_b.items()},
            "vocab_b": {k: {**asdict(b), "accuracy": b.accuracy} for k, b in vocab_b.items()},
        }
    bins, vocab = _tables(items, words, case_sensitive)
    return EvalReport(prec, rec, hmean(prec, rec), dprec, drec, hmean(dprec, drec), n_pred, n_gt, tp, det,
                      bins, vocab, sum(p.degenerate for p in pairings), empty=(n_pred == 0 and n_gt == 0),
                      comparison=comparison)


def evaluate(
    predictions: Sequence[Sequence[Instance]],
    ground_truth: Sequence[Sequence[Instance]],
    lexicon: Lexicon | None = None,
    train_words: Iterable[str] | None = None,
    iou_threshold: float = 0.5,
    case_sensitive: bool = True,
) -> EvalReport:
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different numbers of images")
    pairings = [match_detections(p, g, iou_threshold, lexicon, case_sensitive) for p, g in zip(predictions, ground_truth)]
    return analyze(pairings, train_words, case_sensitive)


# Prediction files ------------------------------------------------------------

@dataclass
class PredictionRecord:
    image: str
    polygon: list[list[float]]
    transcription: str
    score: float
    extra: dict = field(default_factory=dict)


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_predictions(path: str | Path) -> dict[str, list[Instance]]:
    out: dict[str, list[Instance]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out.setdefault(r["image"], []).append(Instance(np.asarray(r["polygon"]), r["transcription"], r["score"]))
    return out
