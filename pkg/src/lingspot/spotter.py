"""End-to-end spotter: visual path, projection, and a transplanted text decoder."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .bezier import polygon_from_boundaries, sample_bezier
from .checkpoint import Checkpoint, snapshot
from .losses import LossBreakdown, LossWeights, coordinate_losses, focal_loss, l1_mean, text_nll_per_query
from .matching import MatchAssignment, hungarian, match_cost
from .neural import backward
from .plm import PlmConfig, TextDecoder, greedy_decode, shift_right, target_ids
from .render import SceneSample, TextInstance
from .visual import Projection, VisualConfig, VisualOutput, VisualPath
from .vocab import Vocabulary, decode, encode

logger = logging.getLogger(__name__)


@dataclass
class MatchWeights:
    """Matching-cost weights; the point term is per pixel of mean L1 distance."""

    cls: float = 1.0
    points: float = 1.0


@dataclass
class SpotterConfig:
    visual: VisualConfig = field(default_factory=VisualConfig)
    text: PlmConfig = field(default_factory=PlmConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    match: MatchWeights = field(default_factory=MatchWeights)


class Spotter(nn.Module):
    def __init__(self, cfg: SpotterConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualPath(cfg.visual)
        self.projection = Projection(cfg.visual.dim, cfg.text.dim)
        self.text_decoder = TextDecoder(cfg.text)

    @property
    def max_length(self) -> int:
        return self.cfg.text.max_length

    def forward(self, images: torch.Tensor) -> tuple[VisualOutput, torch.Tensor]:
        out = self.visual(images)
        return out, self.projection(out.hvis)


def build_spotter(cfg: SpotterConfig, seed: int = 0) -> Spotter:
    torch.manual_seed(seed)
    return Spotter(cfg)


class TransferError(ValueError):
    pass


def init_from_plm(ckpt: Checkpoint, spotter: Spotter, vocab: Vocabulary) -> Spotter:
    """Copy the PLM decoder (every block and the prediction head) into the spotter.

    Encoder weights in the checkpoint are ignored.
    """
    vhash = ckpt.meta.get("vocab_hash")
    if vhash is not None and vhash != vocab.fingerprint():
        raise TransferError("checkpoint vocabulary does not match the spotter vocabulary")
    own = spotter.text_decoder.state_dict()
    prefix = "decoder."
    src = {k[len(prefix):]: v for k, v in ckpt.params.items() if k.startswith(prefix)}
    problems = []
    for name, tensor in own.items():
        if name not in src:
            problems.append(f"{prefix}{name} (missing)")
        elif tuple(src[name].shape) != tuple(tensor.shape):
            problems.append(f"{prefix}{name} {tuple(src[name].shape)} vs {tuple(tensor.shape)}")
    extra = sorted(set(src) - set(own))
    problems += [f"{prefix}{n} (unexpected)" for n in extra]
    if problems:
        raise TransferError("cannot transfer decoder weights: " + "; ".join(problems))
    with torch.no_grad():
        for name, tensor in own.items():
            tensor.copy_(torch.from_numpy(np.asarray(src[name])).to(tensor.dtype))
    return spotter


# Targets ---------------------------------------------------------------------

@dataclass
class Targets:
    ctrl: torch.Tensor  # (G, 4, 2)
    center: torch.Tensor  # (G, N, 2)
    top: torch.Tensor
    bottom: torch.Tensor
    tokens: torch.Tensor  # (G, T)
    texts: list[str]


def make_targets(instances: list[TextInstance], vocab: Vocabulary, n_points: int, max_length: int,
                 dtype=torch.float32) -> Targets:
    if not instances:
        empty = torch.zeros((0, n_points, 2), dtype=dtype)
        return Targets(torch.zeros((0, 4, 2), dtype=dtype), empty, empty, empty,
                       torch.zeros((0, max_length), dtype=torch.long), [])
    ctrl = torch.tensor(np.stack([i.center for i in instances]), dtype=dtype)
    top = torch.tensor(np.stack([i.top for i in instances]), dtype=dtype)
    bottom = torch.tensor(np.stack([i.bottom for i in instances]), dtype=dtype)
    tokens = torch.tensor([target_ids(encode(i.transcription, vocab), vocab, max_length) for i in instances])
    return Targets(ctrl, sample_bezier(ctrl, n_points), sample_bezier(top, n_points),
                   sample_bezier(bottom, n_points), tokens, [i.transcription for i in instances])


def images_tensor(samples: list[SceneSample], dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(np.stack([s.image for s in samples]), dtype=dtype).permute(0, 3, 1, 2)


# Losses ----------------------------------------------------------------------

@dataclass
class StepOutput:
    loss: LossBreakdown
    per_image: list[LossBreakdown]
    enc_matches: list[MatchAssignment]
    dec_matches: list[MatchAssignment]
    text_logits: torch.Tensor | None


def compute_losses(model: Spotter, out: VisualOutput, zvl: torch.Tensor, targets: list[Targets],
                   vocab: Vocabulary, weights: LossWeights | None = None) -> StepOutput:
    """Independent matching per stage, then the per-image composite objective."""
    w = weights or model.cfg.weights
    mw = model.cfg.match
    n_pts = model.cfg.visual.num_points
    enc_matches, dec_matches = [], []
    comps: list[dict[str, torch.Tensor]] = []
    text_rows, text_mem = [], []
    for b, tgt in enumerate(targets):
        enc_pts = sample_bezier(out.enc_ctrl[b], n_pts)
        enc_labels = torch.zeros_like(out.enc_logits[b])
        dec_labels = torch.zeros_like(out.presence[b])
        if len(tgt.texts):
            em = hungarian(match_cost(out.enc_logits[b], enc_pts, tgt.center, mw.cls, mw.points).double())
            dm = hungarian(match_cost(out.query_logits[b], out.center[b], tgt.center, mw.cls, mw.points).double())
        else:
            em = dm = MatchAssignment([], 0.0)
        enc_matches.append(em)
        dec_matches.append(dm)
        enc_labels[em.rows] = 1.0
        dec_labels[dm.rows] = 1.0
        l_coord, l_bd = coordinate_losses(out.center[b][dm.rows], out.top[b][dm.rows], out.bottom[b][dm.rows],
                                          tgt.center[dm.cols], tgt.top[dm.cols], tgt.bottom[dm.cols])
        comps.append({
            "enc_cls": focal_loss(out.enc_logits[b], enc_labels),
            "enc_coord": l1_mean(out.enc_ctrl[b][em.rows], tgt.ctrl[em.cols]),
            "dec_cls": focal_loss(out.presence[b], dec_labels),
            "dec_coord": l_coord,
            "dec_bd": l_bd,
        })
        for r, c in dm.pairs:
            text_rows.append((b, tgt.tokens[c]))
            text_mem.append(zvl[b, r])

    text_logits = None
    per_image_text = [zvl.sum() * 0.0 for _ in targets]
    if text_rows:
        memory = torch.stack(text_mem)
        tokens = torch.stack([t for _, t in text_rows])
        width = int((tokens != vocab.pad_id).sum(-1).max())
        nll, text_logits = text_nll_per_query(model.text_decoder, memory, tokens[:, :width],
                                              vocab.bos_id, vocab.pad_id)
        for i, (b, _) in enumerate(text_rows):
            per_image_text[b] = per_image_text[b] + nll[i]
    per_image = []
    for c, t in zip(comps, per_image_text):
        c["text"] = t
        per_image.append(LossBreakdown.combine(c, w))
    return StepOutput(LossBreakdown.mean(per_image), per_image, enc_matches, dec_matches, text_logits)


# Training --------------------------------------------------------------------

@dataclass
class TrainSchedule:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-4
    lr_drops: tuple[int, ...] = ()  # steps at which lr is divided by 10
    visual_warmup: int = 0  # leading steps with the text loss switched off
    weight_decay: float = 1e-4
    grad_clip: float | None = 1.0
    seed: int = 0
    log_every: int = 10


def lr_at(step: int, sched: TrainSchedule) -> float:
    return sched.lr * 0.1 ** sum(step >= d for d in sched.lr_drops)


def batch_order(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[b * batch_size : (b + 1) * batch_size]


def train(
    samples: list[SceneSample],
    model: Spotter,
    vocab: Vocabulary,
    schedule: TrainSchedule,
    log: Callable[[dict], None] | None = None,
    start_step: int = 0,
) -> tuple[Checkpoint, list[dict]]:
    n_pts, T = model.cfg.visual.num_points, model.max_length
    images = images_tensor(samples)
    targets = [make_targets(s.instances, vocab, n_pts, T) for s in samples]
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    text_off = LossWeights(**{**asdict(model.cfg.weights), "text": 0.0})
    metrics: list[dict] = []
    model.train()
    for step in range(schedule.steps):
        idx = batch_order(len(samples), schedule.batch_size, schedule.seed, step)
        for g in opt.param_groups:
            g["lr"] = lr_at(step, schedule)
        out, zvl = model(images[idx])
        weights = text_off if step < schedule.visual_warmup else None
        res = compute_losses(model, out, zvl, [targets[i] for i in idx], vocab, weights)
        if not torch.isfinite(res.loss.total):
            raise FloatingPointError(f"non-finite loss at step {start_step + step}, samples {idx.tolist()}")
        opt.zero_grad(set_to_none=True)
        backward(res.loss.total, model)
        if schedule.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
        opt.step()
        rec = {"step": start_step + step + 1, "lr": lr_at(step, schedule), **res.loss.as_floats()}
        metrics.append(rec)
        if log is not None and (step + 1) % schedule.log_every == 0:
            log(rec)
    model.eval()
    return snapshot(model, spotter_meta(model, vocab, start_step + schedule.steps)), metrics


def spotter_meta(model: Spotter, vocab: Vocabulary, steps: int) -> dict:
    v, t = model.cfg.visual, model.cfg.text
    return {"kind": "spotter", "vocab_hash": vocab.fingerprint(), "K": v.num_queries, "N": v.num_points,
            "D_V": v.dim, "D_L": t.dim, "T": t.max_length, "weights": asdict(model.cfg.weights),
            "match": asdict(model.cfg.match),
            "visual": asdict(v), "text": asdict(t), "steps": steps}


# Inference -------------------------------------------------------------------

@dataclass
class Detection:
    polygon: np.ndarray  # (2N, 2)
    center: np.ndarray  # (N, 2)
    ctrl: np.ndarray  # (4, 2) proposal curve
    transcription: str
    score: float
    tokens: list[int]

    def to_dict(self) -> dict:
        return {"polygon": self.polygon.tolist(), "center": self.center.tolist(),
                "ctrl": self.ctrl.reshape(-1).tolist(), "transcription": self.transcription,
                "score": self.score}


@dataclass
class SpottingResult:
    detections: list[Detection]


def decode_generated(ids: list[int], vocab: Vocabulary) -> str:
    """Text of a generated sequence; stray control tokens from an undertrained decoder are dropped."""
    control = {vocab.pad_id, vocab.bos_id, vocab.mask_id}
    return decode([t for t in ids if t not in control], vocab)


@torch.no_grad()
def spot(model: Spotter, images: torch.Tensor, vocab: Vocabulary, threshold: float | None = None,
         lexicon=None) -> list[SpottingResult]:
    """Keep queries whose mean point-presence probability exceeds ``threshold``,
    then decode each kept query from its own projected feature slice."""
    model.eval()
    thr = model.cfg.visual.presence_threshold if threshold is None else threshold
    out, zvl = model(images)
    scores = out.presence.sigmoid().mean(-1)
    results = []
    for b in range(images.shape[0]):
        keep = torch.nonzero(scores[b] > thr).flatten().tolist()
        dets = []
        if keep:
            seqs = greedy_decode(model.text_decoder, zvl[b, keep], model.max_length, vocab.bos_id, vocab.eos_id)
            chosen = out.enc_ctrl[b][out.selected[b]]
            for k, ids in zip(keep, seqs):
                text = decode_generated(ids, vocab)
                if lexicon is not None:
                    text = lexicon.correct(text)
                    if text is None:
                        continue
                poly = polygon_from_boundaries(out.top[b, k], out.bottom[b, k])
                dets.append(Detection(poly.numpy().astype(np.float64), out.center[b, k].numpy().astype(np.float64),
                                      chosen[k].numpy().astype(np.float64), text, float(scores[b, k]), ids))
        results.append(SpottingResult(dets))
    return results


def infer(samples_or_images, model: Spotter, vocab: Vocabulary, lexicon=None, batch_size: int = 16,
          threshold: float | None = None) -> list[SpottingResult]:
    if isinstance(samples_or_images, torch.Tensor):
        images = samples_or_images
    else:
        items = list(samples_or_images)
        if not items:
            return []
        images = images_tensor(items) if isinstance(items[0], SceneSample) else torch.stack(items)
    results = []
    for start in range(0, images.shape[0], batch_size):
        results += spot(model, images[start : start + batch_size], vocab, threshold, lexicon)
    return results


def teacher_forced_logits(model: Spotter, zvl_slice: torch.Tensor, tokens: torch.Tensor, vocab: Vocabulary):
    """Logits for one or more queries given target tokens (training-mode decoder call)."""
    return model.text_decoder(shift_right(tokens, vocab.bos_id), zvl_slice)


def spotter_from_checkpoint(ckpt: Checkpoint) -> Spotter:
    meta = ckpt.meta
    if meta.get("kind") != "spotter":
        raise ValueError("checkpoint does not hold a spotter")
    visual = dict(meta["visual"])
    visual["channels"] = tuple(visual["channels"])
    cfg = SpotterConfig(VisualConfig(**visual), PlmConfig(**meta["text"]), LossWeights(**meta["weights"]),
                        MatchWeights(**meta.get("match", {})))
    model = Spotter(cfg)
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model
