"""Character-level denoising encoder-decoder language model."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, snapshot
from .corpus import CorpusEntry
from .infill import CorruptedPair, infill_corrupt
from .neural import DecoderLayer, EncoderLayer, backward, causal_mask, sinusoidal_pe
from .vocab import TokenSequence, Vocabulary, encode

logger = logging.getLogger(__name__)


@dataclass
class PlmConfig:
    vocab_size: int = 194
    dim: int = 768
    heads: int = 12
    encoder_layers: int = 6
    decoder_layers: int = 6
    ffn_inner: int | None = None  # defaults to 4 * dim
    max_length: int = 32


class TextEncoder(nn.Module):
    def __init__(self, cfg: PlmConfig):
        super().__init__()
        self.dim = cfg.dim
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.heads, cfg.ffn_inner) for _ in range(cfg.encoder_layers)
        )

    def forward(self, ids: torch.Tensor, padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        pos = torch.arange(ids.shape[-1], device=ids.device)
        x = self.embed(ids) + sinusoidal_pe(pos, self.dim).to(self.embed.weight.dtype)
        for layer in self.layers:
            x = layer(x, key_padding_mask=padding_mask)
        return x


class TextDecoder(nn.Module):
    """Left-to-right decoder with a linear prediction head.

    The cross-attention memory is whatever the caller passes: encoder states
    during pretraining, projected visual features inside the spotter.
    """

    def __init__(self, cfg: PlmConfig):
        super().__init__()
        self.dim = cfg.dim
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.dim, cfg.heads, cfg.ffn_inner) for _ in range(cfg.decoder_layers)
        )
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)

    def forward(self, tgt_in, memory, memory_padding_mask=None):
        t = tgt_in.shape[-1]
        pos = torch.arange(t, device=tgt_in.device)
        dtype = self.embed.weight.dtype
        x = self.embed(tgt_in) + sinusoidal_pe(pos, self.dim).to(dtype)
        mask = causal_mask(t, dtype=dtype, device=tgt_in.device)
        for layer in self.layers:
            x = layer(x, memory, self_mask=mask, memory_padding_mask=memory_padding_mask)
        return self.head(x)


class CharPLM(nn.Module):
    def __init__(self, cfg: PlmConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TextEncoder(cfg)
        self.decoder = TextDecoder(cfg)

    def encode(self, src_ids, padding_mask=None):
        return self.encoder(src_ids, padding_mask)

    def forward(self, src_ids, tgt_in, src_padding_mask=None):
        if src_ids.shape[-1] > self.cfg.max_length or tgt_in.shape[-1] > self.cfg.max_length:
            raise ValueError(f"sequence longer than maximum length {self.cfg.max_length}")
        memory = self.encoder(src_ids, src_padding_mask)
        return self.decoder(tgt_in, memory, memory_padding_mask=src_padding_mask)


def build_plm(cfg: PlmConfig, seed: int = 0) -> CharPLM:
    torch.manual_seed(seed)
    return CharPLM(cfg)


# Sequences -----------------------------------------------------------------

def target_ids(seq: TokenSequence | list[int], vocab: Vocabulary, max_length: int) -> list[int]:
    """Content tokens + end-of-sequence, padded to ``max_length``."""
    content = seq.content() if isinstance(seq, TokenSequence) else list(seq)
    if len(content) + 1 > max_length:
        raise ValueError(f"sequence of {len(content)} tokens does not fit maximum length {max_length}")
    ids = content + [vocab.eos_id]
    return ids + [vocab.pad_id] * (max_length - len(ids))


def shift_right(targets: torch.Tensor, bos_id: int) -> torch.Tensor:
    """(<s>, y_1, ..., y_{T-1})."""
    out = torch.empty_like(targets)
    out[..., 0] = bos_id
    out[..., 1:] = targets[..., :-1]
    return out


@dataclass
class NLL:
    total: torch.Tensor
    mean: torch.Tensor
    count: int


def plm_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int) -> NLL:
    """Token-level negative log-likelihood over non-pad target positions."""
    logp = F.log_softmax(logits, -1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    keep = targets != pad_id
    total = -(picked * keep).sum()
    count = int(keep.sum())
    return NLL(total, total / max(count, 1), count)


@torch.no_grad()
def greedy_decode(
    decoder: TextDecoder,
    memory: torch.Tensor,
    max_length: int,
    bos_id: int,
    eos_id: int,
    memory_padding_mask: torch.Tensor | None = None,
) -> list[list[int]]:
    """Argmax decoding from <s> until </s> or ``max_length`` tokens.

    ``memory`` is (B, M, D) or (M, D). Ties go to the lowest token id.
    Returns the generated content ids per item, without <s>/</s>.
    """
    squeeze = memory.dim() == 2
    if squeeze:
        memory = memory[None]
        if memory_padding_mask is not None:
            memory_padding_mask = memory_padding_mask[None]
    b = memory.shape[0]
    ids = torch.full((b, 1), bos_id, dtype=torch.long, device=memory.device)
    done = torch.zeros(b, dtype=torch.bool, device=memory.device)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_length):
        logits = decoder(ids, memory, memory_padding_mask)[:, -1]
        nxt = logits.argmax(-1)  # first maximal index on ties
        for i in range(b):
            if done[i]:
                continue
            tok = int(nxt[i])
            if tok == eos_id:
                done[i] = True
            else:
                out[i].append(tok)
        if done.all():
            break
        ids = torch.cat([ids, nxt[:, None]], 1)
    return out


# Pretraining -----------------------------------------------------------------

@dataclass
class PretrainSchedule:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-4
    warmup: float = 0.01  # fraction of total steps
    decay: str = "none"  # after warmup: "none" or "cosine"
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    seed: int = 0
    log_every: int = 1
    mask_ratio: tuple[float, float] = (0.2, 0.4)
    span_p: float = 0.5


@dataclass
class Batch:
    src: torch.Tensor
    src_pad: torch.Tensor
    tgt_in: torch.Tensor
    targets: torch.Tensor
    masked: torch.Tensor  # bool, target positions that were masked in the source
    pairs: list[CorruptedPair]


def corrupt_entry(text: str, vocab: Vocabulary, max_length: int, seed, ratio=(0.2, 0.4), span_p: float = 0.5) -> CorruptedPair:
    y = encode(text, vocab, max_length=max_length)
    return infill_corrupt(y, vocab, ratio=tuple(ratio), seed=seed, span_p=span_p)


def collate(pairs: list[CorruptedPair], vocab: Vocabulary, max_length: int) -> Batch:
    src_len = max(p.corrupted.length for p in pairs)
    tgt_len = max(p.original.length for p in pairs) + 1
    src = torch.full((len(pairs), max(src_len, 1)), vocab.pad_id, dtype=torch.long)
    tgt = torch.full((len(pairs), tgt_len), vocab.pad_id, dtype=torch.long)
    masked = torch.zeros((len(pairs), tgt_len), dtype=torch.bool)
    for i, p in enumerate(pairs):
        c = p.corrupted.content()
        src[i, : len(c)] = torch.tensor(c, dtype=torch.long)
        tgt[i] = torch.tensor(target_ids(p.original, vocab, max_length)[:tgt_len])
        for pos in p.masked_positions:
            masked[i, pos] = True
    return Batch(src, src == vocab.pad_id, shift_right(tgt, vocab.bos_id), tgt, masked, pairs)


def entry_seed(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def masked_accuracy(logits: torch.Tensor, batch: Batch) -> tuple[int, int]:
    pred = logits.argmax(-1)
    hit = (pred == batch.targets) & batch.masked
    return int(hit.sum()), int(batch.masked.sum())


def lr_at(step: int, total: int, sched: PretrainSchedule) -> float:
    warm = max(1, int(math.ceil(sched.warmup * total)))
    if step < warm:
        return sched.lr * (step + 1) / warm
    if sched.decay == "cosine":
        frac = (step - warm) / max(1, total - warm)
        return sched.lr * 0.5 * (1 + math.cos(math.pi * frac))
    if sched.decay != "none":
        raise ValueError(f"unknown lr decay {sched.decay!r}")
    return sched.lr


def pretrain(
    entries: list[CorpusEntry],
    model: CharPLM,
    vocab: Vocabulary,
    schedule: PretrainSchedule,
    log: Callable[[dict], None] | None = None,
    start_step: int = 0,
) -> tuple[Checkpoint, list[dict]]:
    """Teacher-forced denoising training; corruption is resampled every epoch."""
    T = model.cfg.max_length
    texts = [e.text for e in entries]
    n_batches = math.ceil(len(texts) / schedule.batch_size)
    total = schedule.epochs * n_batches
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    metrics: list[dict] = []
    step = 0
    model.train()
    for epoch in range(schedule.epochs):
        order = np.random.default_rng([schedule.seed, epoch]).permutation(len(texts))
        for b in range(n_batches):
            idx = order[b * schedule.batch_size : (b + 1) * schedule.batch_size]
            pairs = [corrupt_entry(texts[i], vocab, T, entry_seed(schedule.seed, epoch, int(i)),
                                   schedule.mask_ratio, schedule.span_p) for i in idx]
            batch = collate(pairs, vocab, T)
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, schedule)
            logits = model(batch.src, batch.tgt_in, batch.src_pad)
            nll = plm_loss(logits, batch.targets, vocab.pad_id)
            if not torch.isfinite(nll.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} batch {b}")
            opt.zero_grad(set_to_none=True)
            backward(nll.mean, model)
            if schedule.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
            opt.step()
            step += 1
            hit, n = masked_accuracy(logits.detach(), batch)
            rec = {"step": start_step + step, "epoch": epoch, "batch": b,
                   "loss": nll.mean.item(), "loss_sum": nll.total.item(),
                   "recon_acc": hit / n if n else float("nan")}
            metrics.append(rec)
            if log is not None and step % schedule.log_every == 0:
                log(rec)
    model.eval()
    meta = plm_meta(model, vocab, start_step + step)
    return snapshot(model, meta), metrics


def plm_meta(model: CharPLM, vocab: Vocabulary, steps: int) -> dict:
    return {"kind": "plm", "vocab_hash": vocab.fingerprint(), "config": asdict(model.cfg),
            "dim": model.cfg.dim, "encoder_layers": model.cfg.encoder_layers,
            "decoder_layers": model.cfg.decoder_layers, "max_length": model.cfg.max_length,
            "steps": steps}


@torch.no_grad()
def reconstruction_accuracy(
    model: CharPLM, texts: list[str], vocab: Vocabulary, seed: int = 1234, batch_size: int = 256
) -> float:
    """Teacher-forced accuracy on masked characters under fresh corruption."""
    model.eval()
    T = model.cfg.max_length
    hits = total = 0
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        pairs = [corrupt_entry(t, vocab, T, entry_seed(seed, 0, start + i)) for i, t in enumerate(chunk)]
        batch = collate(pairs, vocab, T)
        logits = model(batch.src, batch.tgt_in, batch.src_pad)
        h, n = masked_accuracy(logits, batch)
        hits, total = hits + h, total + n
    return hits / total if total else float("nan")


@torch.no_grad()
def reconstruct(model: CharPLM, sources: Iterable[TokenSequence], vocab: Vocabulary) -> list[list[int]]:
    """Greedy reconstruction of (corrupted) sequences."""
    model.eval()
    sources = list(sources)
    width = max(max(s.length for s in sources), 1)
    src = torch.full((len(sources), width), vocab.pad_id, dtype=torch.long)
    for i, s in enumerate(sources):
        src[i, : s.length] = torch.tensor(s.content(), dtype=torch.long)
    pad = src == vocab.pad_id
    memory = model.encode(src, pad)
    return greedy_decode(model.decoder, memory, model.cfg.max_length, vocab.bos_id, vocab.eos_id, pad)


def write_metrics(records: list[dict], path: str | Path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
