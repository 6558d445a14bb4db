"""Loss components and the three-stage composite objective."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .matching import FOCAL_ALPHA, FOCAL_GAMMA
from .plm import TextDecoder, shift_right


@dataclass
class LossWeights:
    enc_cls: float = 1.0
    enc_coord: float = 1.0
    dec_cls: float = 1.0
    dec_coord: float = 1.0
    dec_bd: float = 1.0
    text: float = 6.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    @classmethod
    def long_text(cls) -> "LossWeights":
        """Profile for long multi-word instances."""
        return cls(text=15.0)


@dataclass
class LossBreakdown:
    enc_cls: torch.Tensor
    enc_coord: torch.Tensor
    dec_cls: torch.Tensor
    dec_coord: torch.Tensor
    dec_bd: torch.Tensor
    text: torch.Tensor  # sum over matched queries of per-query token NLL
    vis_enc: torch.Tensor
    vis_dec: torch.Tensor
    lang_dec: torch.Tensor
    total: torch.Tensor

    @classmethod
    def combine(cls, comps: dict[str, torch.Tensor], w: LossWeights) -> "LossBreakdown":
        vis_enc = w.enc_cls * comps["enc_cls"] + w.enc_coord * comps["enc_coord"]
        vis_dec = w.dec_cls * comps["dec_cls"] + w.dec_coord * comps["dec_coord"] + w.dec_bd * comps["dec_bd"]
        lang_dec = w.text * comps["text"]
        return cls(**comps, vis_enc=vis_enc, vis_dec=vis_dec, lang_dec=lang_dec,
                   total=vis_enc + vis_dec + lang_dec)

    @classmethod
    def mean(cls, parts: list["LossBreakdown"]) -> "LossBreakdown":
        vals = {f.name: torch.stack([getattr(p, f.name) for p in parts]).mean()
                for f in fields(cls) if f.name != "total"}
        vals["total"] = vals["vis_enc"] + vals["vis_dec"] + vals["lang_dec"]
        return cls(**vals)

    def as_floats(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


def focal_loss(logits, labels, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Sigmoid focal loss, averaged over all elements."""
    labels = labels.to(logits.dtype)
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    p_t = p * labels + (1 - p) * (1 - labels)
    a_t = alpha * labels + (1 - alpha) * (1 - labels)
    return (a_t * (1 - p_t) ** gamma * ce).mean()


def l1_mean(pred, target):
    """Mean absolute error; zero when there is nothing to compare."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return (pred - target).abs().mean()


def coordinate_losses(center, top, bottom, gt_center, gt_top, gt_bottom):
    """(L_coord, L_bd) over matched point sets, in pixels.

    All arguments are (P, N, 2) for the P matched pairs; L_bd averages over
    both boundaries.
    """
    l_coord = l1_mean(center, gt_center)
    l_bd = l1_mean(torch.cat([top, bottom], -2), torch.cat([gt_top, gt_bottom], -2))
    return l_coord, l_bd


def text_nll_per_query(decoder: TextDecoder, memory, targets, bos_id: int, pad_id: int):
    """Summed token NLL for each row of ``targets`` given its memory slice.

    ``memory`` is (P, N, D_L), ``targets`` is (P, T) with </s> and padding.
    """
    logits = decoder(shift_right(targets, bos_id), memory)
    logp = F.log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(logp * (targets != pad_id)).sum(-1), logits


def language_loss(decoder: TextDecoder, zvl, query_idx, targets, weight: float, bos_id: int, pad_id: int):
    """Sum over matched queries of ``weight`` times the per-query text NLL.

    ``zvl`` is (K, N, D_L) for one image; ``query_idx`` selects the matched
    queries and ``targets`` holds their token targets in the same order.
    Returns (weighted loss, unweighted sum, logits).
    """
    if len(query_idx) == 0:
        zero = zvl.sum() * 0.0
        return zero, zero, None
    per_query, logits = text_nll_per_query(decoder, zvl[query_idx], targets, bos_id, pad_id)
    raw = per_query.sum()
    return weight * raw, raw, logits
