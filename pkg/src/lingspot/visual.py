"""Visual side of the spotter: backbone, proposal encoder, point decoder, heads.

Coordinates are pixels throughout. Proposal curves are cubic Béziers stored
as (..., 4, 2) control points; queries live on an (K, N) grid of sampled
points.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .bezier import sample_bezier
from .neural import MLP, EncoderLayer, FeedForward, MultiHeadAttention, sinusoidal_pe


@dataclass
class VisualConfig:
    dim: int = 256
    heads: int = 8
    encoder_layers: int = 6
    decoder_layers: int = 6
    ffn_inner: int | None = 1024
    num_queries: int = 100
    num_points: int = 25
    channels: tuple[int, ...] = (32, 64, 128, 256)
    ctrl_scale: float = 32.0  # pixels per unit of raw control-point regression
    offset_scale: float = 8.0  # pixels per unit of raw point offset
    prior_prob: float = 0.01
    presence_threshold: float = 0.5
    proposal_content: bool = True  # add the selected cell's encoder feature to the content queries


@dataclass
class VisualOutput:
    memory: torch.Tensor  # (B, M, D)
    memory_pos: torch.Tensor
    enc_logits: torch.Tensor  # (B, M)
    enc_ctrl: torch.Tensor  # (B, M, 4, 2)
    selected: torch.Tensor  # (B, K) location indices
    ref_points: torch.Tensor  # (B, K, N, 2)
    hvis: torch.Tensor  # (B, K, N, D)
    presence: torch.Tensor  # (B, K, N) logits
    center: torch.Tensor  # refined (B, K, N, 2)
    top: torch.Tensor
    bottom: torch.Tensor
    extras: dict = field(default_factory=dict)

    @property
    def query_logits(self) -> torch.Tensor:
        """Per-query presence logit: mean over points."""
        return self.presence.mean(-1)


class Backbone(nn.Module):
    """Four conv stages (strides 2, 2, 2, 1) then a 1x1 projection to ``dim``."""

    def __init__(self, channels: tuple[int, ...], dim: int):
        super().__init__()
        strides = (2, 2, 2, 1)
        stages = []
        cin = 3
        for cout, s in zip(channels, strides):
            stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=s, padding=1),
                nn.GroupNorm(min(8, cout), cout),
                nn.ReLU(),
            ))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.proj = nn.Conv2d(cin, dim, 1)
        self.stride = 8

    def forward(self, images):
        return self.proj(self.stages(images - 0.5))


def cell_centres(h: int, w: int, stride: int, dtype=torch.float32) -> torch.Tensor:
    """(h*w, 2) pixel centres of a stride-``stride`` feature grid, row-major."""
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], -1).reshape(-1, 2)


def select_topk(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` highest scores; equal scores keep the lower index first."""
    if k > scores.shape[-1]:
        raise ValueError(f"cannot select {k} proposals from {scores.shape[-1]} locations")
    return torch.argsort(-scores, dim=-1, stable=True)[..., :k]


class ProposalHeads(nn.Module):
    def __init__(self, cfg: VisualConfig):
        super().__init__()
        self.score = nn.Linear(cfg.dim, 1)
        self.ctrl = MLP([cfg.dim, cfg.dim, 8])
        self.scale = cfg.ctrl_scale
        _prior_bias(self.score, cfg.prior_prob)
        _zero_last(self.ctrl)

    def forward(self, memory, anchors):
        logits = self.score(memory).squeeze(-1)
        raw = self.ctrl(memory).unflatten(-1, (4, 2))
        return logits, anchors[..., None, :] + raw * self.scale


class PositionQuery(nn.Module):
    """Sinusoidal point encoding followed by a two-layer MLP."""

    def __init__(self, dim: int, pe_dim: int | None = None):
        super().__init__()
        self.pe_dim = pe_dim or dim
        self.mlp = MLP([self.pe_dim, dim, dim])

    def forward(self, pts):
        return self.mlp(sinusoidal_pe(pts, self.pe_dim, coords=True).to(pts.dtype))


class VisualDecoderLayer(nn.Module):
    """Intra-sequence (over points), inter-sequence (over queries), cross-attention, FFN."""

    def __init__(self, dim: int, heads: int, inner: int | None):
        super().__init__()
        self.intra_attn = MultiHeadAttention(dim, heads)
        self.inter_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, inner)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, x, pos, memory, memory_pos):
        # x, pos: (B, K, N, D)
        q = x + pos
        x = self.norm1(x + self.intra_attn(q, q, x))
        xt, pt = x.transpose(1, 2), pos.transpose(1, 2)
        q = xt + pt
        x = self.norm2(xt + self.inter_attn(q, q, xt)).transpose(1, 2)
        b, k, n, d = x.shape
        q = (x + pos).reshape(b, k * n, d)
        ca = self.cross_attn(q, memory + memory_pos, memory).reshape(b, k, n, d)
        x = self.norm3(x + ca)
        return self.norm4(x + self.ffn(x))


class PointHeads(nn.Module):
    """Presence classifier, centerline offsets and top/bottom boundary offsets."""

    def __init__(self, cfg: VisualConfig):
        super().__init__()
        self.presence = nn.Linear(cfg.dim, 1)
        self.center = MLP([cfg.dim, cfg.dim, 2])
        self.boundary = MLP([cfg.dim, cfg.dim, 4])
        self.scale = cfg.offset_scale
        _prior_bias(self.presence, cfg.prior_prob)
        _zero_last(self.center)
        _zero_last(self.boundary)

    def forward(self, hvis):
        presence = self.presence(hvis).squeeze(-1)
        center_off = self.center(hvis) * self.scale
        bd_off = self.boundary(hvis) * self.scale
        return presence, center_off, bd_off


def refine(ref_points, center_off, bd_off):
    """Refined centre / top / bottom points: reference plus offsets."""
    return ref_points + center_off, ref_points + bd_off[..., :2], ref_points + bd_off[..., 2:]


class VisualPath(nn.Module):
    def __init__(self, cfg: VisualConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.channels, cfg.dim)
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.heads, cfg.ffn_inner) for _ in range(cfg.encoder_layers)
        )
        self.proposals = ProposalHeads(cfg)
        self.position = PositionQuery(cfg.dim)
        self.content = nn.Parameter(torch.randn(cfg.num_points, cfg.dim) * 0.02)
        self.decoder = nn.ModuleList(
            VisualDecoderLayer(cfg.dim, cfg.heads, cfg.ffn_inner) for _ in range(cfg.decoder_layers)
        )
        self.heads = PointHeads(cfg)

    def extract_and_propose(self, images):
        feats = self.backbone(images)
        b, d, h, w = feats.shape
        memory = feats.flatten(2).transpose(1, 2)
        anchors = cell_centres(h, w, self.backbone.stride, memory.dtype).to(memory.device)
        pos = sinusoidal_pe(anchors, d, coords=True).to(memory.dtype).expand(b, -1, -1)
        for layer in self.encoder:
            memory = layer(memory, pos=pos)
        logits, ctrl = self.proposals(memory, anchors)
        selected = select_topk(logits.detach(), self.cfg.num_queries)
        return memory, pos, logits, ctrl, selected

    def visual_decode(self, ref_points, memory, memory_pos, seed=None):
        pos = self.position(ref_points)
        x = self.content.expand_as(pos)
        if seed is not None:
            x = x + seed[..., None, :]
        for layer in self.decoder:
            x = layer(x, pos, memory, memory_pos)
        return x

    def forward(self, images) -> VisualOutput:
        memory, mpos, logits, ctrl, selected = self.extract_and_propose(images)
        chosen = torch.gather(ctrl, 1, selected[..., None, None].expand(-1, -1, 4, 2))
        # reference points do not backpropagate into the proposal regression
        ref = sample_bezier(chosen.detach(), self.cfg.num_points)
        seed = None
        if self.cfg.proposal_content:
            seed = torch.gather(memory, 1, selected[..., None].expand(-1, -1, memory.shape[-1]))
        hvis = self.visual_decode(ref, memory, mpos, seed)
        presence, c_off, b_off = self.heads(hvis)
        center, top, bottom = refine(ref, c_off, b_off)
        return VisualOutput(memory, mpos, logits, ctrl, selected, ref, hvis, presence, center, top, bottom)


class Projection(nn.Module):
    """Two-layer MLP from visual (D_V) to linguistic (D_L) embeddings, applied per point."""

    def __init__(self, dim_v: int, dim_l: int):
        super().__init__()
        self.mlp = MLP([dim_v, dim_l, dim_l])

    def forward(self, hvis):
        return self.mlp(hvis)


def _prior_bias(linear: nn.Linear, prior: float) -> None:
    nn.init.constant_(linear.bias, -float(torch.log(torch.tensor((1 - prior) / prior))))


def _zero_last(mlp: MLP) -> None:
    # regressions start at their anchors, so early matches go to the nearest location
    last = mlp.layers[-1]
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
