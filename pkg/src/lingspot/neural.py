"""Transformer building blocks shared by the language model and the spotter.

Layers use the post-norm arrangement. Attention takes an additive float mask
(0 / -inf, e.g. from :func:`causal_mask`) and/or a boolean key padding mask
(True marks padding).
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def causal_mask(size: int, dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """``M[p, q] = 0`` for ``q <= p`` and ``-inf`` otherwise."""
    if size < 1:
        raise ValueError(f"mask size must be positive, got {size}")
    full = torch.full((size, size), float("-inf"), dtype=dtype, device=device)
    return torch.triu(full, diagonal=1)


def sinusoidal_pe(
    positions: torch.Tensor, dim: int, temperature: float = 10000.0, coords: bool = False
) -> torch.Tensor:
    """Interleaved sin/cos encoding of positions.

    Scalar positions of shape (...,) give (..., dim). With ``coords=True`` the
    input is (..., 2) point coordinates; each coordinate gets ``dim // 2``
    channels and the halves are concatenated (x first).
    """
    if dim % 2:
        raise ValueError(f"encoding dimension must be even, got {dim}")
    positions = torch.as_tensor(positions)
    if not positions.is_floating_point():
        positions = positions.to(torch.get_default_dtype())
    if coords:
        if positions.shape[-1] != 2 or dim % 4:
            raise ValueError("point encoding needs (..., 2) input and dim divisible by 4")
        return torch.cat([sinusoidal_pe(positions[..., 0], dim // 2, temperature),
                          sinusoidal_pe(positions[..., 1], dim // 2, temperature)], -1)
    i = torch.arange(dim // 2, dtype=positions.dtype, device=positions.device)
    freq = temperature ** (-2 * i / dim)
    angle = positions[..., None] * freq
    return torch.stack([angle.sin(), angle.cos()], -1).flatten(-2)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key, value, attn_mask=None, key_padding_mask=None, need_weights=False):
        *lead, lq, d = query.shape
        lk = key.shape[-2]
        hd = d // self.heads

        def split(x, n):
            return x.reshape(*lead, n, self.heads, hd).transpose(-3, -2)

        q = split(self.q_proj(query), lq)
        k = split(self.k_proj(key), lk)
        v = split(self.v_proj(value), lk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if attn_mask is not None:
            if attn_mask.shape[-2:] != (lq, lk):
                raise ValueError(f"mask shape {tuple(attn_mask.shape)} does not match ({lq}, {lk})")
            scores = scores + attn_mask.to(scores.dtype)
        if key_padding_mask is not None:
            pad = key_padding_mask[..., None, None, :]
            scores = scores.masked_fill(pad, float("-inf"))
        if attn_mask is not None or key_padding_mask is not None:
            if torch.isneginf(scores).all(-1).any():
                raise ValueError("attention row has every key masked")
        weights = torch.softmax(scores, -1)
        out = (weights @ v).transpose(-3, -2).reshape(*lead, lq, d)
        out = self.out_proj(out)
        return (out, weights) if need_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, inner: int | None = None):
        super().__init__()
        self.inner = inner or 4 * dim
        self.linear1 = nn.Linear(dim, self.inner)
        self.linear2 = nn.Linear(self.inner, dim)

    def forward(self, x):
        return self.linear2(F.gelu(self.linear1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, inner: int | None = None):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, inner)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, key_padding_mask=None, pos=None):
        q = x if pos is None else x + pos
        x = self.norm1(x + self.self_attn(q, q, x, key_padding_mask=key_padding_mask))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    """Masked self-attention, cross-attention to ``memory``, feed-forward."""

    def __init__(self, dim: int, heads: int, inner: int | None = None):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, inner)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, memory, self_mask=None, self_padding_mask=None, memory_padding_mask=None):
        x = self.norm1(x + self.self_attn(x, x, x, attn_mask=self_mask, key_padding_mask=self_padding_mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory, key_padding_mask=memory_padding_mask))
        return self.norm3(x + self.ffn(x))


class MLP(nn.Module):
    def __init__(self, dims: list[int], activation=nn.ReLU):
        super().__init__()
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(dims) - 2:
                layers.append(activation())
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


def backward(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss``; parameters it does not reach get explicit zero gradients."""
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {}
    for name, p in module.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        grads[name] = p.grad
    return grads


def parameter_store(module: nn.Module) -> dict[str, torch.Tensor]:
    """Dotted-name view of every parameter."""
    return dict(module.named_parameters())
