"""Tri-axial rotary-position transformer over C x T x N x D feature grids.

Each block attends along time, then band, then channel. For a given axis the
two remaining grid axes (and any leading batch axes) are folded into the
batch, so attention only mixes elements that share those coordinates.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .bandsplit import RMSNorm
from .conditioning import FilmGenerator, film_apply, film_params
from .errors import InvalidArgument

# position of each attention axis counted from the end of a ... x C x T x N x D grid
AXES = {"channel": -4, "time": -3, "band": -2}
AXIS_ORDER = ("time", "band", "channel")


def rope_angles(positions, head_dim: int, theta_base: float = 10000.0):
    """Rotation angle for every (position, coordinate pair)."""
    if head_dim % 2:
        raise InvalidArgument(f"rotary encoding needs an even head_dim, got {head_dim}")
    pos = torch.as_tensor(positions, dtype=torch.float64)
    inv_freq = theta_base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    return pos[:, None] * inv_freq[None, :]


def rope_rotate(x, positions, theta_base: float = 10000.0):
    """Rotate coordinate pairs ``(2i, 2i+1)`` of each row by ``pos * theta^(-2i/d)``.

    ``x`` is ``... x S x head_dim``; ``positions`` has length ``S``.
    """
    as_numpy = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(np.asarray(x)) if as_numpy else x
    head_dim = xt.shape[-1]
    angles = rope_angles(positions, head_dim, theta_base)
    if angles.shape[0] != xt.shape[-2]:
        raise InvalidArgument(f"{angles.shape[0]} positions for a sequence of {xt.shape[-2]}")
    cos = torch.cos(angles).to(xt.dtype)
    sin = torch.sin(angles).to(xt.dtype)
    even, odd = xt[..., 0::2], xt[..., 1::2]
    rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    out = rotated.flatten(-2)
    return out.numpy() if as_numpy else out


class AxialAttention(nn.Module):
    """Pre-norm multi-head self-attention parameters for one axis."""

    def __init__(self, hidden: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        width = heads * head_dim
        self.norm = RMSNorm(hidden)
        self.q = nn.Linear(hidden, width)
        self.k = nn.Linear(hidden, width)
        self.v = nn.Linear(hidden, width)
        self.out = nn.Linear(width, hidden)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, mult: int = 4):
        super().__init__()
        self.norm = RMSNorm(hidden)
        self.fc1 = nn.Linear(hidden, mult * hidden)
        self.fc2 = nn.Linear(mult * hidden, hidden)

    def forward(self, z):
        return z + self.fc2(nn.functional.gelu(self.fc1(self.norm(z))))


def attention_logits(q, k, q_pos, k_pos, theta_base=10000.0):
    """Scaled dot-product logits after rotary encoding; ``q``/``k`` are ... x S x d."""
    qr = rope_rotate(q, q_pos, theta_base)
    kr = rope_rotate(k, k_pos, theta_base)
    return qr @ kr.transpose(-1, -2) / math.sqrt(q.shape[-1])


def axial_attention(z, axis: str, p: AxialAttention, rope: bool = True,
                    theta_base: float = 10000.0):
    """One residual attention sublayer along ``axis`` of a ... x C x T x N x D grid."""
    if axis not in AXES:
        raise InvalidArgument(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    if z.dim() < 4 or z.shape[-1] != p.norm.gain.shape[0]:
        raise InvalidArgument(f"expected ... x C x T x N x {p.norm.gain.shape[0]}, got {tuple(z.shape)}")
    moved = z.movedim(AXES[axis], -2)
    seq = moved.shape[-2]
    h = p.norm(moved)

    def heads(t):
        return t.unflatten(-1, (p.heads, p.head_dim)).transpose(-2, -3)

    q, k, v = heads(p.q(h)), heads(p.k(h)), heads(p.v(h))
    if rope:
        pos = torch.arange(seq)
        q = rope_rotate(q, pos, theta_base)
        k = rope_rotate(k, pos, theta_base)
    logits = q @ k.transpose(-1, -2) / math.sqrt(p.head_dim)
    weights = torch.softmax(logits.double(), dim=-1).to(v.dtype)
    mixed = (weights @ v).transpose(-2, -3).flatten(-2)
    return z + p.out(mixed).movedim(-2, AXES[axis])


class TriAxialBlock(nn.Module):
    def __init__(self, hidden, heads, head_dim, ff_mult=4, rope_channel_axis=True,
                 rope_theta=10000.0):
        super().__init__()
        self.attn = nn.ModuleDict({ax: AxialAttention(hidden, heads, head_dim) for ax in AXIS_ORDER})
        self.ff = FeedForward(hidden, ff_mult)
        self.rope_channel_axis = rope_channel_axis
        self.rope_theta = rope_theta

    def forward(self, z):
        return transformer_block(z, self)


def transformer_block(z, blk: TriAxialBlock):
    """Time, band and channel attention in that order, then one feedforward."""
    for axis in AXIS_ORDER:
        rope = axis != "channel" or blk.rope_channel_axis
        z = axial_attention(z, axis, blk.attn[axis], rope=rope, theta_base=blk.rope_theta)
    return blk.ff(z)


class Backbone(nn.Module):
    """FiLM after the encoder and before every block, then the block stack."""

    def __init__(self, cfg):
        super().__init__()
        self.films = nn.ModuleList(
            FilmGenerator(cfg.query_dim, cfg.film_width, cfg.hidden) for _ in range(cfg.n_film))
        self.blocks = nn.ModuleList(
            TriAxialBlock(cfg.hidden, cfg.heads, cfg.head_dim, cfg.ff_mult,
                          cfg.rope_channel_axis, cfg.rope_theta)
            for _ in range(cfg.blocks))

    def film(self, site: int):
        return self.films[0 if len(self.films) == 1 else site]

    def forward(self, z, e):
        return backbone(z, e, self)


def backbone(z, e, params: Backbone):
    """``e`` is a ``... x d`` query tensor whose leading axes match those of ``z``."""
    z = film_apply(z, film_params(e, params.film(0)))
    for i, blk in enumerate(params.blocks, start=1):
        z = transformer_block(film_apply(z, film_params(e, params.film(i))), blk)
    return z

