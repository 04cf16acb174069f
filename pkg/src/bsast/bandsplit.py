"""Uneven subband partition of a complex spectrogram and per-band encoding.

Complex bins are split into contiguous bands first; within a band the real
parts of its ``F_n`` bins are followed by their imaginary parts, so each band
is a ``2 * F_n`` real vector per (channel, frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument

RMS_EPS = 1e-8

# widths for a 2048-point FFT (1025 bins)
DEFAULT_WIDTHS = (6,) * 11 + (32,) * 6 + (64,) * 4 + (128, 128, 128, 127)


@dataclass(frozen=True)
class BandScheme:
    widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths:
            raise InvalidArgument("band scheme needs at least one band")
        if any(w < 1 for w in widths):
            raise InvalidArgument(f"band widths must be >= 1, got {widths}")
        object.__setattr__(self, "widths", widths)

    def __len__(self):
        return len(self.widths)

    @property
    def n_bins(self) -> int:
        return sum(self.widths)

    @property
    def edges(self) -> np.ndarray:
        """Start bin of every band, plus the total bin count at the end."""
        return np.concatenate([[0], np.cumsum(self.widths)])

    def check(self, n_bins: int) -> None:
        if self.n_bins != n_bins:
            raise InvalidArgument(
                f"band widths sum to {self.n_bins} but the spectrogram has {n_bins} bins")

    def to_text(self) -> str:
        return ",".join(str(w) for w in self.widths)

    @classmethod
    def from_text(cls, text: str) -> "BandScheme":
        return cls(tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok))


def default_band_scheme(fft_size: int) -> BandScheme:
    """The 25-band layout, scaled proportionally for FFT sizes other than 2048.

    Scaled widths are ``max(1, floor(w * F / 1025))``; whatever remains (which
    may be negative) is absorbed by the last band.
    """
    n_bins = fft_size // 2 + 1
    ref = sum(DEFAULT_WIDTHS)
    if n_bins == ref:
        return BandScheme(DEFAULT_WIDTHS)
    scale = n_bins / ref
    widths = [max(1, int(np.floor(w * scale))) for w in DEFAULT_WIDTHS]
    widths[-1] += n_bins - sum(widths)
    if widths[-1] < 1:
        raise InvalidArgument(
            f"fft_size {fft_size} ({n_bins} bins) is too small for {len(DEFAULT_WIDTHS)} bands")
    return BandScheme(tuple(widths))


def _complex_bins(spec):
    bins = getattr(spec, "bins", spec)
    if isinstance(bins, torch.Tensor):
        return bins
    return np.asarray(bins)


def split_bands(spec, scheme: BandScheme) -> list:
    """Return one real ``... x 2F_n`` grid per band (real parts, then imaginary)."""
    bins = _complex_bins(spec)
    scheme.check(bins.shape[-1])
    edges = scheme.edges
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        seg = bins[..., lo:hi]
        if isinstance(seg, torch.Tensor):
            out.append(torch.cat([seg.real, seg.imag], dim=-1))
        else:
            out.append(np.concatenate([seg.real, seg.imag], axis=-1))
    return out


def merge_bands(bands, scheme: BandScheme):
    """Inverse of :func:`split_bands`: re-interleave halves into complex bins."""
    if len(bands) != len(scheme):
        raise InvalidArgument(f"expected {len(scheme)} bands, got {len(bands)}")
    parts = []
    for n, (band, width) in enumerate(zip(bands, scheme.widths)):
        if band.shape[-1] != 2 * width:
            raise InvalidArgument(
                f"band {n} has width {band.shape[-1]}, scheme expects {2 * width}")
        if isinstance(band, torch.Tensor):
            parts.append(torch.complex(band[..., :width], band[..., width:]))
        else:
            parts.append(band[..., :width] + 1j * band[..., width:])
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts, dim=-1)
    return np.concatenate(parts, axis=-1)


def rms_norm(x, gain, eps: float = RMS_EPS):
    """``gain * x / sqrt(mean(x^2) + eps)`` over the last axis."""
    if isinstance(x, torch.Tensor):
        return gain * x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape[-1:] != x.shape[-1:]:
        raise InvalidArgument(f"gain length {gain.shape[-1]} != input length {x.shape[-1]}")
    return gain * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = RMS_EPS):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.gain, self.eps)


class BandEncoder(nn.Module):
    """Per-band RMSNorm followed by a linear map ``2F_n -> D``."""

    def __init__(self, scheme: BandScheme, hidden: int):
        super().__init__()
        self.scheme = scheme
        self.hidden = hidden
        self.norms = nn.ModuleList(RMSNorm(2 * w) for w in scheme.widths)
        self.projs = nn.ModuleList(nn.Linear(2 * w, hidden) for w in scheme.widths)

    def forward(self, bands):
        return encode_bands(bands, self)


def encode_bands(bands, params: BandEncoder) -> torch.Tensor:
    """Encode each band and stack along a new band axis: ``... x N x D``."""
    if len(bands) != len(params.scheme):
        raise InvalidArgument(f"expected {len(params.scheme)} bands, got {len(bands)}")
    feats = []
    for n, (band, norm, proj) in enumerate(zip(bands, params.norms, params.projs)):
        if band.shape[-1] != proj.in_features:
            raise InvalidArgument(
                f"band {n} width {band.shape[-1]} != encoder input {proj.in_features}")
        if not isinstance(band, torch.Tensor):
            band = torch.as_tensor(band, dtype=proj.weight.dtype)
        feats.append(proj(norm(band)))
    return torch.stack(feats, dim=-2)
