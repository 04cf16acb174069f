"""Band-wise spectrum decoding, channel merge and the end-to-end extraction path.

Decoders map features directly to real/imaginary spectrum values (spectral
mapping); nothing bounds the estimate by the mixture magnitude.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .bandsplit import BandScheme, merge_bands
from .conditioning import QueryEmbedding
from .dsp import FoaWaveform
from .errors import InvalidArgument


class BandDecoderUnit(nn.Module):
    """``D -> mult*D -> 2 * (2F_n)`` MLP whose last layer is gated (GLU)."""

    def __init__(self, hidden: int, width: int, mult: int = 4):
        super().__init__()
        self.width = width
        self.fc1 = nn.Linear(hidden, mult * hidden)
        self.fc2 = nn.Linear(mult * hidden, 4 * width)


class BandDecoder(nn.Module):
    def __init__(self, scheme: BandScheme, hidden: int, mult: int = 4):
        super().__init__()
        self.scheme = scheme
        self.units = nn.ModuleList(BandDecoderUnit(hidden, w, mult) for w in scheme.widths)

    def forward(self, z):
        """``z`` is ... x N x D; returns one ... x 2F_n grid per band."""
        if z.shape[-2] != len(self.units):
            raise InvalidArgument(f"expected {len(self.units)} bands, got {z.shape[-2]}")
        return [decode_band(z[..., n, :], unit) for n, unit in enumerate(self.units)]


def decode_band(z_n, p: BandDecoderUnit):
    """Per (channel, frame) decoding of one band: real parts then imaginary parts."""
    if z_n.shape[-1] != p.fc1.in_features:
        raise InvalidArgument(f"band features have width {z_n.shape[-1]}, decoder expects {p.fc1.in_features}")
    h = torch.tanh(p.fc1(z_n))
    value, gate = p.fc2(h).chunk(2, dim=-1)
    return value * torch.sigmoid(gate)


def assemble_spectrum(bands, scheme: BandScheme):
    """Concatenate decoded bands into a ... x F complex spectrum."""
    return merge_bands(bands, scheme)


class ChannelMerge(nn.Module):
    """1x1 convolution over channels treating each bin as a (re, im) pair.

    Input features per (t, f) are ordered ``re_0, im_0, re_1, im_1, ...``.
    """

    def __init__(self, channels: int, layers: int = 1):
        super().__init__()
        self.channels = channels
        if layers == 1:
            self.net = nn.Linear(2 * channels, 2)
        else:
            self.net = nn.Sequential(
                nn.Linear(2 * channels, 4 * channels), nn.ReLU(), nn.Linear(4 * channels, 2))

    def forward(self, s_multi):
        return channel_merge(s_multi, self)


def channel_merge(s_multi, p: ChannelMerge):
    """Map a ... x C x T x F complex spectrum to ... x T x F."""
    as_numpy = not isinstance(s_multi, torch.Tensor)
    if as_numpy:
        s_multi = torch.as_tensor(np.asarray(s_multi, dtype=np.complex128))
    if s_multi.dim() < 3 or s_multi.shape[-3] != p.channels:
        raise InvalidArgument(
            f"channel merge expects {p.channels} channels, got shape {tuple(s_multi.shape)}")
    pairs = torch.stack([s_multi.real, s_multi.imag], dim=-1)      # ... C T F 2
    feats = pairs.movedim(-4, -2).flatten(-2)                       # ... T F 2C
    dtype = next(p.parameters()).dtype
    out = p.net(feats.to(dtype))
    merged = torch.complex(out[..., 0], out[..., 1])
    return merged.detach().numpy() if as_numpy else merged


def select_channels(samples: np.ndarray, channels: int) -> np.ndarray:
    """Adapt an FOA mixture to a model's channel count (w-only keeps channel 0)."""
    if samples.shape[-2] == channels:
        return samples
    if channels == 1:
        return samples[..., :1, :]
    raise InvalidArgument(f"cannot build {channels} channels from {samples.shape[-2]}")


def extract(x: FoaWaveform, q: QueryEmbedding, model) -> np.ndarray:
    """Estimate the dry target for query ``q`` from mixture ``x``.

    Returns a 1-D waveform with the same length as the mixture.
    """
    cfg = model.config
    if x.sample_rate != cfg.sample_rate:
        raise InvalidArgument(f"mixture is {x.sample_rate} Hz, model expects {cfg.sample_rate} Hz")
    if x.channels != cfg.channels:
        raise InvalidArgument(f"mixture has {x.channels} channels, model expects {cfg.channels}")
    if q.dim != cfg.query_dim:
        raise InvalidArgument(
            f"query dimension mismatch: embedding has d={q.dim}, model expects d={cfg.query_dim}")
    dtype = model.dtype
    with torch.no_grad():
        mix = torch.as_tensor(x.samples, dtype=dtype)[None]
        e = torch.as_tensor(q.vector, dtype=dtype)[None]
        out = model(mix, e, check=True)
    return out[0].numpy().astype(np.float64)
