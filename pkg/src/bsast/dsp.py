"""Multichannel STFT analysis/synthesis.

Frames are taken from a signal reflect-padded by ``fft_size // 2`` on both
sides, so a length-``L`` signal always yields ``ceil(L / hop) + 1`` frames.
Synthesis is weighted overlap-add normalized by the summed squared window.

The numpy functions operate on 64-bit data and are the reference path; the
``*_torch`` twins share the same framing and are used inside the model so
gradients flow through the inverse transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .errors import InvalidArgument

WINDOW_FLOOR = 1e-10


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window ``0.5 - 0.5 cos(2 pi k / n)``."""
    if int(n) != n or n < 2:
        raise InvalidArgument(f"window length must be an integer >= 2, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def is_cola(window: np.ndarray, hop: int, tol: float = 1e-10) -> bool:
    """True if shifted copies of ``window`` at ``hop`` sum to a constant."""
    n = len(window)
    acc = np.zeros(hop)
    for start in range(0, n, hop):
        seg = window[start:start + hop]
        acc[: len(seg)] += seg
    return bool(np.ptp(acc) <= tol * max(1.0, np.abs(acc).max()))


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 2048
    hop: int = 1024
    window: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.fft_size < 2 or self.hop < 1:
            raise InvalidArgument("fft_size must be >= 2 and hop >= 1")
        if self.hop > self.fft_size:
            raise InvalidArgument(f"hop {self.hop} exceeds fft_size {self.fft_size}")
        win = hann_window(self.fft_size) if self.window is None else np.asarray(self.window, dtype=np.float64)
        if win.shape != (self.fft_size,):
            raise InvalidArgument(f"window must have length {self.fft_size}")
        if not is_cola(win, self.hop):
            raise InvalidArgument(f"window is not COLA at hop {self.hop}")
        win.setflags(write=False)
        object.__setattr__(self, "window", win)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, length: int) -> int:
        return -(-length // self.hop) + 1


@dataclass
class FoaWaveform:
    """C x L real samples (C is 1 for the omni-only ablation, 4 for wxyz)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise InvalidArgument(f"waveform must be C x L, got shape {s.shape}")
        if s.shape[0] not in (1, 4):
            raise InvalidArgument(f"channel count must be 1 or 4, got {s.shape[0]}")
        if s.shape[1] < 1:
            raise InvalidArgument("waveform has no samples")
        if not np.all(np.isfinite(s)):
            raise InvalidArgument("waveform contains non-finite samples")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass
class ComplexSpectrogram:
    """C x T x F complex bins plus the framing that produced them."""

    bins: np.ndarray
    frame_hop: int
    fft_size: int
    sample_rate: int

    @property
    def shape(self):
        return self.bins.shape


@lru_cache(maxsize=64)
def _frame_index(length: int, fft_size: int, hop: int) -> np.ndarray:
    """T x fft_size indices into the reflect-padded (then zero-extended) signal.

    Index ``length`` (one past the end) marks a zero sample.
    """
    pad = fft_size // 2
    n_frames = -(-length // hop) + 1
    total = (n_frames - 1) * hop + fft_size
    pos = np.arange(total) - pad
    if length == 1:
        src = np.zeros(total, dtype=np.int64)
    else:
        period = 2 * (length - 1)
        m = np.mod(pos, period)
        src = np.where(m < length, m, period - m)
    # samples beyond the reflect-padded span are zeros
    src = np.where(np.arange(total) < length + 2 * pad, src, length)
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(fft_size)[None, :]
    out = src[idx]
    out.setflags(write=False)
    return out


def _as_2d(samples):
    x = np.asarray(samples, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def stft(wave, cfg: StftConfig) -> ComplexSpectrogram:
    """Per-channel framed, windowed real DFT. Accepts a FoaWaveform or a C x L array."""
    if isinstance(wave, FoaWaveform):
        x, sr = wave.samples, wave.sample_rate
    else:
        x, sr = wave, 0
    x = _as_2d(x)
    if x.shape[-1] < 1:
        raise InvalidArgument("cannot analyse an empty signal")
    idx = _frame_index(x.shape[-1], cfg.fft_size, cfg.hop)
    xz = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    frames = xz[..., idx] * cfg.window
    bins = np.fft.rfft(frames, axis=-1)
    return ComplexSpectrogram(bins, cfg.hop, cfg.fft_size, sr)


def _check_synthesis(spec_fft, spec_hop, cfg):
    if spec_fft != cfg.fft_size or spec_hop != cfg.hop:
        raise InvalidArgument(
            f"spectrogram framing (fft={spec_fft}, hop={spec_hop}) does not match "
            f"config (fft={cfg.fft_size}, hop={cfg.hop})")


@lru_cache(maxsize=64)
def _ola_norm(n_frames: int, fft_size: int, hop: int, window_key: bytes) -> np.ndarray:
    window = np.frombuffer(window_key, dtype=np.float64)
    total = (n_frames - 1) * hop + fft_size
    norm = np.zeros(total)
    for t in range(n_frames):
        norm[t * hop:t * hop + fft_size] += window ** 2
    return np.maximum(norm, WINDOW_FLOOR)


def istft(spec, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; returns C x out_len samples."""
    if isinstance(spec, ComplexSpectrogram):
        _check_synthesis(spec.fft_size, spec.frame_hop, cfg)
        bins = spec.bins
    else:
        bins = np.asarray(spec)
    if bins.shape[-1] != cfg.n_bins:
        raise InvalidArgument(f"expected {cfg.n_bins} bins, got {bins.shape[-1]}")
    n_frames = bins.shape[-2]
    reach = (n_frames - 1) * cfg.hop
    if out_len > reach:
        raise InvalidArgument(f"out_len {out_len} exceeds reconstructible length {reach}")
    frames = np.fft.irfft(bins, n=cfg.fft_size, axis=-1) * cfg.window
    total = reach + cfg.fft_size
    out = np.zeros(bins.shape[:-2] + (total,))
    for t in range(n_frames):
        out[..., t * cfg.hop:t * cfg.hop + cfg.fft_size] += frames[..., t, :]
    out /= _ola_norm(n_frames, cfg.fft_size, cfg.hop, cfg.window.tobytes())
    pad = cfg.fft_size // 2
    return out[..., pad:pad + out_len]


def stft_torch(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Torch twin of :func:`stft` over the last axis of a real tensor."""
    length = x.shape[-1]
    if length < 1:
        raise InvalidArgument("cannot analyse an empty signal")
    idx = torch.from_numpy(np.array(_frame_index(length, cfg.fft_size, cfg.hop)))
    xz = torch.cat([x, x.new_zeros(x.shape[:-1] + (1,))], dim=-1)
    window = torch.tensor(cfg.window, dtype=x.dtype)
    frames = xz[..., idx] * window
    return torch.fft.rfft(frames, dim=-1)


def istft_torch(bins: torch.Tensor, cfg: StftConfig, out_len: int) -> torch.Tensor:
    """Differentiable twin of :func:`istft`; ``bins`` is ... x T x F complex."""
    n_frames = bins.shape[-2]
    reach = (n_frames - 1) * cfg.hop
    if out_len > reach:
        raise InvalidArgument(f"out_len {out_len} exceeds reconstructible length {reach}")
    real_dtype = bins.real.dtype
    window = torch.tensor(cfg.window, dtype=real_dtype)
    frames = torch.fft.irfft(bins, n=cfg.fft_size, dim=-1) * window
    total = reach + cfg.fft_size
    lead = frames.shape[:-2]
    flat = frames.reshape(-1, n_frames, cfg.fft_size).transpose(1, 2)
    out = torch.nn.functional.fold(
        flat, output_size=(1, total), kernel_size=(1, cfg.fft_size), stride=(1, cfg.hop))
    out = out.reshape(lead + (total,))
    norm = torch.from_numpy(_ola_norm(n_frames, cfg.fft_size, cfg.hop, cfg.window.tobytes())).to(real_dtype)
    out = out / norm
    pad = cfg.fft_size // 2
    return out[..., pad:pad + out_len]

