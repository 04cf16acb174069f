"""WAV reading and writing (PCM16 or float32, 1 to 4 channels)."""

from __future__ import annotations

import os

import numpy as np
from scipy.io import wavfile

from .dsp import FoaWaveform
from .errors import CorpusError, FormatError, InvalidArgument

MIN_RATE, MAX_RATE = 8000, 48000


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (C x L float64 samples in [-1, 1], sample_rate)."""
    try:
        rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (ValueError, OSError) as exc:
        raise CorpusError(f"{path}: unreadable WAV ({exc})", [str(path)]) from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    x = x[None, :] if x.ndim == 1 else x.T
    if x.shape[0] > 4:
        raise FormatError(f"{path}: {x.shape[0]} channels, at most 4 supported")
    if not MIN_RATE <= rate <= MAX_RATE:
        raise FormatError(f"{path}: sample rate {rate} outside {MIN_RATE}-{MAX_RATE} Hz")
    return np.ascontiguousarray(x), int(rate)


def write_wav(path, samples, sample_rate: int, subtype: str = "float32") -> None:
    """Write C x L (or L) samples. ``subtype`` is ``"float32"`` or ``"pcm16"``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not 1 <= x.shape[0] <= 4:
        raise InvalidArgument(f"cannot write {x.shape[0]} channels")
    if not MIN_RATE <= sample_rate <= MAX_RATE:
        raise InvalidArgument(f"sample rate {sample_rate} outside {MIN_RATE}-{MAX_RATE} Hz")
    if subtype == "float32":
        data = x.T.astype(np.float32)
    elif subtype == "pcm16":
        data = np.round(np.clip(x.T, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        raise InvalidArgument(f"unknown WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    wavfile.write(os.fspath(path), int(sample_rate), data)


def read_foa(path) -> FoaWaveform:
    x, rate = read_wav(path)
    return FoaWaveform(x, rate)
