"""Query embeddings, FiLM modulation and pseudo-query generation.

Embeddings are opaque unit vectors. Real deployments would obtain them from
a pretrained audio-text encoder; at desk scale :func:`synthetic_embedding`
derives a fixed unit vector from a class label instead.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import FormatError, InvalidArgument

MODALITIES = ("audio", "text", "pseudo")
EMBED_MAGIC = b"QEMB"
EMBED_VERSION = 1
NORM_TOL = 1e-5
TEXT_GAP = 0.6


@dataclass
class QueryEmbedding:
    vector: np.ndarray
    modality: str = "audio"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise InvalidArgument("embedding must be a non-empty finite vector")
        norm = float(np.linalg.norm(v.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOL:
            raise InvalidArgument(f"embedding must be unit-norm, got norm {norm:.6g}")
        if self.modality not in MODALITIES:
            raise InvalidArgument(f"unknown modality {self.modality!r}")
        self.vector = v

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    @classmethod
    def from_raw(cls, raw, modality="audio") -> "QueryEmbedding":
        """Normalize an arbitrary non-zero vector into an embedding."""
        raw = np.asarray(raw, dtype=np.float64)
        norm = np.linalg.norm(raw)
        if norm == 0:
            raise InvalidArgument("cannot normalize a zero vector")
        return cls(raw / norm, modality)


def _label_rng(label: str, salt: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{salt}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def synthetic_embedding(label: str, dim: int = 512, modality: str = "audio") -> QueryEmbedding:
    """Deterministic stand-in embedding for a source class.

    The text variant sits a fixed, label-specific distance away from the audio
    variant, mimicking the gap between audio and text embeddings.
    """
    base = _label_rng(label, "audio").standard_normal(dim)
    base /= np.linalg.norm(base)
    if modality == "text":
        gap = _label_rng(label, "text").standard_normal(dim)
        base = base + TEXT_GAP * gap / np.linalg.norm(gap)
    elif modality != "audio":
        raise InvalidArgument(f"synthetic embeddings are audio or text, not {modality!r}")
    return QueryEmbedding.from_raw(base, modality)


def perturb_embedding(e: QueryEmbedding, sigma: float, rng: np.random.Generator) -> QueryEmbedding:
    """Pseudo-query: ``normalize(e + sigma * g)`` with ``g`` standard normal."""
    if sigma < 0:
        raise InvalidArgument(f"sigma must be non-negative, got {sigma}")
    noise = rng.standard_normal(e.dim)
    if sigma == 0:
        return QueryEmbedding(e.vector.copy(), "pseudo")
    return QueryEmbedding.from_raw(e.vector.astype(np.float64) + sigma * noise, "pseudo")


def save_embedding(e: QueryEmbedding, path) -> None:
    payload = np.asarray(e.vector, dtype="<f4").tobytes()
    with open(os.fspath(path), "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<II", EMBED_VERSION, e.dim))
        fh.write(payload)
        fh.write(struct.pack("<B", MODALITIES.index(e.modality)))


def load_embedding(path) -> QueryEmbedding:
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, dim = struct.unpack_from("<II", raw, 4)
    if version != EMBED_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 12 + 4 * dim + 1
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for d={dim}, found {len(raw)}")
    vector = np.frombuffer(raw, dtype="<f4", count=dim, offset=12).astype(np.float32)
    tag = raw[-1]
    if tag >= len(MODALITIES):
        raise FormatError(f"{path}: unknown modality tag {tag}")
    try:
        return QueryEmbedding(vector, MODALITIES[tag])
    except InvalidArgument as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass
class FilmParams:
    gamma: torch.Tensor
    beta: torch.Tensor


class FilmGenerator(nn.Module):
    """Two-layer map ``d -> h -> 2D`` with a ReLU in between."""

    def __init__(self, query_dim: int, hidden: int, features: int):
        super().__init__()
        self.features = features
        self.fc1 = nn.Linear(query_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * features)

    def forward(self, e):
        return film_params(e, self)


def film_params(e, g: FilmGenerator) -> FilmParams:
    """First ``D`` outputs are gamma, the last ``D`` are beta."""
    if isinstance(e, QueryEmbedding):
        e = e.vector
    if not isinstance(e, torch.Tensor):
        e = torch.as_tensor(np.asarray(e), dtype=g.fc1.weight.dtype)
    if e.shape[-1] != g.fc1.in_features:
        raise InvalidArgument(
            f"query dimension {e.shape[-1]} does not match FiLM input {g.fc1.in_features}")
    out = g.fc2(torch.relu(g.fc1(e)))
    gamma, beta = out.split(g.features, dim=-1)
    return FilmParams(gamma, beta)


def film_apply(z: torch.Tensor, p: FilmParams) -> torch.Tensor:
    """``gamma * z + beta`` over the feature axis, broadcast over C, T and N.

    ``gamma``/``beta`` may carry leading batch axes matching those of ``z``.
    """
    if p.gamma.shape[-1] != z.shape[-1] or p.beta.shape != p.gamma.shape:
        raise InvalidArgument(
            f"FiLM width {p.gamma.shape[-1]} does not match feature width {z.shape[-1]}")
    spread = (1,) * (z.dim() - p.gamma.dim())
    gamma = p.gamma.reshape(p.gamma.shape[:-1] + spread + p.gamma.shape[-1:])
    beta = p.beta.reshape(gamma.shape)
    return gamma * z + beta
