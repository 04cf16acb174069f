"""The complete extraction network and its checkpoint container."""

from __future__ import annotations

import os
import struct

import numpy as np
import torch
from torch import nn

from .bandsplit import BandEncoder, split_bands
from .config import ModelConfig, model_from_text, section_to_text
from .dsp import istft_torch, stft_torch
from .errors import FormatError, NumericError
from .estimator import BandDecoder, ChannelMerge, assemble_spectrum
from .triaxial import Backbone

CKPT_MAGIC = b"BSCK"
CKPT_VERSION = 1
INIT_STD = 0.02


class BSAST(nn.Module):
    """mixture (B x C x L) + query (B x d) -> dry target estimate (B x L)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        scheme = config.band_scheme
        self.encoder = BandEncoder(scheme, config.hidden)
        self.backbone = Backbone(config)
        self.decoder = BandDecoder(scheme, config.hidden, config.decoder_mult)
        self.merge = ChannelMerge(config.channels, config.merge_layers)
        self.reset_parameters(seed)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def reset_parameters(self, seed: int = 0):
        """Normal(0, 0.02) projections, zero biases, zero residual outputs.

        Every transformer block starts as the identity, FiLM starts near
        (gamma, beta) = (1, 0) and the channel merge starts as a channel mean.
        """
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * INIT_STD)
            for blk in self.backbone.blocks:
                for attn in blk.attn.values():
                    attn.out.weight.zero_()
                blk.ff.fc2.weight.zero_()
            for film in self.backbone.films:
                film.fc2.bias[: film.features].fill_(1.0)
            if isinstance(self.merge.net, nn.Linear):
                c = self.config.channels
                self.merge.net.weight.zero_()
                self.merge.net.weight[0, 0::2] = 1.0 / c
                self.merge.net.weight[1, 1::2] = 1.0 / c

    def randomize(self, seed: int, std: float = 0.3):
        """Dense random parameters everywhere (used for gradient verification)."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                base = 1.0 if name.endswith("gain") else 0.0
                p.copy_(base + torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
        return self

    def forward(self, mix, e, check: bool = False):
        cfg = self.config
        stft_cfg = cfg.stft

        def guard(stage, t):
            if check and not torch.isfinite(torch.view_as_real(t) if t.is_complex() else t).all():
                raise NumericError(stage)
            return t

        length = mix.shape[-1]
        spec = guard("stft", stft_torch(mix, stft_cfg))
        z = guard("encoder", self.encoder(split_bands(spec, cfg.band_scheme)))
        z = guard("backbone", self.backbone(z, e))
        est = guard("decoder", assemble_spectrum(self.decoder(z), cfg.band_scheme))
        merged = guard("channel_merge", self.merge(est))
        return guard("istft", istft_torch(merged, stft_cfg, length))


def save_checkpoint(model: BSAST, path) -> None:
    """Header (canonical config text), then (path, shape, f32 payload) records."""
    header = section_to_text("model", model.config).encode()
    state = model.state_dict()
    with open(os.fspath(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            key = name.encode()
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", tensor.dim()))
            fh.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
            fh.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path, dtype=torch.float32) -> BSAST:
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        config = model_from_text(raw[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        model = BSAST(config).to(dtype)
        expected = model.state_dict()
        loaded = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + klen].decode()
            pos += klen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            if name not in expected:
                raise FormatError(f"{path}: unexpected parameter {name}")
            if tuple(expected[name].shape) != tuple(shape):
                raise FormatError(
                    f"{path}: {name} has shape {tuple(shape)}, config implies {tuple(expected[name].shape)}")
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            loaded[name] = torch.from_numpy(data.astype(np.float32)).to(dtype)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    missing = set(expected) - set(loaded)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)[:3]}")
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    model.load_state_dict(loaded)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
