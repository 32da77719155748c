"""Mel decoder for conversion: GBlocks conditioned on a speaker lookup table."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .audio import N_MELS
from .errors import SpeakerLookupError, ValidationError
from .tts import sequence_mask


@dataclass
class VCDecoderConfig:
    text_dim: int = 512
    residual_dim: int = 1
    channels: tuple = (512, 384, 256, 192)
    speaker_dim: int = 256
    n_speakers: int = 1
    n_mels: int = N_MELS
    kernel: int = 3
    dilations: tuple = (1, 2, 4, 8)
    bn_momentum: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.text_dim + self.residual_dim

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "VCDecoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})

    @classmethod
    def toy(cls, **overrides) -> "VCDecoderConfig":
        base = dict(text_dim=64, channels=(128, 96, 64, 48), speaker_dim=32)
        base.update(overrides)
        return cls(**base)


class ConditionalBatchNorm(nn.Module):
    """Masked batch norm whose scale/shift are affine functions of a condition vector.

    Statistics are taken over batch and valid time steps. ``gamma = 1 + W_g y``
    and ``beta = W_b y``, both maps zero-initialized.
    """

    def __init__(self, num_features: int, cond_dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = nn.Linear(cond_dim, num_features)
        self.beta = nn.Linear(cond_dim, num_features)
        for lin in (self.gamma, self.beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def normalize(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        if mask is None:
            mask = x.new_ones(x.shape[0], x.shape[2])
        m = mask.to(x.dtype).unsqueeze(1)
        if self.training:
            count = m.sum()
            mean = (x * m).sum(dim=(0, 2)) / count
            var = (((x - mean[None, :, None]) ** 2) * m).sum(dim=(0, 2)) / count
            with torch.no_grad():
                unbiased = var * count / torch.clamp(count - 1, min=1)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.to(self.running_mean.dtype))
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.to(self.running_var.dtype))
        else:
            mean, var = self.running_mean.to(x.dtype), self.running_var.to(x.dtype)
        return (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)

    def forward(self, x: Tensor, y: Tensor, mask: Tensor | None = None) -> Tensor:
        xn = self.normalize(x, mask)
        return (1.0 + self.gamma(y)).unsqueeze(-1) * xn + self.beta(y).unsqueeze(-1)


class GBlock(nn.Module):
    """GAN-TTS generator block with upsampling removed.

    Two residual sub-units, each (CBN, ReLU, conv) x 2, using dilations
    ``d1, d2`` and ``d3, d4``; the first shortcut is a 1x1 conv.
    """

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, kernel: int = 3,
                 dilations=(1, 2, 4, 8), momentum: float = 0.1):
        super().__init__()
        chans = [(in_ch, out_ch), (out_ch, out_ch), (out_ch, out_ch), (out_ch, out_ch)]
        self.norms = nn.ModuleList(ConditionalBatchNorm(c_in, cond_dim, momentum) for c_in, _ in chans)
        self.convs = nn.ModuleList(
            nn.Conv1d(c_in, c_out, kernel, dilation=d, padding=d * (kernel // 2))
            for (c_in, c_out), d in zip(chans, dilations))
        self.shortcut = nn.Conv1d(in_ch, out_ch, 1)

    def _unit(self, x, y, mask, i):
        m = mask.unsqueeze(1).to(x.dtype)
        # normalization shifts padded frames off zero; re-mask so convs never read them
        h = self.convs[i](F.relu(self.norms[i](x, y, mask)) * m) * m
        return self.convs[i + 1](F.relu(self.norms[i + 1](h, y, mask)) * m) * m

    def forward(self, x: Tensor, y: Tensor, mask: Tensor) -> Tensor:
        x = self._unit(x, y, mask, 0) + self.shortcut(x) * mask.unsqueeze(1).to(x.dtype)
        return x + self._unit(x, y, mask, 2)


class VCDecoder(nn.Module):
    def __init__(self, cfg: VCDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.speaker_dim)
        first = cfg.channels[0]
        self.pre = nn.Conv1d(cfg.in_dim, first, cfg.kernel, padding=cfg.kernel // 2)
        ins = (first,) + tuple(cfg.channels[:-1])
        self.blocks = nn.ModuleList(
            GBlock(a, b, cfg.speaker_dim, cfg.kernel, cfg.dilations, cfg.bn_momentum)
            for a, b in zip(ins, cfg.channels))
        self.post = nn.Conv1d(cfg.channels[-1], cfg.n_mels, cfg.kernel, padding=cfg.kernel // 2)

    def embed(self, speaker_ids: Tensor) -> Tensor:
        bad = (speaker_ids < 0) | (speaker_ids >= self.cfg.n_speakers)
        if bool(bad.any()):
            raise SpeakerLookupError(int(speaker_ids[bad][0]))
        return self.speaker_table(speaker_ids)

    def forward(self, features: Tensor, lengths: Tensor, speaker_ids: Tensor) -> Tensor:
        """``features`` is ``concat(L, R)`` as ``[B, T, text_dim + 1]``; returns ``[B, T, n_mels]``."""
        if features.dim() != 3 or features.shape[-1] != self.cfg.in_dim:
            raise ValidationError(
                f"decoder input must be [B, T, {self.cfg.in_dim}], got {tuple(features.shape)}")
        y = self.embed(speaker_ids)
        mask = sequence_mask(lengths, features.shape[1])
        m = mask.unsqueeze(1).to(features.dtype)
        x = self.pre(features.transpose(1, 2) * m) * m
        for block in self.blocks:
            x = block(x, y, mask)
        return (self.post(F.relu(x)) * m).transpose(1, 2)


def decoder_input(linguistic: Tensor, residual: Tensor) -> Tensor:
    """Channel-wise ``concat(L, R)`` (L first)."""
    if linguistic.shape[:-1] != residual.shape[:-1]:
        raise ValidationError(
            f"L {tuple(linguistic.shape)} and R {tuple(residual.shape)} differ in time/batch")
    return torch.cat([linguistic, residual], dim=-1)


def reconstruction_loss(pred: Tensor, target: Tensor, lengths: Tensor | None = None) -> Tensor:
    """Mean squared error over valid elements."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if lengths is None:
        return torch.mean((pred - target) ** 2)
    mask = sequence_mask(lengths, pred.shape[1]).unsqueeze(-1).to(pred.dtype)
    return torch.sum(((pred - target) ** 2) * mask) / (mask.sum() * pred.shape[-1])
