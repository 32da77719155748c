"""Speaker-independent features: alignment-weighted text encodings and residual features."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .audio import N_MELS, MelSpectrogram
from .errors import ValidationError
from .text import SymbolSequence
from .tts import Cotatron, sequence_mask


def _as_batch(mel, seq: SymbolSequence, dtype=torch.float32):
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    m = torch.as_tensor(frames, dtype=dtype).unsqueeze(0)
    ids = torch.as_tensor(np.asarray(seq.ids if isinstance(seq, SymbolSequence) else seq),
                          dtype=torch.long).unsqueeze(0)
    return m, torch.tensor([m.shape[1]]), ids, torch.tensor([ids.shape[1]])


def _dtype_of(model: nn.Module):
    return next(model.parameters()).dtype


@torch.no_grad()
def teacher_forced(model: Cotatron, mel, seq: SymbolSequence):
    """Deterministic eval-mode, fully teacher-forced forward for one utterance."""
    was_training = model.training
    model.eval()
    try:
        return model(*_as_batch(mel, seq, _dtype_of(model)), tf_rate=1.0)
    finally:
        model.train(was_training)


def extract_alignment(model: Cotatron, mel, seq: SymbolSequence) -> np.ndarray:
    """Row-stochastic alignment ``[T_frames, N_symbols]``."""
    return teacher_forced(model, mel, seq).alignment[0].cpu().numpy()


def linguistic_features(alignment, text_encoding):
    """``L = alignment @ text_encoding`` (works for numpy arrays or tensors, batched or not)."""
    a_cols = alignment.shape[-1]
    if a_cols != text_encoding.shape[-2]:
        raise ValidationError(
            f"alignment has {a_cols} columns but text encoding has {text_encoding.shape[-2]} rows")
    if isinstance(alignment, Tensor):
        return torch.matmul(alignment, text_encoding)
    return np.matmul(np.asarray(alignment), np.asarray(text_encoding))


def context_equivalence_check(model: Cotatron, mel, seq: SymbolSequence) -> float:
    """Max |L - c| between the matmul features and the decoder's own context vectors."""
    out = teacher_forced(model, mel, seq)
    e = out.text_encoding.shape[-1]
    lf = linguistic_features(out.alignment, out.text_encoding)
    return float((lf - out.contexts[..., :e]).abs().max())


# --- residual encoder --------------------------------------------------------------

@dataclass
class ResidualConfig:
    n_mels: int = N_MELS
    channels: tuple = (32, 32, 64, 64, 128, 128)
    smoothing_window: int = 21
    eps: float = 1e-5

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})


def reflect_indices(n: int, pad: int) -> np.ndarray:
    """Indices of a length-``n`` signal reflect-padded by ``pad`` on both sides.

    Reflection repeats as needed, so any ``n >= 1`` is accepted.
    """
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def hann_kernel(size: int) -> np.ndarray:
    w = np.hanning(size)
    return w / w.sum()


def smooth(x: Tensor, window: int = 21) -> Tensor:
    """Unit-sum Hann smoothing of a 1-D signal with reflect padding."""
    pad = window // 2
    idx = torch.as_tensor(reflect_indices(x.shape[-1], pad), device=x.device)
    k = torch.as_tensor(hann_kernel(window), dtype=x.dtype, device=x.device).view(1, 1, -1)
    return F.conv1d(x[..., idx].reshape(1, 1, -1), k).reshape(-1)


class ResidualEncoder(nn.Module):
    """Mel-strided CNN -> 1 channel -> instance norm -> tanh -> Hann smoothing.

    Time is never strided; convolutions replicate-pad along time so a
    constant-in-time input stays constant through every layer.
    """

    def __init__(self, cfg: ResidualConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ResidualConfig()
        chans = (1,) + tuple(cfg.channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=(1, 2), padding=0)
            for i in range(len(chans) - 1))
        # variance-preserving init keeps the pre-norm signal far above eps from the start
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        mel = cfg.n_mels
        for _ in self.convs:
            mel = (mel + 1) // 2
        self.proj = nn.Linear(chans[-1] * mel, 1)

    def _conv_stack(self, mel: Tensor, lengths: Tensor) -> Tensor:
        b, t, _ = mel.shape
        # beyond each item's end, repeat its last valid frame (= replicate padding)
        hold = torch.minimum(torch.arange(t, device=mel.device)[None, :], (lengths - 1)[:, None])
        x = mel.unsqueeze(1)
        for conv in self.convs:
            x = torch.gather(x, 2, hold[:, None, :, None].expand(-1, x.shape[1], -1, x.shape[3]))
            x = F.pad(x, (1, 1, 0, 0))                       # zeros along mel
            x = F.pad(x, (0, 0, 1, 1), mode="replicate")     # replicate along time
            x = F.relu(conv(x))
        x = x.permute(0, 2, 1, 3).reshape(b, t, -1)
        # row-wise reduction instead of a GEMM: identical frames give bit-identical outputs
        return (x * self.proj.weight[0]).sum(-1) + self.proj.bias

    def normalized(self, mel: Tensor, lengths: Tensor) -> Tensor:
        """Instance-normalized single-channel signal ``[B, T]`` (before tanh)."""
        if mel.dim() != 3 or mel.shape[-1] != self.cfg.n_mels:
            raise ValidationError(f"mel must be [B, T, {self.cfg.n_mels}], got {tuple(mel.shape)}")
        x = self._conv_stack(mel, lengths)
        mask = sequence_mask(lengths, x.shape[1]).to(x.dtype)
        n = lengths.to(x.dtype)
        # shift by the first frame so constant signals centre to exactly zero
        shifted = (x - x[:, :1]) * mask
        mean = shifted.sum(1) / n
        centred = (shifted - mean[:, None]) * mask
        var = (centred ** 2).sum(1) / n
        return centred / torch.sqrt(var + self.cfg.eps)[:, None]

    def forward(self, mel: Tensor, lengths: Tensor) -> Tensor:
        """Residual features ``[B, T, 1]``; zero beyond each length."""
        y = torch.tanh(self.normalized(mel, lengths))
        out = torch.zeros_like(y)
        for i, n in enumerate(lengths.tolist()):
            out[i, :n] = smooth(y[i, :n], self.cfg.smoothing_window)
        return out.unsqueeze(-1)


@torch.no_grad()
def residual_features(encoder: ResidualEncoder, mel) -> np.ndarray:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    was_training = encoder.training
    encoder.eval()
    try:
        m = torch.as_tensor(frames, dtype=_dtype_of(encoder)).unsqueeze(0)
        return encoder(m, torch.tensor([m.shape[1]]))[0].cpu().numpy()
    finally:
        encoder.train(was_training)


@torch.no_grad()
def extract_features(cotatron: Cotatron, residual: ResidualEncoder | None, mel,
                     seq: SymbolSequence) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Return ``(L, R, alignment)`` for one utterance; ``R`` is None without an encoder."""
    out = teacher_forced(cotatron, mel, seq)
    lf = linguistic_features(out.alignment, out.text_encoding)[0].cpu().numpy()
    r = residual_features(residual, mel) if residual is not None else None
    return lf, r, out.alignment[0].cpu().numpy()
