"""Multispeaker Tacotron2-style network used as the transcription-guided encoder.

Text encoder, reference-style speaker encoder, autoregressive decoder with
Dynamic Convolution Attention, post-net and an auxiliary speaker classifier.
All batched tensors are ``[batch, time, channels]`` unless noted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import betaln, gammaln
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .audio import LOG_FLOOR, N_MELS
from .errors import ValidationError
from .text import DEFAULT_TABLE


@dataclass
class CotatronConfig:
    n_symbols: int = len(DEFAULT_TABLE)
    n_speakers: int = 1
    n_mels: int = N_MELS
    max_text_len: int = 400
    # text encoder
    symbol_dim: int = 512
    encoder_dim: int = 512
    encoder_kernel: int = 5
    encoder_n_conv: int = 3
    encoder_dropout: float = 0.5
    # speaker encoder
    speaker_channels: tuple = (32, 32, 64, 64, 128, 128)
    speaker_dim: int = 256
    min_speaker_frames: int = 64
    # decoder
    prenet_dims: tuple = (256, 256)
    prenet_dropout: float = 0.5
    attention_rnn_dim: int = 1024
    decoder_rnn_dim: int = 1024
    attention_dropout: float = 0.1
    decoder_dropout: float = 0.1
    # dynamic convolution attention
    attention_dim: int = 128
    static_filters: int = 8
    static_kernel: int = 21
    dynamic_filters: int = 8
    dynamic_kernel: int = 21
    prior_length: int = 11
    prior_alpha: float = 0.1
    prior_beta: float = 0.9
    prior_floor: float = 1e-6
    # post-net
    postnet_dim: int = 512
    postnet_kernel: int = 5
    postnet_n_conv: int = 5
    postnet_dropout: float = 0.5
    # speaker classification head
    head_hidden: int = 256
    head_dropout: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CotatronConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}
        return cls(**kw)

    @classmethod
    def toy(cls, **overrides) -> "CotatronConfig":
        """Small configuration for desk-scale experiments and tests."""
        base = dict(symbol_dim=64, encoder_dim=64, speaker_channels=(8, 8, 16, 16, 32, 32),
                    speaker_dim=32, prenet_dims=(64, 64), attention_rnn_dim=128,
                    decoder_rnn_dim=128, attention_dim=32, postnet_dim=64, head_hidden=32)
        base.update(overrides)
        return cls(**base)


def sequence_mask(lengths: Tensor, max_len: int | None = None) -> Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def beta_binomial_prior(length: int, alpha: float, beta: float) -> np.ndarray:
    """Beta-binomial pmf over ``k = 0..length-1`` (``n = length - 1``)."""
    n = length - 1
    k = np.arange(length, dtype=np.float64)
    log_comb = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    return np.exp(log_comb + betaln(k + alpha, n - k + beta) - betaln(alpha, beta))


def _reduce_length(lengths: Tensor) -> Tensor:
    # output length of a (k=3, s=2, p=1) convolution
    return torch.div(lengths + 1, 2, rounding_mode="floor")


# --- text encoder --------------------------------------------------------------

class TextEncoder(nn.Module):
    """embedding -> 3x(conv, BN, ReLU, dropout) -> BiLSTM."""

    def __init__(self, cfg: CotatronConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.n_symbols, cfg.symbol_dim)
        std = np.sqrt(2.0 / (cfg.n_symbols + cfg.symbol_dim))
        val = np.sqrt(3.0) * std
        self.embedding.weight.data.uniform_(-val, val)
        convs = []
        for i in range(cfg.encoder_n_conv):
            d_in = cfg.symbol_dim if i == 0 else cfg.encoder_dim
            convs.append(nn.ModuleDict({
                "conv": nn.Conv1d(d_in, cfg.encoder_dim, cfg.encoder_kernel,
                                  padding=cfg.encoder_kernel // 2),
                "bn": nn.BatchNorm1d(cfg.encoder_dim),
            }))
        self.convs = nn.ModuleList(convs)
        self.lstm = nn.LSTM(cfg.encoder_dim, cfg.encoder_dim // 2, batch_first=True,
                            bidirectional=True)

    def forward(self, ids: Tensor, lengths: Tensor) -> Tensor:
        if ids.shape[1] > self.cfg.max_text_len:
            raise ValidationError(
                f"text of {ids.shape[1]} symbols exceeds max_text_len={self.cfg.max_text_len}")
        mask = sequence_mask(lengths, ids.shape[1]).unsqueeze(1).to(self.embedding.weight.dtype)
        x = self.embedding(ids).transpose(1, 2) * mask
        for layer in self.convs:
            x = F.relu(layer["bn"](layer["conv"](x)))
            x = F.dropout(x, self.cfg.encoder_dropout, self.training) * mask
        packed = pack_padded_sequence(x.transpose(1, 2), lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return out


# --- speaker encoder --------------------------------------------------------------

class SpeakerEncoder(nn.Module):
    """Six strided 3x3 conv layers over (time, mel), then a GRU; final state is z_id."""

    def __init__(self, cfg: CotatronConfig):
        super().__init__()
        self.cfg = cfg
        chans = (1,) + tuple(cfg.speaker_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(len(chans) - 1))
        self.bns = nn.ModuleList(nn.BatchNorm2d(c) for c in chans[1:])
        mel = cfg.n_mels
        for _ in self.convs:
            mel = (mel + 1) // 2
        self.out_mel = mel
        self.gru = nn.GRU(chans[-1] * mel, cfg.speaker_dim, batch_first=True)

    def output_shape(self, n_frames: int) -> tuple[int, int]:
        t, m = max(n_frames, self.cfg.min_speaker_frames), self.cfg.n_mels
        for _ in self.convs:
            t, m = (t + 1) // 2, (m + 1) // 2
        return t, m

    def forward(self, mel: Tensor, lengths: Tensor) -> Tensor:
        if mel.shape[1] == 0 or bool((lengths <= 0).any()):
            raise ValidationError("speaker encoder needs at least one frame")
        min_t = self.cfg.min_speaker_frames
        eff = torch.clamp(lengths, min=min_t)
        width = max(mel.shape[1], min_t)
        if width > mel.shape[1]:
            mel = F.pad(mel, (0, 0, 0, width - mel.shape[1]))
        t = torch.arange(width, device=mel.device)[None, :]
        # short inputs are right-padded with the log floor; batch padding is zero
        floor_region = (t >= lengths[:, None]) & (t < eff[:, None])
        mel = torch.where(floor_region[..., None], torch.full_like(mel, LOG_FLOOR), mel)
        mel = mel * (t < eff[:, None])[..., None].to(mel.dtype)
        x = mel.unsqueeze(1)
        cur = eff
        for conv, bn in zip(self.convs, self.bns):
            x = F.relu(bn(conv(x)))
            cur = _reduce_length(cur)
            x = x * sequence_mask(cur, x.shape[2])[:, None, :, None].to(x.dtype)
        b, c, tt, m = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, tt, c * m)
        packed = pack_padded_sequence(x, cur.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.gru(packed)
        return h[-1]


# --- decoder pieces ----------------------------------------------------------------

class Prenet(nn.Module):
    def __init__(self, d_in: int, dims, dropout: float):
        super().__init__()
        sizes = [d_in] + list(dims)
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(sizes[:-1], sizes[1:]))
        self.dropout = dropout

    def forward(self, x: Tensor) -> Tensor:
        for lin in self.layers:
            x = F.dropout(F.relu(lin(x)), self.dropout, self.training)
        return x


class DynamicConvolutionAttention(nn.Module):
    """Location-relative attention driven by static, dynamic and prior filters.

    energies = v . tanh(W f + U g + b) + log(max(P * a_prev, floor)), where f/g
    are static/dynamic filter responses to the previous attention row and P is a
    causal beta-binomial prior.
    """

    def __init__(self, query_dim: int, cfg: CotatronConfig):
        super().__init__()
        self.cfg = cfg
        self.static_conv = nn.Conv1d(1, cfg.static_filters, cfg.static_kernel,
                                     padding=cfg.static_kernel // 2, bias=False)
        self.static_proj = nn.Linear(cfg.static_filters, cfg.attention_dim, bias=False)
        self.dynamic_hidden = nn.Linear(query_dim, cfg.attention_dim)
        self.dynamic_filters = nn.Linear(cfg.attention_dim, cfg.dynamic_filters * cfg.dynamic_kernel,
                                         bias=False)
        self.dynamic_proj = nn.Linear(cfg.dynamic_filters, cfg.attention_dim)
        self.v = nn.Linear(cfg.attention_dim, 1, bias=False)
        prior = beta_binomial_prior(cfg.prior_length, cfg.prior_alpha, cfg.prior_beta)
        # flipped so that conv1d with left padding computes sum_k P[k] a[j-k]
        self.register_buffer("prior_filter", torch.tensor(prior[::-1].copy(), dtype=torch.float32)
                             .view(1, 1, -1))

    def prior_term(self, prev: Tensor) -> Tensor:
        k = self.prior_filter.shape[-1]
        p = F.conv1d(F.pad(prev.unsqueeze(1), (k - 1, 0)), self.prior_filter.to(prev.dtype))
        return torch.log(torch.clamp(p.squeeze(1), min=self.cfg.prior_floor))

    def energies(self, query: Tensor, prev: Tensor) -> Tensor:
        b, n = prev.shape
        f = self.static_conv(prev.unsqueeze(1)).transpose(1, 2)  # [B, N, Fs]
        filt = self.dynamic_filters(torch.tanh(self.dynamic_hidden(query)))
        filt = filt.view(b * self.cfg.dynamic_filters, 1, self.cfg.dynamic_kernel)
        g = F.conv1d(prev.unsqueeze(0), filt, padding=self.cfg.dynamic_kernel // 2, groups=b)
        g = g.view(b, self.cfg.dynamic_filters, n).transpose(1, 2)  # [B, N, Fd]
        e = self.v(torch.tanh(self.static_proj(f) + self.dynamic_proj(g))).squeeze(-1)
        return e + self.prior_term(prev)

    def forward(self, query: Tensor, prev: Tensor, mask: Tensor) -> Tensor:
        e = self.energies(query, prev).masked_fill(~mask, float("-inf"))
        return torch.softmax(e, dim=-1)


class DecoderState(NamedTuple):
    attention_hidden: Tensor
    attention_cell: Tensor
    decoder_hidden: Tensor
    decoder_cell: Tensor
    attention_weights: Tensor
    context: Tensor


class Decoder(nn.Module):
    def __init__(self, cfg: CotatronConfig):
        super().__init__()
        self.cfg = cfg
        mem_dim = cfg.encoder_dim + cfg.speaker_dim
        self.memory_dim = mem_dim
        self.prenet = Prenet(cfg.n_mels, cfg.prenet_dims, cfg.prenet_dropout)
        self.attention_rnn = nn.LSTMCell(cfg.prenet_dims[-1] + mem_dim, cfg.attention_rnn_dim)
        self.attention = DynamicConvolutionAttention(cfg.attention_rnn_dim, cfg)
        self.decoder_rnn = nn.LSTMCell(cfg.attention_rnn_dim + mem_dim, cfg.decoder_rnn_dim)
        self.frame_proj = nn.Linear(cfg.decoder_rnn_dim + mem_dim, cfg.n_mels)

    def init_state(self, memory: Tensor) -> DecoderState:
        b, n, d = memory.shape
        z = memory.new_zeros
        attn = z(b, n)
        attn[:, 0] = 1.0
        context = torch.bmm(attn.unsqueeze(1), memory).squeeze(1)
        return DecoderState(z(b, self.cfg.attention_rnn_dim), z(b, self.cfg.attention_rnn_dim),
                            z(b, self.cfg.decoder_rnn_dim), z(b, self.cfg.decoder_rnn_dim),
                            attn, context)

    def step(self, prev_frame: Tensor, state: DecoderState, memory: Tensor,
             mask: Tensor) -> tuple[Tensor, Tensor, DecoderState]:
        if memory.shape[-1] != self.memory_dim or state.attention_weights.shape != memory.shape[:2]:
            raise ValidationError(
                f"decoder state {tuple(state.attention_weights.shape)} does not match memory "
                f"{tuple(memory.shape)}")
        x = self.prenet(prev_frame)
        h_a, c_a = self.attention_rnn(torch.cat([x, state.context], -1),
                                      (state.attention_hidden, state.attention_cell))
        h_a = F.dropout(h_a, self.cfg.attention_dropout, self.training)
        attn = self.attention(h_a, state.attention_weights, mask)
        context = torch.bmm(attn.unsqueeze(1), memory).squeeze(1)
        h_d, c_d = self.decoder_rnn(torch.cat([h_a, context], -1),
                                    (state.decoder_hidden, state.decoder_cell))
        h_d = F.dropout(h_d, self.cfg.decoder_dropout, self.training)
        frame = self.frame_proj(torch.cat([h_d, context], -1))
        return frame, attn, DecoderState(h_a, c_a, h_d, c_d, attn, context)


class Postnet(nn.Module):
    def __init__(self, cfg: CotatronConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.n_mels] + [cfg.postnet_dim] * (cfg.postnet_n_conv - 1) + [cfg.n_mels]
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, cfg.postnet_kernel, padding=cfg.postnet_kernel // 2)
            for a, b in zip(dims[:-1], dims[1:]))
        self.bns = nn.ModuleList(nn.BatchNorm1d(b) for b in dims[1:])

    def forward(self, mel: Tensor, mask: Tensor) -> Tensor:
        m = mask.unsqueeze(1).to(mel.dtype)
        x = mel.transpose(1, 2) * m
        last = len(self.convs) - 1
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = bn(conv(x))
            if i < last:
                x = torch.tanh(x)
            x = F.dropout(x, self.cfg.postnet_dropout, self.training) * m
        return x.transpose(1, 2)


class SpeakerClassifier(nn.Module):
    def __init__(self, cfg: CotatronConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cfg.speaker_dim, cfg.head_hidden), nn.ReLU(),
                                 nn.Dropout(cfg.head_dropout), nn.Linear(cfg.head_hidden, cfg.n_speakers))

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


# --- full model --------------------------------------------------------------

@dataclass
class CotatronOutput:
    mel_pre: Tensor
    mel_post: Tensor
    alignment: Tensor          # [B, T_dec, N]
    speaker_logits: Tensor
    speaker_rep: Tensor        # z_id, [B, speaker_dim]
    text_encoding: Tensor      # [B, N, E_text]
    contexts: Tensor           # [B, T_dec, E_text + speaker_dim]
    mel_lengths: Tensor
    text_lengths: Tensor
    input_frames: Optional[Tensor] = field(default=None, repr=False)


class Cotatron(nn.Module):
    def __init__(self, cfg: CotatronConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.postnet = Postnet(cfg)
        self.speaker_head = SpeakerClassifier(cfg)

    def memory(self, text_encoding: Tensor, z: Tensor) -> Tensor:
        n = text_encoding.shape[1]
        return torch.cat([text_encoding, z.unsqueeze(1).expand(-1, n, -1)], dim=-1)

    def forward(self, mel: Tensor, mel_lengths: Tensor, text: Tensor, text_lengths: Tensor,
                tf_rate: float = 1.0, generator: torch.Generator | None = None,
                speaker_rep: Tensor | None = None, keep_inputs: bool = False) -> CotatronOutput:
        """Run ``T_frames`` decoder steps with per-step random teacher forcing."""
        if not 0.0 <= tf_rate <= 1.0:
            raise ValidationError(f"tf_rate must be in [0, 1], got {tf_rate}")
        if mel.dim() != 3 or mel.shape[-1] != self.cfg.n_mels:
            raise ValidationError(f"mel must be [B, T, {self.cfg.n_mels}], got {tuple(mel.shape)}")
        if text.shape[0] != mel.shape[0]:
            raise ValidationError("text and mel batch sizes differ")
        b, t_max, _ = mel.shape
        enc = self.text_encoder(text, text_lengths)
        z = self.speaker_encoder(mel, mel_lengths) if speaker_rep is None else speaker_rep
        memory = self.memory(enc, z)
        text_mask = sequence_mask(text_lengths, text.shape[1])
        use_gt = torch.rand((b, t_max), generator=generator, dtype=torch.float64) < tf_rate
        use_gt = use_gt.to(mel.device)

        state = self.decoder.init_state(memory)
        prev_pred = mel.new_zeros(b, self.cfg.n_mels)
        frames, attns, contexts, inputs = [], [], [], []
        for t in range(t_max):
            if t == 0:
                prev = mel.new_zeros(b, self.cfg.n_mels)
            else:
                prev = torch.where(use_gt[:, t, None], mel[:, t - 1], prev_pred.detach())
            if keep_inputs:
                inputs.append(prev)
            frame, attn, state = self.decoder.step(prev, state, memory, text_mask)
            frames.append(frame)
            attns.append(attn)
            contexts.append(state.context)
            prev_pred = frame
        mel_mask = sequence_mask(mel_lengths, t_max)
        mel_pre = torch.stack(frames, 1) * mel_mask.unsqueeze(-1).to(mel.dtype)
        mel_post = mel_pre + self.postnet(mel_pre, mel_mask)
        return CotatronOutput(
            mel_pre=mel_pre, mel_post=mel_post, alignment=torch.stack(attns, 1),
            speaker_logits=self.speaker_head(z), speaker_rep=z, text_encoding=enc,
            contexts=torch.stack(contexts, 1), mel_lengths=mel_lengths, text_lengths=text_lengths,
            input_frames=torch.stack(inputs, 1) if keep_inputs else None)


def masked_mse(pred: Tensor, target: Tensor, lengths: Tensor | None = None) -> Tensor:
    """Mean squared error over valid frames only (``[B, T, C]`` inputs)."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if lengths is None:
        return torch.mean((pred - target) ** 2)
    mask = sequence_mask(lengths, pred.shape[1]).unsqueeze(-1).to(pred.dtype)
    return torch.sum(((pred - target) ** 2) * mask) / (mask.sum() * pred.shape[-1])


def per_item_mse(pred: Tensor, target: Tensor, lengths: Tensor) -> Tensor:
    mask = sequence_mask(lengths, pred.shape[1]).unsqueeze(-1).to(pred.dtype)
    return torch.sum(((pred - target) ** 2) * mask, dim=(1, 2)) / (lengths.to(pred.dtype) * pred.shape[-1])


def cotatron_loss(out: CotatronOutput, target: Tensor, speaker_labels: Tensor,
                  lengths: Tensor | None = None, id_weight: float = 1.0) -> tuple[Tensor, dict]:
    """MSE(pre) + MSE(post) + cross-entropy of the speaker head."""
    if lengths is None:
        lengths = out.mel_lengths
    pre = masked_mse(out.mel_pre, target, lengths)
    post = masked_mse(out.mel_post, target, lengths)
    ce = F.cross_entropy(out.speaker_logits, speaker_labels)
    total = pre + post + id_weight * ce
    parts = {"mel_pre": pre.item(), "mel_post": post.item(), "speaker_ce": ce.item(),
             "total": total.item()}
    return total, parts
