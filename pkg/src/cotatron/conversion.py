"""Inference pipeline: source speech + transcript + target speaker -> converted mel."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .archive import save_mel
from .audio import DEFAULT_MEL, MelConfig, MelSpectrogram, Waveform, load_audio, mel_filterbank, mel_spectrogram, save_wav
from .errors import SpeakerLookupError, ValidationError
from .features import teacher_forced, linguistic_features
from .text import SymbolTable, tokenize
from .training import VCSystem, load_cotatron, load_vc
from .tts import Cotatron


# --- fallback vocoder ----------------------------------------------------------

def _window(cfg: MelConfig) -> np.ndarray:
    return np.hanning(cfg.win_length + 1)[:-1]


def _stft(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + len(x) // cfg.hop_length
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.n_fft)[::cfg.hop_length][:n_frames]
    return np.fft.rfft(frames * _window(cfg), axis=-1)


def _istft(spec: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Weighted overlap-add inverse of a centered STFT; output has (T-1)*hop samples."""
    n_frames = spec.shape[0]
    win = _window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1) * win
    total = cfg.n_fft + cfg.hop_length * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * cfg.hop_length
        out[s:s + cfg.n_fft] += frames[t]
        norm[s:s + cfg.n_fft] += win ** 2
    out /= np.maximum(norm, 1e-8)
    pad = cfg.n_fft // 2
    return out[pad:pad + cfg.hop_length * (n_frames - 1)]


def mel_to_audio_fallback(m: MelSpectrogram | np.ndarray, n_iters: int = 60,
                          cfg: MelConfig = DEFAULT_MEL) -> Waveform:
    """Low-fidelity diagnostic inversion: filterbank pseudo-inverse + Griffin-Lim.

    Starts from zero phase, so ``n_iters=0`` is a zero-phase reconstruction.
    """
    frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m)
    mel_mag = np.exp(np.asarray(frames, dtype=np.float64))
    mag = np.maximum(mel_mag @ np.linalg.pinv(mel_filterbank(cfg)).T, 0.0)
    spec = mag.astype(np.complex128)
    x = _istft(spec, cfg)
    for _ in range(n_iters):
        if len(x) <= cfg.n_fft // 2:
            break
        rebuilt = _stft(x, cfg)[: len(mag)]
        if rebuilt.shape[0] < len(mag):
            rebuilt = np.pad(rebuilt, ((0, len(mag) - rebuilt.shape[0]), (0, 0)))
        phase = np.exp(1j * np.angle(rebuilt))
        x = _istft(mag * phase, cfg)
    return Waveform(x.astype(np.float32), cfg.sample_rate)


# --- conversion ------------------------------------------------------------------

@dataclass
class ConversionResult:
    mel: np.ndarray
    source_mel: np.ndarray
    alignment: np.ndarray
    metadata: dict = field(default_factory=dict)
    waveform: Waveform | None = None


def _digest(audio_path: Path, transcript: str) -> str:
    h = hashlib.sha256()
    h.update(Path(audio_path).read_bytes())
    h.update(b"\0")
    h.update(transcript.encode("utf-8"))
    return h.hexdigest()


class Converter:
    """Holds a frozen TTS encoder and a trained VC system; conversion is stateless."""

    def __init__(self, cotatron: Cotatron, system: VCSystem, speakers: list[str],
                 table: SymbolTable | None = None, mel_cfg: MelConfig = DEFAULT_MEL):
        self.cotatron = cotatron.eval()
        self.system = system.eval()
        self.speakers = list(speakers)
        self.table = table or SymbolTable()
        self.mel_cfg = mel_cfg

    @classmethod
    def from_checkpoints(cls, cotatron_ckpt, vc_ckpt) -> "Converter":
        cotatron, payload = load_cotatron(cotatron_ckpt)
        system, vc_payload = load_vc(vc_ckpt)
        return cls(cotatron, system, vc_payload["speakers"], SymbolTable.from_json(payload["symbols"]))

    def speaker_row(self, speaker: str) -> int:
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise SpeakerLookupError(speaker) from None

    @torch.no_grad()
    def convert_mel(self, mel: np.ndarray, transcript: str, target_speaker: str) -> tuple[np.ndarray, np.ndarray]:
        if not transcript or not transcript.strip():
            raise ValidationError("transcript is empty")
        row = self.speaker_row(target_speaker)
        # running statistics, no dropout, whatever mode the caller left the modules in
        self.cotatron.eval()
        self.system.eval()
        seq = tokenize(transcript, self.table)
        out = teacher_forced(self.cotatron, mel, seq)
        lf = linguistic_features(out.alignment, out.text_encoding)
        dtype = next(self.system.parameters()).dtype
        m = torch.as_tensor(np.asarray(mel), dtype=dtype).unsqueeze(0)
        lengths = torch.tensor([m.shape[1]])
        pred = self.system(lf.to(dtype), m, lengths, torch.tensor([row]))
        return pred[0].cpu().numpy().astype(np.float32), out.alignment[0].cpu().numpy()

    def convert(self, audio, transcript: str, target_speaker: str, out_dir=None,
                source_speaker: str | None = None, vocoder_iters: int | None = None) -> ConversionResult:
        audio = Path(audio)
        if not transcript or not transcript.strip():
            raise ValidationError("transcript is empty")
        self.speaker_row(target_speaker)
        src = mel_spectrogram(load_audio(audio), self.mel_cfg).frames
        mel, alignment = self.convert_mel(src, transcript, target_speaker)
        meta = {
            "source_audio": str(audio),
            "transcript": transcript,
            "source_speaker": source_speaker,
            "target_speaker": target_speaker,
            "n_frames": int(mel.shape[0]),
            "n_symbols": int(alignment.shape[1]),
            "mse_vs_source": float(np.mean((mel - src) ** 2)),
            "input_sha256": _digest(audio, transcript),
        }
        result = ConversionResult(mel, src, alignment, meta)
        if vocoder_iters is not None:
            result.waveform = mel_to_audio_fallback(mel, vocoder_iters, self.mel_cfg)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{audio.stem}_to_{target_speaker}"
            save_mel(out_dir / f"{stem}.mel", mel)
            if result.waveform is not None:
                w = result.waveform
                peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
                scaled = w.samples * (0.95 / peak) if peak > 0.95 else w.samples
                save_wav(out_dir / f"{stem}.wav", Waveform(scaled, w.sample_rate))
                meta["wav"] = f"{stem}.wav"
            meta["mel"] = f"{stem}.mel"
            (out_dir / f"{stem}.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
        return result


def convert(audio, transcript: str, target_speaker: str, cotatron_ckpt, vc_ckpt, out_dir=None,
            **kw) -> ConversionResult:
    return Converter.from_checkpoints(cotatron_ckpt, vc_ckpt).convert(
        audio, transcript, target_speaker, out_dir=out_dir, **kw)
