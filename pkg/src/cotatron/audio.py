"""Audio loading, log mel analysis, MFCCs and a simple voicing detector.

All functions here are pure numpy; the frame grid is shared by
:func:`mel_spectrogram` and :func:`voicing_decisions` so that per-frame
comparisons line up.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy.fft import dct, idct
from scipy.signal import resample_poly

from .errors import ValidationError

log = logging.getLogger(__name__)

SAMPLE_RATE = 22050
N_FFT = 1024
WIN_LENGTH = 1024
HOP_LENGTH = 256
N_MELS = 80
FMIN = 70.0
FMAX = 8000.0
CLAMP_FLOOR = 1e-5
PEAK_LEVEL = 0.95
LOG_FLOOR = float(np.log(CLAMP_FLOOR))


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS
    fmin: float = FMIN
    fmax: float = FMAX
    clamp_floor: float = CLAMP_FLOOR
    mel_scale: str = "htk"
    center: bool = True
    pad_mode: str = "reflect"

    def as_dict(self) -> dict:
        return dict(self.__dict__)


DEFAULT_MEL = MelConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValidationError(f"waveform must be 1-D, got shape {self.samples.shape}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Log mel frames, shape ``[T_frames, n_mels]``."""

    frames: np.ndarray
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.n_mels:
            raise ValidationError(f"mel frames must be [T, {self.n_mels}], got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class VoicingDecisions:
    flags: np.ndarray
    frame_rate: float = SAMPLE_RATE / HOP_LENGTH
    scores: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.flags)


def canonicalize(samples: np.ndarray, sample_rate: int, peak: float = PEAK_LEVEL) -> Waveform:
    """Downmix to mono, resample to 22050 Hz and peak-normalize.

    Input that is already canonical (mono, 22050 Hz, peak == ``peak``) is
    returned bit-identical.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise ValidationError("audio has zero length")
    if sample_rate != SAMPLE_RATE:
        ratio = Fraction(SAMPLE_RATE, sample_rate)
        x = resample_poly(x, ratio.numerator, ratio.denominator)
    x = x.astype(np.float32)
    current = float(np.max(np.abs(x)))
    if current > 0 and current != np.float32(peak):
        x = (x * (np.float32(peak) / np.float32(current))).astype(np.float32)
    return Waveform(x, SAMPLE_RATE)


def load_audio(path: str | Path, peak: float = PEAK_LEVEL) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"audio file not found: {path}")
    try:
        data, sr = sf.read(str(path), dtype="float64", always_2d=False)
    except RuntimeError as exc:
        raise OSError(f"cannot decode {path}: {exc}") from exc
    return canonicalize(data, sr, peak)


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write 16-bit PCM."""
    sf.write(str(path), np.clip(w.samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16")


def audio_duration(path: str | Path) -> float:
    info = sf.info(str(path))
    return info.frames / info.samplerate


# --- mel scale -------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft//2 + 1]`` with area normalization."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (fft_freqs[None] - lower) / (center - lower)
    falling = (upper - fft_freqs[None]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (upper - lower))
    return weights


_FB_CACHE: dict[MelConfig, np.ndarray] = {}


def _filterbank(cfg: MelConfig) -> np.ndarray:
    if cfg not in _FB_CACHE:
        _FB_CACHE[cfg] = mel_filterbank(cfg)
    return _FB_CACHE[cfg]


# --- framing / STFT ----------------------------------------------------------

def frame_signal(x: np.ndarray, frame_length: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Centered, reflect-padded frames ``[floor(n/hop)+1, frame_length]``."""
    x = np.asarray(x)
    if len(x) <= frame_length // 2:
        raise ValidationError(
            f"audio of {len(x)} samples is shorter than one analysis window ({frame_length})")
    padded = np.pad(x, frame_length // 2, mode="reflect")
    n_frames = 1 + len(x) // hop
    return np.lib.stride_tricks.sliding_window_view(padded, frame_length)[::hop][:n_frames]


def stft(x: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Complex STFT ``[T, n_fft//2 + 1]``."""
    window = np.hanning(cfg.win_length + 1)[:-1]  # periodic Hann
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg.n_fft, cfg.hop_length)
    return np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1)


def mel_spectrogram(w: Waveform, cfg: MelConfig = DEFAULT_MEL) -> MelSpectrogram:
    if len(w.samples) < cfg.win_length:
        raise ValidationError(
            f"audio of {len(w.samples)} samples is shorter than one window ({cfg.win_length})")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ _filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.clamp_floor)).astype(np.float32),
                          cfg.hop_length, cfg.n_mels)


def mfcc(m: MelSpectrogram | np.ndarray, n_coeffs: int = 13) -> np.ndarray:
    """Orthonormal DCT-II over the mel axis, first ``n_coeffs`` kept."""
    frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m)
    n_mels = frames.shape[-1]
    if not 1 <= n_coeffs <= n_mels:
        raise ValidationError(f"n_coeffs must be in [1, {n_mels}], got {n_coeffs}")
    return dct(np.asarray(frames, dtype=np.float64), type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def inverse_mfcc(c: np.ndarray, n_mels: int = N_MELS) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] < n_mels:
        pad = [(0, 0)] * (c.ndim - 1) + [(0, n_mels - c.shape[-1])]
        c = np.pad(c, pad)
    return idct(c, type=2, norm="ortho", axis=-1)


# --- voicing ---------------------------------------------------------------

VAD_FMIN = 60.0
VAD_FMAX = 400.0
VAD_DB_LOW = -50.0
VAD_DB_HIGH = -30.0


def voicing_scores(w: Waveform, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Per-frame voicing score in [0, 1].

    score = periodicity * loudness, where periodicity is the peak normalized
    autocorrelation over lags for 60-400 Hz and loudness ramps linearly from
    0 at -50 dBFS to 1 at -30 dBFS (frame RMS).
    """
    frames = frame_signal(np.asarray(w.samples, dtype=np.float64), cfg.n_fft, cfg.hop_length)
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = frames.shape[1]
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    db = 20.0 * np.log10(np.maximum(rms, 1e-10))
    loudness = np.clip((db - VAD_DB_LOW) / (VAD_DB_HIGH - VAD_DB_LOW), 0.0, 1.0)

    lag_min = int(np.floor(w.sample_rate / VAD_FMAX))
    lag_max = int(np.ceil(w.sample_rate / VAD_FMIN))
    spec = np.fft.rfft(frames, n=2 * n, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, : lag_max + 1]
    # energy of the overlapping head/tail segments for each lag
    sq = frames ** 2
    cum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(lag_min, lag_max + 1)
    head = cum[:, n - lags]
    tail = cum[:, n:n + 1] - cum[:, lags]
    denom = np.sqrt(np.maximum(head * tail, 1e-20))
    periodicity = np.clip(np.max(acf[:, lags] / denom, axis=1), 0.0, 1.0)
    periodicity[rms <= 1e-10] = 0.0
    return periodicity * loudness


def voicing_decisions(w: Waveform, threshold: float = 0.7,
                      cfg: MelConfig = DEFAULT_MEL) -> VoicingDecisions:
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    scores = voicing_scores(w, cfg)
    return VoicingDecisions(scores >= threshold, w.sample_rate / cfg.hop_length, scores)
