"""Synthetic multi-speaker "speech" for desk-scale experiments.

Each letter is rendered as a steady segment: vowels and sonorants are
harmonic complexes shaped by a formant envelope, fricatives and stops are
dense fixed sets of inharmonic partials across their band, spaces are exact
silence. A speaker is a fundamental frequency, a vocal-tract scale applied
to all formants, a spectral tilt and an intonation style (rate and depth of
the pitch contour).
Segment durations are drawn independently of the speaker.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import HOP_LENGTH, SAMPLE_RATE, Waveform, canonicalize, save_wav
from .corpus import Manifest, Utterance

# letter -> (kind, formants Hz or noise band Hz, gain)
PHONES: dict[str, tuple[str, tuple[float, ...], float]] = {
    "a": ("voiced", (730, 1090, 2440), 1.0),
    "e": ("voiced", (530, 1840, 2480), 1.0),
    "i": ("voiced", (270, 2290, 3010), 0.9),
    "o": ("voiced", (570, 840, 2410), 1.0),
    "u": ("voiced", (300, 870, 2240), 0.9),
    "m": ("voiced", (250, 1100, 2300), 0.45),
    "n": ("voiced", (250, 1600, 2600), 0.45),
    "l": ("voiced", (360, 1300, 2700), 0.6),
    "r": ("voiced", (490, 1350, 1690), 0.6),
    "s": ("noise", (4000, 8000), 0.25),
    "f": ("noise", (1500, 7000), 0.12),
    "t": ("noise", (2500, 5500), 0.3),
    "k": ("noise", (1200, 3500), 0.3),
}
CONSONANTS = "mnlrsftk"
VOWELS = "aeiou"
FORMANT_BANDWIDTHS = (90.0, 110.0, 150.0)


@dataclass(frozen=True)
class ToySpeaker:
    name: str
    f0: float
    formant_scale: float
    tilt: float
    # intonation style: contour rate (Hz) and depth (fraction of f0)
    pitch_rate: float = 0.8
    pitch_depth: float = 0.03


DEFAULT_SPEAKERS = (
    ToySpeaker("spk0", 98.0, 0.90, 1.4, 0.5, 0.04),
    ToySpeaker("spk1", 210.0, 1.16, 0.6, 1.8, 0.08),
    ToySpeaker("spk2", 140.0, 1.02, 1.0, 1.1, 0.03),
    ToySpeaker("spk3", 255.0, 1.25, 0.3, 2.4, 0.10),
    ToySpeaker("spk4", 120.0, 0.96, 1.2, 0.8, 0.06),
    ToySpeaker("spk5", 180.0, 1.08, 0.8, 1.5, 0.05),
)


def random_word(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(n_syllables))


def random_sentence(rng: np.random.Generator, n_words: tuple[int, int] = (2, 4)) -> str:
    k = int(rng.integers(n_words[0], n_words[1] + 1))
    return " ".join(random_word(rng, int(rng.integers(1, 3))) for _ in range(k))


def _segment_frames(ch: str, rng: np.random.Generator) -> int:
    if ch == " ":
        return int(rng.integers(2, 4))
    if ch in VOWELS:
        return int(rng.integers(5, 9))
    return int(rng.integers(3, 6))


def _envelope(freqs: np.ndarray, formants, scale: float, tilt: float) -> np.ndarray:
    env = np.zeros_like(freqs)
    for j, (fm, bw) in enumerate(zip(formants, FORMANT_BANDWIDTHS)):
        env += (0.7 ** j) / (1.0 + ((freqs - fm * scale) / (bw * scale)) ** 2)
    return env * (1.0 + freqs / 1000.0) ** (-tilt)


def _frication_lines(ch: str, speaker: ToySpeaker, t: np.ndarray) -> np.ndarray:
    """Noise-like but deterministic source: resolved inharmonic lines across the band.

    Lines are at least 4 STFT bins apart so every frame has the same magnitude
    spectrum; a true noise source would give log-mel frames with large random
    variance that no model can predict.
    """
    lo, hi = np.array(PHONES[ch][1]) * speaker.formant_scale
    hi = min(hi, 0.95 * SAMPLE_RATE / 2)
    g = np.random.default_rng(ord(ch))
    spacing = 4.5 * SAMPLE_RATE / 1024
    freqs = np.arange(lo, hi, spacing)
    freqs = freqs + g.uniform(-0.1, 0.1, len(freqs)) * spacing
    phases = g.uniform(0, 2 * np.pi, len(freqs))
    lines = np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
    # RMS of one quarter, about what a unit-peak Gaussian noise has
    return 0.25 * lines / np.sqrt(len(freqs) / 2.0)


def synthesize(text: str, speaker: ToySpeaker, rng: np.random.Generator,
               sample_rate: int = SAMPLE_RATE, return_spans: bool = False):
    """Render ``text`` (letters from :data:`PHONES` and spaces) for ``speaker``.

    With ``return_spans`` also returns the true symbol index of every mel
    frame (-1 for the leading/trailing silence).
    """
    chars = [c for c in text.lower() if c == " " or c in PHONES]
    durations = [_segment_frames(c, rng) * HOP_LENGTH for c in chars]
    # one lead-in and tail of silence so edge frames are well defined
    lead = 2 * HOP_LENGTH
    n = lead * 2 + sum(durations)
    t = np.arange(n) / sample_rate
    # intonation contour around the speaker's f0; rate and depth are speaker traits
    rate = speaker.pitch_rate * rng.uniform(0.85, 1.15)
    contour = 1.0 + speaker.pitch_depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    f0 = speaker.f0 * contour
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(8000.0 // (speaker.f0 * 0.94))
    harmonic_amp = np.zeros((n_harm, n))
    frication = {c: np.zeros(n) for c in set(chars) if c in PHONES and PHONES[c][0] == "noise"}
    pos = lead
    for c, d in zip(chars, durations):
        if c != " ":
            kind, params, gain = PHONES[c]
            if kind == "voiced":
                freqs = speaker.f0 * np.arange(1, n_harm + 1)
                amp = gain * _envelope(freqs, params, speaker.formant_scale, speaker.tilt)
                harmonic_amp[:, pos:pos + d] = amp[:, None]
            else:
                frication[c][pos:pos + d] = gain
        pos += d
    # 8 ms raised-cosine smoothing of the amplitude tracks
    ramp = np.hanning(int(0.008 * sample_rate) | 1)
    ramp /= ramp.sum()
    harmonic_amp = np.apply_along_axis(lambda r: np.convolve(r, ramp, mode="same"), 1, harmonic_amp)
    k = np.arange(1, n_harm + 1)[:, None]
    voiced = np.sum(harmonic_amp * np.sin(k * phase[None, :]), axis=0)
    x = voiced / (np.max(np.abs(voiced)) + 1e-12)
    for c, track in frication.items():
        x += np.convolve(track, ramp, mode="same") * _frication_lines(c, speaker, t)
    w = canonicalize(x, sample_rate)
    if not return_spans:
        return w
    frame_sym = np.full(1 + n // HOP_LENGTH, -1, dtype=np.int64)
    start = lead // HOP_LENGTH
    for i, d in enumerate(durations):
        frame_sym[start:start + d // HOP_LENGTH] = i
        start += d // HOP_LENGTH
    return w, frame_sym


def make_toy_corpus(root, n_speakers: int = 2, n_transcripts: int = 10, seed: int = 0,
                    n_words: tuple[int, int] = (2, 4),
                    speakers: tuple[ToySpeaker, ...] = DEFAULT_SPEAKERS) -> Manifest:
    """Write a parallel toy corpus (every speaker reads every transcript).

    Produces ``root/wavs/<speaker>_<k>.wav``, a ``root/metadata.tsv`` in the
    flat-tsv layout and ``root/frame_symbols.json`` (true symbol index per
    frame, keyed by audio path); returns the manifest.
    """
    if n_speakers > len(speakers):
        raise ValueError(f"at most {len(speakers)} toy speakers are defined")
    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    texts: list[str] = []
    while len(texts) < n_transcripts:
        s = random_sentence(rng, n_words)
        if s not in texts:
            texts.append(s)
    utts, spans = [], {}
    for spk in speakers[:n_speakers]:
        for k, text in enumerate(texts):
            w, frame_sym = synthesize(text, spk, rng, return_spans=True)
            path = root / "wavs" / f"{spk.name}_{k:03d}.wav"
            save_wav(path, w)
            utts.append(Utterance(str(path), text, spk.name, w.duration))
            spans[str(path)] = frame_sym.tolist()
    (root / "frame_symbols.json").write_text(json.dumps(spans))
    with open(root / "metadata.tsv", "w", encoding="utf-8", newline="") as f:
        wr = csv.writer(f, delimiter="\t", lineterminator="\n")
        wr.writerow(["audio_path", "speaker_id", "transcript", "duration_sec"])
        for u in utts:
            wr.writerow([Path(u.audio_path).relative_to(root).as_posix(), u.speaker_id,
                         u.transcript, repr(u.duration)])
    return Manifest(tuple(utts))


def load_frame_symbols(root) -> dict[str, np.ndarray]:
    data = json.loads((Path(root) / "frame_symbols.json").read_text())
    return {k: np.asarray(v) for k, v in data.items()}


def alignment_accuracy(alignment: np.ndarray, frame_symbols: np.ndarray, tolerance: int = 0) -> float:
    """Fraction of speech frames whose attention argmax is within ``tolerance`` of the true symbol."""
    n = min(len(alignment), len(frame_symbols))
    sel = frame_symbols[:n] >= 0
    am = alignment[:n].argmax(1)
    return float(np.mean(np.abs(am[sel] - frame_symbols[:n][sel]) <= tolerance))
