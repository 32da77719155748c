"""Audio front end: waveform -> log-mel, MFCC and voicing decisions.

Run: python demos/01_audio_frontend.py
"""
import numpy as np

from cotatron.audio import (
    LOG_FLOOR, SAMPLE_RATE, canonicalize, mel_filterbank, mel_spectrogram, mfcc, voicing_decisions,
)

# %% a half-second tone followed by half a second of silence
t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
x = np.where(t < 0.5, 0.3 * np.sin(2 * np.pi * 150 * t), 0.0)
w = canonicalize(x, SAMPLE_RATE)
print("peak after canonicalize:", float(np.abs(w.samples).max()))

# %% 80-bin log-mel, one frame per 256 samples (plus one)
m = mel_spectrogram(w)
print("mel frames:", m.frames.shape, "expected", len(w) // 256 + 1)
print("silent frames sit at the log floor:", np.allclose(m.frames[-5:], LOG_FLOOR))

fb = mel_filterbank()
print("filterbank:", fb.shape, "lowest band peaks at bin", int(fb[0].argmax()))

# %% 13 MFCCs per frame, used by the speaker classifier
print("mfcc:", mfcc(m).shape)

# %% voiced in the tone, unvoiced in the silence
v = voicing_decisions(w)
half = len(v.flags) // 2
print("voiced fraction, first half: %.2f  second half: %.2f"
      % (np.mean(v.flags[:half - 2]), np.mean(v.flags[half + 2:])))
