"""Transcription-guided speech encoder and many-to-many voice conversion."""
__version__ = "0.1.0"

from .audio import MelSpectrogram, Waveform, load_audio, mel_spectrogram, mfcc, voicing_decisions
from .errors import SpeakerLookupError, TrainingDivergedError, ValidationError
from .text import DEFAULT_TABLE, SymbolSequence, SymbolTable, tokenize

__all__ = [
    "MelSpectrogram", "Waveform", "load_audio", "mel_spectrogram", "mfcc", "voicing_decisions",
    "SpeakerLookupError", "TrainingDivergedError", "ValidationError",
    "DEFAULT_TABLE", "SymbolSequence", "SymbolTable", "tokenize",
]
