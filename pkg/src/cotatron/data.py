"""In-memory examples, deterministic batching and padding."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .audio import load_audio, mel_spectrogram
from .corpus import Manifest
from .text import DEFAULT_TABLE, SymbolSequence, SymbolTable, mix_representation, tokenize


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (independent of PYTHONHASHSEED)."""
    h = hashlib.sha256(repr(tuple(parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


@dataclass
class Example:
    key: str
    mel: np.ndarray          # [T, n_mels]
    transcript: str
    speaker: int

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def load_examples(manifest: Manifest, speaker_map: Mapping[str, int], workers: int = 1) -> list[Example]:
    def make(u):
        mel = mel_spectrogram(load_audio(u.audio_path)).frames
        return Example(u.audio_path, mel, u.transcript, speaker_map[u.speaker_id])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(make, manifest))


def symbols_for(ex: Example, epoch: int, seed: int, lexicon=None, mix_prob: float = 0.0,
                table: SymbolTable = DEFAULT_TABLE) -> SymbolSequence:
    """Per-epoch text variant: representation mixing when a lexicon is supplied."""
    if lexicon is None or mix_prob == 0.0:
        return tokenize(ex.transcript, table)
    return mix_representation(ex.transcript, lexicon, mix_prob, derive_seed(seed, epoch, ex.key), table)


def epoch_batches(lengths: Sequence[int], batch_size: int, seed: int, epoch: int,
                  bucket_factor: int = 4) -> list[list[int]]:
    """Shuffled, length-bucketed batches for one epoch; a pure function of its inputs."""
    n = len(lengths)
    rng = np.random.Generator(np.random.Philox(derive_seed(seed, "epoch", epoch)))
    order = rng.permutation(n)
    chunk = max(batch_size * bucket_factor, batch_size)
    batches: list[list[int]] = []
    for start in range(0, n, chunk):
        part = sorted(order[start:start + chunk].tolist(), key=lambda i: (lengths[i], i))
        batches.extend(part[j:j + batch_size] for j in range(0, len(part), batch_size))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


class BatchPlan:
    """Maps a global step to its batch, without hidden iterator state."""

    def __init__(self, lengths: Sequence[int], batch_size: int, seed: int):
        self.lengths = list(lengths)
        self.batch_size = min(batch_size, len(self.lengths))
        self.seed = seed
        self.per_epoch = int(np.ceil(len(self.lengths) / self.batch_size))
        self._cache: dict[int, list[list[int]]] = {}

    def epoch_of(self, step: int) -> int:
        return step // self.per_epoch

    def batch(self, step: int) -> list[int]:
        epoch = self.epoch_of(step)
        if epoch not in self._cache:
            self._cache = {epoch: epoch_batches(self.lengths, self.batch_size, self.seed, epoch)}
        plan = self._cache[epoch]
        return plan[step % self.per_epoch] if step % self.per_epoch < len(plan) else plan[-1]


def pad_mels(mels: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([m.shape[0] for m in mels])
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1], dtype=dtype)
    for i, m in enumerate(mels):
        out[i, : m.shape[0]] = torch.as_tensor(m, dtype=dtype)
    return out, lengths


def pad_ids(seqs: Sequence[SymbolSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs])
    out = torch.zeros(len(seqs), int(lengths.max()), dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s.ids)
    return out, lengths
