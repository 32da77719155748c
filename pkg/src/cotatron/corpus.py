"""Corpus manifests and the train/val/test preparation rules."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .audio import audio_duration
from .errors import ValidationError
from .text import normalize_text

log = logging.getLogger(__name__)

LAYOUTS = ("vctk-like", "libritts-like", "flat-tsv")
SPLIT_TAGS = ("train", "val", "test", "unsplit")
MANIFEST_HEADER = ("audio_path", "speaker_id", "transcript", "duration_sec")
AUDIO_SUFFIXES = (".wav", ".flac")


@dataclass(frozen=True)
class Utterance:
    audio_path: str
    transcript: str
    speaker_id: str
    duration: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValidationError(f"{self.audio_path}: duration must be positive")
        if not self.transcript.strip():
            raise ValidationError(f"{self.audio_path}: empty transcript")
        if not self.speaker_id:
            raise ValidationError(f"{self.audio_path}: empty speaker id")


@dataclass(frozen=True)
class Manifest:
    utterances: tuple[Utterance, ...] = ()
    split_tag: str = "unsplit"
    skipped: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if self.split_tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split tag {self.split_tag!r}")
        paths = [u.audio_path for u in self.utterances]
        if len(set(paths)) != len(paths):
            raise ValidationError("audio paths must be unique within a manifest")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})

    @property
    def total_seconds(self) -> float:
        return float(sum(u.duration for u in self.utterances))

    def with_tag(self, tag: str) -> "Manifest":
        return replace(self, split_tag=tag)

    def save(self, path) -> None:
        write_manifest(path, self)


# --- I/O ----------------------------------------------------------------------

def write_manifest(path, m: Manifest) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(MANIFEST_HEADER)
        for u in m.utterances:
            w.writerow([u.audio_path, u.speaker_id, u.transcript, repr(float(u.duration))])


def read_manifest(path, split_tag: str | None = None) -> Manifest:
    path = Path(path)
    if split_tag is None:
        parts = path.name.split(".")
        split_tag = parts[-2] if len(parts) >= 3 and parts[-2] in SPLIT_TAGS else "unsplit"
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    utts = [Utterance(r["audio_path"], r["transcript"], r["speaker_id"], float(r["duration_sec"]))
            for r in rows]
    return Manifest(tuple(utts), split_tag)


def write_splits(out_dir, name: str, splits: dict[str, Manifest]) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for tag, m in splits.items():
        p = out_dir / f"{name}.{tag}.tsv"
        write_manifest(p, m)
        paths[tag] = p
    return paths


# --- layouts ----------------------------------------------------------------------

def _scan_vctk(root: Path):
    """``wav48/<spk>/<utt>.wav`` paired with ``txt/<spk>/<utt>.txt``."""
    wav_root = next((root / d for d in ("wav48", "wav48_silence_trimmed", "wav") if (root / d).is_dir()), root)
    for audio in sorted(p for p in wav_root.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES):
        spk = audio.parent.name
        txt = root / "txt" / spk / (audio.stem + ".txt")
        yield audio, (txt if txt.is_file() else None), spk


def _scan_libritts(root: Path):
    """``<spk>/<chapter>/<utt>.wav`` with ``<utt>.normalized.txt`` next to it."""
    for audio in sorted(p for p in root.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES):
        txt = None
        for suffix in (".normalized.txt", ".original.txt", ".txt"):
            cand = audio.with_name(audio.stem + suffix)
            if cand.is_file():
                txt = cand
                break
        rel = audio.relative_to(root).parts
        spk = rel[0] if len(rel) > 1 else audio.stem.split("_")[0]
        yield audio, txt, spk


def _read_flat_tsv(root: Path, workers: int) -> Manifest:
    tsv = root if root.is_file() else root / "metadata.tsv"
    if not tsv.is_file():
        raise FileNotFoundError(f"no metadata.tsv in {root}")
    base = tsv.parent
    with open(tsv, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    missing = {"audio_path", "speaker_id", "transcript"} - set(rows[0] if rows else {})
    if rows and missing:
        raise ValidationError(f"{tsv}: missing columns {sorted(missing)}")

    def resolve(r):
        if not (r.get("transcript") or "").strip():
            return None
        p = Path(r["audio_path"])
        p = p if p.is_absolute() else base / p
        dur = r.get("duration_sec")
        return Utterance(str(p), r["transcript"].strip(), r["speaker_id"].strip(),
                         float(dur) if dur else audio_duration(p))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        resolved = list(pool.map(resolve, rows))
    utts = tuple(u for u in resolved if u is not None)
    skipped = len(resolved) - len(utts)
    if skipped:
        log.warning("%d row(s) without transcript were skipped", skipped)
    return Manifest(utts, skipped=skipped)


def build_manifest(root, layout: str, workers: int = 1) -> Manifest:
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"corpus root not found: {root}")
    if layout not in LAYOUTS:
        raise ValidationError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if layout == "flat-tsv":
        return _read_flat_tsv(root, workers)

    scan = _scan_vctk if layout == "vctk-like" else _scan_libritts
    pairs, skipped = [], 0
    for audio, txt, spk in scan(root):
        if txt is None:
            skipped += 1
            log.info("no transcript for %s; skipped", audio)
            continue
        pairs.append((audio, txt, spk))

    def make(item):
        audio, txt, spk = item
        return Utterance(str(audio), txt.read_text(encoding="utf-8").strip(), spk, audio_duration(audio))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        utts = list(pool.map(make, pairs))
    if skipped:
        log.warning("%d audio file(s) without transcript were skipped", skipped)
    return Manifest(tuple(utts), skipped=skipped)


# --- rules ------------------------------------------------------------------------

def filter_duration(m: Manifest, max_seconds: float = 10.0) -> Manifest:
    if not max_seconds > 0:
        raise ValidationError("max_seconds must be positive")
    return replace(m, utterances=tuple(u for u in m if u.duration <= max_seconds))


def filter_speaker_minutes(m: Manifest, min_minutes: float = 5.0) -> Manifest:
    if not min_minutes > 0:
        raise ValidationError("min_minutes must be positive")
    totals: dict[str, float] = defaultdict(float)
    for u in m:
        totals[u.speaker_id] += u.duration
    keep = {s for s, t in totals.items() if t >= min_minutes * 60.0}
    return replace(m, utterances=tuple(u for u in m if u.speaker_id in keep))


def split_by_transcription(m: Manifest, fractions: Iterable[float] = (0.8, 0.1, 0.1),
                           seed: int = 0) -> tuple[Manifest, Manifest, Manifest]:
    """Partition unique (normalized) transcripts, then route utterances.

    val/test transcript counts are rounded down; train takes the remainder.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValidationError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    keys = sorted({normalize_text(u.transcript) for u in m})
    if len(keys) < 3:
        raise ValidationError(f"need at least 3 unique transcripts to split, got {len(keys)}")
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(keys))
    n_val = int(math.floor(fractions[1] * len(keys) + 1e-9))
    n_test = int(math.floor(fractions[2] * len(keys) + 1e-9))
    n_train = len(keys) - n_val - n_test
    assign = {}
    for rank, idx in enumerate(order):
        assign[keys[idx]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    buckets: dict[str, list[Utterance]] = {"train": [], "val": [], "test": []}
    for u in m:
        buckets[assign[normalize_text(u.transcript)]].append(u)
    return tuple(Manifest(tuple(buckets[t]), t) for t in ("train", "val", "test"))  # type: ignore[return-value]


def speaker_index(manifests: Iterable[Manifest]) -> dict[str, int]:
    """Stable speaker-id -> row mapping (sorted ids)."""
    ids = set()
    for m in manifests:
        ids.update(u.speaker_id for u in m)
    return {s: i for i, s in enumerate(sorted(ids))}
