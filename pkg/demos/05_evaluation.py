"""Objective metrics: voicing decision error, speaker classification accuracy
and the speaker probe on L, (L, R) and mel features.

Run: python demos/05_evaluation.py <workdir-from-demo-04>
"""
import sys
from pathlib import Path

import numpy as np
import torch

from cotatron.archive import load_mel
from cotatron.audio import mel_spectrogram, load_audio, voicing_decisions
from cotatron.corpus import build_manifest
from cotatron.evaluation import (
    ProbeData, disentanglement_probe, markdown_table, sca, train_sca_classifier, vde,
)

work = Path(sys.argv[1])
torch.set_num_threads(1)
manifest = build_manifest(work / "toy", "flat-tsv")

# %% VDE: identical decisions give 0, complementary ones give 1
flags = np.array([True, False, True, True])
print("vde(x, x) =", vde(flags, flags).value, " vde(x, not x) =", vde(flags, ~flags).value)

# %% VDE between a source utterance and its conversions
# the WAVs are a short Griffin-Lim inversion, so expect a rough voicing match
src = manifest[0]
w = load_audio(src.audio_path)
for meta in sorted((work / "converted").glob("*.json")):
    wav = meta.with_suffix(".wav")
    if wav.exists():
        print(meta.stem, "vde %.3f" % vde(voicing_decisions(w), voicing_decisions(load_audio(wav))).value)

# %% SCA: a classifier trained on real speech judges the converted mels
mels = [mel_spectrogram(load_audio(u.audio_path)).frames for u in manifest]
labels = [u.speaker_id for u in manifest]
clf = train_sca_classifier(mels[::2], labels[::2], mels[1::2], labels[1::2])
print("held-out speaker accuracy on real speech: %.2f" % clf.test_accuracy)
conv = sorted((work / "converted").glob("*.mel"))
targets = [p.stem.rsplit("_to_", 1)[1] for p in conv]
reports = [sca(clf, [load_mel(p) for p in conv], targets)]

# %% speaker probe on raw mels; L and (L, R) come from `cotatron extract`
probe = disentanglement_probe("M", ProbeData(mels[::2], labels[::2]), ProbeData(mels[1::4], labels[1::4]),
                              ProbeData(mels[3::4], labels[3::4]), epochs=10)
reports.append(probe)
print(markdown_table(reports))
