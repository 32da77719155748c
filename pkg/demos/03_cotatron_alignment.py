"""Train a small TTS encoder on toy speech and read out alignments and features.

The attention alignment A maps each mel frame to text symbols; the
speaker-independent features are L = A @ text_encoding. A few hundred steps
are enough to see a roughly diagonal alignment on toy data.

Run: python demos/03_cotatron_alignment.py [workdir] [steps]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from cotatron.corpus import build_manifest, speaker_index
from cotatron.data import load_examples
from cotatron.features import context_equivalence_check, extract_alignment, extract_features
from cotatron.text import tokenize
from cotatron.toy import alignment_accuracy, load_frame_symbols, make_toy_corpus
from cotatron.training import TrainConfig, moving_average, train_cotatron
from cotatron.tts import CotatronConfig

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 400
torch.set_num_threads(1)

# %% 2 speakers x 10 sentences
make_toy_corpus(work / "toy", n_speakers=2, n_transcripts=10, seed=0)
manifest = build_manifest(work / "toy", "flat-tsv")
speakers = speaker_index([manifest])
examples = load_examples(manifest, speakers)
truth = load_frame_symbols(work / "toy")

# %% toy recipe: full teacher forcing and a slower attention prior than the full-scale default
cfg = TrainConfig(batch_size=10, lr_initial=1e-3, lr_final=1e-4, decay_start_step=steps // 2,
                  decay_end_step=steps, tf_rate=1.0, max_steps=steps, log_every=100)
model_cfg = CotatronConfig.toy(n_speakers=len(speakers), prior_beta=4.9)
model, ckpt, history = train_cotatron(examples, None, cfg, model_cfg, list(speakers), out_dir=work / "run")
ma = moving_average([h["total"] for h in history])
print("loss: %.2f -> %.2f" % (ma[0], ma[-1]))
print("checkpoint:", ckpt)

# %% alignment of one training utterance
ex = examples[0]
a = extract_alignment(model, ex.mel, tokenize(ex.transcript))
path = a.argmax(1)
print("rows sum to 1:", np.allclose(a.sum(1), 1, atol=1e-5))
print("monotone steps: %.2f" % np.mean(np.diff(path) >= 0))
print("argmax within one symbol of the truth: %.2f" % alignment_accuracy(a, truth[ex.key], 1))

# %% L computed from A matches the decoder's own attention contexts
print("context equivalence: %.2e" % context_equivalence_check(model, ex.mel, tokenize(ex.transcript)))
L, _, _ = extract_features(model, None, ex.mel, tokenize(ex.transcript))
print("L:", L.shape)

# %% heatmap
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.imshow(a.T, origin="lower", aspect="auto", interpolation="nearest")
    ax.set_xlabel("mel frame")
    ax.set_ylabel("symbol")
    fig.savefig(work / "alignment.png", dpi=100, bbox_inches="tight")
    print("wrote", work / "alignment.png")
except ImportError:
    pass
