"""Text front end and corpus handling on a synthetic corpus.

Run: python demos/02_text_and_corpus.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from cotatron.corpus import build_manifest, filter_duration, speaker_index, split_by_transcription
from cotatron.text import DEFAULT_TABLE, mix_representation, tokenize

# %% tokenization keeps punctuation and collapses whitespace
seq = tokenize("Hi,  there.")
print([DEFAULT_TABLE.symbol(i) for i in seq.ids])

# %% representation mixing swaps whole words for lexicon phonemes
lexicon = {"the": ("DH", "AH"), "cat": ("K", "AE", "T")}
for p in (0.0, 1.0):
    mixed = mix_representation("the cat sat", lexicon, p=p, seed=0)
    print(p, [DEFAULT_TABLE.symbol(i) for i in mixed.ids])

# %% a toy corpus in the flat-tsv layout
from cotatron.toy import make_toy_corpus

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "toy"
make_toy_corpus(root, n_speakers=3, n_transcripts=12, seed=0)
m = filter_duration(build_manifest(root, "flat-tsv"), 10.0)
print(len(m), "utterances from", m.speakers)

# %% the split is over transcripts, so no sentence appears in two splits
train, val, test = split_by_transcription(m, (0.8, 0.1, 0.1), seed=0)
print("train/val/test:", len(train), len(val), len(test))
print("shared transcripts:", {u.transcript for u in train} & {u.transcript for u in test})
print("speaker rows:", speaker_index([train, val, test]))
