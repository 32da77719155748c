"""Voice conversion on top of a frozen TTS encoder.

Trains the residual encoder and the GBlock decoder on reconstruction, then
converts a toy utterance to every training speaker and writes .mel/.json
(and a Griffin-Lim .wav) per target.

Run: python demos/04_voice_conversion.py <workdir-from-demo-03> [steps]
"""
import sys
from pathlib import Path

import numpy as np
import torch

from cotatron.conversion import Converter
from cotatron.corpus import build_manifest, speaker_index
from cotatron.data import load_examples
from cotatron.training import TrainConfig, load_cotatron, train_vc
from cotatron.vc_decoder import VCDecoderConfig

work = Path(sys.argv[1])
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300
torch.set_num_threads(1)

manifest = build_manifest(work / "toy", "flat-tsv")
speakers = speaker_index([manifest])
examples = load_examples(manifest, speakers)
cotatron, _ = load_cotatron(work / "run" / "cotatron.pt")

# %% the encoder stays frozen; only the residual path, decoder and speaker table learn
cfg = TrainConfig.for_phase("vc", batch_size=10, lr_initial=1e-3, lr_final=1e-3, max_steps=steps, log_every=100)
system, ckpt, history, trainer = train_vc(examples, cotatron, cfg, list(speakers),
                                          decoder_cfg=VCDecoderConfig.toy(), out_dir=work / "run")
print("reconstruction loss: %.3f -> %.3f" % (history[0]["recon"], history[-1]["recon"]))

# %% same-speaker reconstruction and cross-speaker conversion
conv = Converter(cotatron, system, list(speakers))
ex = examples[0]
src = next(u for u in manifest if u.audio_path == ex.key)
for target in speakers:
    res = conv.convert(src.audio_path, src.transcript, target, out_dir=work / "converted",
                       source_speaker=src.speaker_id, vocoder_iters=32)
    print("%s -> %s  frames %d  mse vs source %.3f" % (src.speaker_id, target, res.mel.shape[0],
                                                      res.metadata["mse_vs_source"]))
print("outputs in", work / "converted")
