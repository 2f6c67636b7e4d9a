"""
Learning VQ-CPC features on toy data
====================================

Trains a small VQ-CPC model for a few hundred steps on synthetic binaural
mixtures and prints how the contrastive loss falls from its chance value
ln(1 + negatives).  Then extracts a feature sequence for one utterance.

Run with ``python3 demos/vqcpc_features.py`` (about a minute on one core).
"""

import math
import tempfile
from pathlib import Path

import numpy as np

from binaural_si.audio import read_wav
from binaural_si.scene import build_dataset
from binaural_si.synth import make_toy_assets
from binaural_si.vqcpc import VQCPCConfig, train_vqcpc

work = Path(tempfile.mkdtemp())
assets = make_toy_assets(work / "assets", seed=0, utterances={"train": 12}, n_rirs=4, n_noises=4)
manifest = build_dataset(assets["speech"] / "train", assets["rir"], assets["noise"], 2, work / "train", seed=1)
signals = [read_wav(manifest.mixture_path(r)).samples for r in manifest.records]

cfg = VQCPCConfig(
    window=16000,
    filters=32,
    embedding_dim=16,
    codebook_size=32,
    feature_dim=16,
    prediction_steps=2,
    negatives=2,
    lr=2e-3,
    train_steps=400,
    checkpoint_every=200,
)
print(f"receptive field {cfg.receptive_field} samples, hop {cfg.hop}, {cfg.output_length(cfg.window)} latents per window")

# %%
result = train_vqcpc(signals, cfg, seed=0, out_dir=work)
chance = math.log(1 + cfg.negatives)
for e in result.curve[::50] + [result.curve[-1]]:
    print(f"step {e['step']:4d}  infonce {e['infonce']:.3f} (chance {chance:.3f})  codebook perplexity {e['perplexity']:.1f}")

# %%
feats = result.model.extract(read_wav(manifest.mixture_path(manifest.records[0])))
print("feature sequence", feats.vectors.shape, "range", np.round([feats.vectors.min(), feats.vectors.max()], 3))
