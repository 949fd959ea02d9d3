"""
A short desk training run
=========================

Train on a small sprite corpus, sample a caption, and look at the
correlation ratio of the generated identity. Pass an epoch count as the first
argument (default 8; the full desk preset uses 16).
"""

import sys
from pathlib import Path

import numpy as np

from tpgan import RandomStream, ResolutionProfile, TrainConfig, generate_sprite_corpus, train
from tpgan.generator import export_pyramid
from tpgan.identity_mixup import correlation_ratio

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
out = Path("demo_output") / "train"

prof = ResolutionProfile.desk()
corpus = generate_sprite_corpus(10, 30, prof, RandomStream(0))
cfg = TrainConfig.desk(epochs=epochs, eval_interval=max(1, epochs))

result = train(corpus, cfg, prof, out_dir=out)
first, last = result.reports[0], result.reports[-1]
print(f"{len(result.reports)} steps; g_loss_adv {first.g_loss_adv:.3f} -> {last.g_loss_adv:.3f}; "
      f"ce {first.ce_loss:.4f} -> {last.ce_loss:.4f}")
print("validation history:", result.history)

# eight samples for one caption, one directory per scale
models = result.state.models
caption = corpus.records[0].captions[0]
levels = models.sample([caption] * 8, RandomStream(1))
export_pyramid(levels, out / "samples")
print("caption:", caption)

# rho over 100 draws, in teacher feature space
feats = models.feature_extractor()(models.sample([caption] * 100, RandomStream(2))[0])
print("rho =", round(correlation_ratio(feats), 3), "(1/rank floor", round(1 / np.linalg.matrix_rank(feats), 3), ")")
