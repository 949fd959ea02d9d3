"""
Mix-up strength and probe accuracy
==================================

Pairs of sprites from different identities are mixed with weights drawn
from Beta(alpha, alpha). A probe trained on the soft labels is asked for
the dominant identity of held-out mixtures. Larger alpha puts more mass
near 1/2 and the task gets harder.
"""

import numpy as np
import torch

from tpgan import RandomStream, ResolutionProfile, generate_sprite_corpus
from tpgan.identity_mixup import beta_quantile_lambdas, is_non_increasing, mixup_probe

prof = ResolutionProfile.desk()
corpus = generate_sprite_corpus(20, 54, prof, RandomStream(0))
levels = [torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))) for x in corpus.pyramid()]
labels = corpus.labels([r.identity_id for r in corpus.records])

# shared uniforms: every alpha sees the same pairs, only the weights move
u = np.random.default_rng(0).random(8)
for alpha in (0.1, 0.5):
    print(f"alpha {alpha}: lambda", np.round(beta_quantile_lambdas(u, alpha), 3))

alphas = (0.1, 0.2, 0.4, 0.5)
rows = mixup_probe(levels, labels, alphas, [2, 4], RandomStream(0), prof=prof)
for budget in (2, 4):
    accs = [r["accuracy"] for r in rows if r["epochs"] == budget]
    print(f"{budget} epochs:", " / ".join(f"{100 * a:.2f}%" for a in accs),
          "| non-increasing:", is_non_increasing(accs))
