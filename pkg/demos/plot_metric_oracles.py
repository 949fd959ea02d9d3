"""
Metrics against closed forms
============================

FID, the Inception Score and the correlation ratio on inputs whose answer
is known in advance.
"""

import numpy as np

from tpgan.identity_mixup import correlation_ratio
from tpgan.metrics import fid, fid_from_moments, inception_score

# two unit Gaussians three apart: the Frechet distance is 3^2
print("FID N(0,1) vs N(3,1):", fid_from_moments([0.0], [[1.0]], [3.0], [[1.0]]))

# from samples the estimate approaches the closed form
rng = np.random.default_rng(0)
a = rng.normal(0, 1, (20000, 4))
b = rng.normal(0.5, 2, (20000, 4))
closed = 4 * 0.5 ** 2 + 4 * (2 - 1) ** 2
print(f"FID from samples {fid(a, b):.3f}, closed form {closed:.3f}")

# confident and balanced over C classes: IS = C
for c in (2, 5, 10):
    probs = np.eye(c)[np.arange(50 * c) % c]
    print(f"IS with {c} balanced one-hot classes:", inception_score(probs, splits=1)[0])

# rho is 1/n for an orthogonal set and 1 for identical rows
print("rho(I4) =", correlation_ratio(np.eye(4)))
print("rho(identical rows) =", correlation_ratio(np.ones((5, 3))))
