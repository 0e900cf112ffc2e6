"""Numerical identities behind the score-map head.

Three checks, printed with their measured errors:

1. pooling linearity: averaging the score maps equals classifying the
   averaged features, so the 1x1 head and the pooled-feature classifier are
   the same linear map;
2. initialization equivalence: a head copied from a trained classifier
   produces identical logits on every input;
3. gradient verification: analytic backprop matches central finite
   differences on every head entry and a sample of backbone entries.

Run:  python demos/04_pooling_and_gradient_checks.py
"""

import numpy as np

from wsloc.model import BaseModel, WslHead, WslModel, global_average_pool, init_wsl_from_base, wsl_forward
from wsloc.train import grad_check

rng = np.random.default_rng(0)

# 1. pooling linearity on random feature grids
worst = 0.0
for _ in range(300):
    n, d, k = rng.integers(2, 9), rng.integers(4, 48), rng.integers(2, 8)
    features = rng.standard_normal((int(n), int(n), int(d)))
    head = WslHead(rng.standard_normal((int(d), int(k))), rng.standard_normal(int(k)))
    _, conv_then_pool = wsl_forward(features, head)
    pool_then_linear = global_average_pool(features) @ head.weights + head.bias
    worst = max(worst, float(np.abs(conv_then_pool - pool_then_linear).max()))
print(f"1. conv-then-pool vs pool-then-classify, 300 random grids: max abs diff {worst:.2e}")

# 2. head initialization from a base classifier is exact for whole models
base = BaseModel.create(num_classes=5, seed=1)
wsl = WslModel(base.backbone, init_wsl_from_base(base.fc_weights, base.fc_bias))
images = rng.random((32, 64, 64, 3))
dev = float(np.abs(base.forward(images) - wsl.forward(images)[1]).max())
agree = bool((base.forward(images).argmax(1) == wsl.forward(images)[1].argmax(1)).all())
print(f"2. logits after head init: max deviation {dev:.2e}, top-1 agreement {agree}")

# 3. finite-difference gradient check on the full toy model
images = rng.random((4, 64, 64, 3))
labels = rng.integers(0, 5, 4)
err = grad_check(base, images, labels, epsilon=1e-4)
print(f"3. analytic vs central finite differences (eps 1e-4): max rel error {err:.2e}")
