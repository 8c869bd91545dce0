"""How the real-pair margin m0 shapes the contrastive term.

Real images come from many sources, so the loss asks less of real-real
similarity (m0) than of fake-fake similarity (m1). This script evaluates
the loss on a fixed random batch while m0 varies.

    python demos/asymmetric_margin.py
"""

import numpy as np

from diffuq.detector import AsymmetricLossConfig, asymmetric_contrastive_loss, cross_entropy

rng = np.random.default_rng(0)
labels = np.array([0, 0, 0, 1, 1, 1])
features = rng.normal(size=(6, 8))
features[labels == 1] += 1.5          # fakes share a direction

print("m0    contrastive loss")
for m0 in np.linspace(0.0, 1.0, 6):
    loss, _ = asymmetric_contrastive_loss(features, labels, AsymmetricLossConfig(m0=m0))
    print(f"{m0:.1f}   {loss:.4f}")

logits = rng.normal(size=(6, 2))
ce, _ = cross_entropy(logits, labels)
lm, _ = asymmetric_contrastive_loss(features, labels, AsymmetricLossConfig())
print(f"\ncross-entropy {ce:.4f} + 0.5 x contrastive {lm:.4f} = {ce + 0.5 * lm:.4f}")
