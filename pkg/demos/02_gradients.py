"""
Checking gradients of a full model
==================================

Every model is a graph of numpy operations with hand-written backward
rules. Here the conditional model is compared against finite differences.
"""

import numpy as np

from qdetect import autodiff as ad
from qdetect.data import SequenceBatch
from qdetect.models import ModelConfig, build_model
from qdetect.training import bce_loss

# a scalar function first: d/dx sum(tanh(x)^2)
x = ad.Parameter(np.array([0.3, -1.2, 2.0]), "x")
loss = ad.sum_all(ad.mul(ad.tanh(x), ad.tanh(x)))
loss.backward()
print("analytic:", x.grad)
print("closed form:", 2 * np.tanh(x.value) * (1 - np.tanh(x.value) ** 2))

# a tiny conditional model and a padded batch of two examples
cfg = ModelConfig.for_row("condition-c2", cell="lstm", hidden=4, embed_dim=5,
                          attention_dim=3, vocab_size=12, seed=2)
model = build_model(cfg)
rng = np.random.default_rng(0)

# At the symmetric starting point some gradients are almost exactly zero and
# finite differences only see rounding noise there. Nudge every parameter.
for p in model.parameters().values():
    p.value = p.value + rng.uniform(-0.25, 0.25, p.value.shape)

ids = np.zeros((2, 5), dtype=np.int64)
ids[0, :3], ids[1, :5] = rng.integers(1, 12, 3), rng.integers(1, 12, 5)
audio = np.zeros((2, 8, 52))
audio[0, :5], audio[1, :8] = rng.standard_normal((5, 52)), rng.standard_normal((8, 52))
batch = SequenceBatch(labels=np.array([0.0, 1.0]), ids=["a", "b"], token_ids=ids,
                      text_lengths=np.array([3, 5]), audio=audio, audio_lengths=np.array([5, 8]))

f = lambda: bce_loss(model.forward(batch, "train"), batch.labels)
report = ad.grad_check(f, model.parameters(), eps=1e-2, stencil=4, max_entries=4)
print(report)
