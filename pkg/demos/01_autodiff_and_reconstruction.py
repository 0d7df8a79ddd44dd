"""Reverse-mode gradients, gradients of gradients, and gradient inversion.

Run with ``python demos/01_autodiff_and_reconstruction.py``.
"""

import numpy as np

from recupfl.attacks import ReconstructionConfig, reconstruct, reconstruction_mse
from recupfl.models import MlpSpec, init_model, training_loss
from recupfl.numerics import autodiff as ad

# A scalar function and its derivative.
x = ad.tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
y = (ad.tanh(x) * x).sum()
(g,) = ad.grad(y, [x])
print("d/dx sum(x tanh x) =", np.round(g.value, 4))

# Second derivative through a recorded first derivative: d2/dx2 x^3 = 6x.
s = ad.tensor(2.0, requires_grad=True)
print("d2/dx2 x^3 at 2 =", ad.nested_grad(s * s * s, [s], lambda gs: gs[0], s).value)

# A shared update is the gradient of a client's loss. For one record, the
# attacker can search for the input whose gradient points the same way.
spec = MlpSpec(16, (16, 2), activation="sigmoid", seed=3)
weights = init_model(spec)
rng = np.random.default_rng(0)
record, label = rng.uniform(0, 1, 16), 1
leaves = [ad.tensor(w, requires_grad=True) for w in weights]
update = np.concatenate([g.value.ravel() for g in ad.grad(training_loss(leaves, record[None], [label], spec), leaves)])

result = reconstruct(update, weights, spec, label, ReconstructionConfig(iterations=1000), seed=1)
print(f"reconstruction MSE after {result.best_iteration} iterations: {reconstruction_mse(result.x, record):.2e}")
print("first values, true :", np.round(record[:5], 3))
print("first values, found:", np.round(result.x[:5], 3))
