"""
Reverse-mode gradients on a tape
================================

Every op run inside a ``Tape`` is recorded; ``backward`` replays the record
in reverse.  Here we fit a tiny logistic model and check one gradient
against central differences.
"""

import numpy as np

from hcn import tensor as T
from hcn.optim import Adam

rng = np.random.default_rng(0)
x = T.constant(rng.normal(size=(64, 3)))
true_w = np.array([[1.5], [-2.0], [0.5]])
labels = (x.data @ true_w > 0).astype(float)

params = T.ParamSet()
params.add(T.Parameter("w", np.zeros((3, 1))))
params.add(T.Parameter("b", np.zeros((1, 1))))


def loss():
    return T.sigmoid_bce(T.affine(x, params["w"], params["b"]), labels)


# the tape-based gradient agrees with finite differences
print("grad check, relative error:", T.grad_check(loss, params["w"]))

opt = Adam(params, lr=0.1)
for step in range(200):
    opt.zero_grad()
    with T.Tape() as tape:
        value = loss()
    tape.backward(value)
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  loss {value.data.item():.4f}")

# direction of the learned weights matches the generating ones
w = params["w"].data[:, 0]
print("cosine(w, true_w):", w @ true_w[:, 0] / np.linalg.norm(w) / np.linalg.norm(true_w))
