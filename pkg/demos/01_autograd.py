"""Tour of the tape-based autograd: record, backward, check against finite differences."""

# %%
import numpy as np

from pif import diffcore as dc

rng = np.random.default_rng(0)
W = dc.Parameter(rng.normal(size=(3, 4)) / 2, name="W")
x = dc.Tensor(rng.normal(size=4))

# Operations are recorded only while a tape is active.
with dc.Tape() as tape:
    probs = dc.softmax(dc.tanh(dc.matmul(W, x)))
    loss = dc.cross_entropy(probs, 2)
print("loss", loss.item(), "ops recorded", len(tape))

# %%
dc.backward(loss, tape)
print("dL/dW\n", W.grad)

# %%
# Central differences agree with the taped gradient.
err = dc.grad_check(lambda: dc.cross_entropy(dc.softmax(dc.tanh(dc.matmul(W, x))), 2), [W])
print(f"max relative error {err:.2e}")

# %%
# Clipping rescales every gradient so the global norm is at most the threshold.
W.grad[...] = 100.0
factor = dc.clip_global_norm([W], 5.0)
print("factor", factor, "norm after", dc.global_norm([W]))
