# %% [markdown]
# # Checking hand-written backward passes
#
# Every layer in leafcount ships its own backward pass. The quickest way to
# trust one is a central finite difference in float64.

# %%
import numpy as np

from leafcount import layers as L
from leafcount.gradcheck import numeric_grad, rel_error
from leafcount.tensor import rng_stream

rng = rng_stream(0)

# %% [markdown]
# Project the layer output onto a random direction so the check sees a scalar.

# %%
x = rng.normal(size=(2, 3, 8, 8))
w = rng.normal(size=(4, 3, 3, 3))
b = rng.normal(size=4)
proj = rng.normal(size=(2, 4, 8, 8))

def loss():
    return float((L.conv2d_forward(x, w, b, "same") * proj).sum())

gx, gw, gb = L.conv2d_backward(x, w, proj, "same")
for name, g, t in (("input", gx, x), ("weight", gw, w), ("bias", gb, b)):
    print(f"conv {name:6s} rel error {rel_error(g, numeric_grad(loss, t)):.2e}")

# %% [markdown]
# The same recipe works for LRN, with alpha raised so the normalizer matters.

# %%
kw = dict(k=2.0, n=5, alpha=0.3, beta=0.75)
x = rng.normal(size=(1, 7, 4, 4))
proj = rng.normal(size=x.shape)
f = lambda: float((L.lrn_forward(x, **kw) * proj).sum())
print(f"lrn rel error {rel_error(L.lrn_backward(x, proj, **kw), numeric_grad(f, x)):.2e}")
