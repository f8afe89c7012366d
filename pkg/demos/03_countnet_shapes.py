# %% [markdown]
# # Planning the counting network
#
# Unpadded convolutions and pooling must shrink the input to a 1x1 map
# before the fully connected head. The planner traces the sizes and refuses
# stacks that end anywhere else.

# %%
import numpy as np

from leafcount import CountArchSpec, assemble_srgb, build_countnet, count_parameters, plan_shape_trace
from leafcount.countnet import PAPER_STACK, ShapePlanError

for name, size in plan_shape_trace(448, PAPER_STACK):
    print(f"{name:8s} {size}")

# %%
try:
    plan_shape_trace(400, PAPER_STACK)
except ShapePlanError as err:
    print("rejected:", err)

# %% [markdown]
# The desk preset runs at 64x64. Its input is the 4-channel stack
# [mask, R, G, B], padded to a square.

# %%
spec = CountArchSpec.preset("desk")
print(spec.trace()[-1], "parameters:", count_parameters(spec))
net = build_countnet(spec)
rgb = np.random.default_rng(0).random((3, 48, 64)).astype(np.float32)
x = assemble_srgb(rgb, np.ones((48, 64), np.uint8), 64)
print("input", x.shape, "raw output", net.forward(x[None], False).ravel())
