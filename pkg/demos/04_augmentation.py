# %% [markdown]
# # Thirty-six views of one plant
#
# Four geometric states crossed with the identity plus eight photometric
# ops give 36 training samples per image, all sharing the original count.

# %%
import numpy as np

from leafcount import AugmentPlan, SynthConfig, generate_synthetic, make_count_variants
from leafcount.augment import flip_rotate, variant_manifest

rec = generate_synthetic(SynthConfig(seed=3), 1)[0]
plan = AugmentPlan(seed=3)
variants = make_count_variants(rec.rgb, rec.mask, plan)
print(len(variants), "variants; count stays", rec.count)

# %%
img = rec.rgb
print("flip_lr twice is identity:", np.array_equal(flip_rotate(flip_rotate(img, "flip_lr"), "flip_lr"), img))
print("flip_tb then flip_lr is rot180:",
      np.array_equal(flip_rotate(flip_rotate(img, "flip_tb"), "flip_lr"), flip_rotate(img, "rot180")))

# %%
print("810 originals ->", len(variant_manifest(range(810), plan)), "training instances")
