# %% [markdown]
# # Segmenting a rosette with sliding windows
#
# A small SegNet is trained on synthetic rosettes with the desk preset, the
# same settings `leafcount train-seg` uses, then tiled over held-out images.
# Per-pixel class probabilities are summed across windows.

# %%
import numpy as np

from leafcount import SynthConfig, generate_synthetic, segment_image, train_segnet
from leafcount.config import defaults, seg_arch, seg_train_config
from leafcount.metrics import seg_metrics

cfg = defaults("desk")
train = generate_synthetic(SynthConfig(seed=1), 32)
test = generate_synthetic(SynthConfig(seed=1), 3, start=1000)

# %%
train_cfg = seg_train_config(cfg)
for stage in train_cfg.stages:
    print(stage)
net, ckpt, log = train_segnet(train, seg_arch(cfg), train_cfg)
for row in log:
    print(row)

# %%
for rec in test:
    mask, acc = segment_image(net, rec.rgb, train_cfg.window, train_cfg.stride)
    hits = np.rint(acc.sum(axis=0)).astype(int)  # class probabilities sum to one per window
    p, r = seg_metrics(mask, rec.mask)
    print(f"{rec.id}: windows per pixel {hits.min()}..{hits.max()}, precision {p:.3f}, recall {r:.3f}")
