"""Encoder-decoder segmentation network with index-based max-unpooling.

The encoder is a VGG-style stack of 3x3 same-padded conv + BN + ReLU blocks
separated by 2x2 max-pools.  The decoder mirrors it stage by stage: each
stage unpools with the indices of its encoder twin, then runs the encoder
stage's convolutions in reverse with input/output channels swapped.  The
mirror of the very first encoder conv (3 -> c1) becomes the classifier
(c1 -> 2), which has no BN or ReLU.  There are no fully connected layers.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import augment
from .checkpoint import Checkpoint, check_against
from .dataset import SampleRecord
from .errors import DataError
from .layers import BatchNorm2d, Conv2d, MaxPool2, MaxUnpool2, ReLU, softmax, weighted_spatial_cross_entropy
from .network import Network
from .optim import SEGNET_SGD, OptimizerConfig, OptimizerState, config_for_epoch, step
from .tensor import TRAIN_DTYPE, check_finite, rng_stream

log = logging.getLogger(__name__)

FULL_WIDTHS = (64, 128, 256, 512, 512)
DESK_WIDTHS = (16, 32, 64, 128, 128)
VGG_DEPTHS = (2, 2, 3, 3, 3)


@dataclass(frozen=True)
class SegArchSpec:
    stages: tuple[tuple[int, int], ...] = tuple(zip(VGG_DEPTHS, FULL_WIDTHS))
    in_channels: int = 3
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(n), int(c)) for n, c in self.stages))
        if not self.stages or any(n < 1 or c < 1 for n, c in self.stages):
            raise ValueError(f"invalid encoder stages {self.stages}")

    @classmethod
    def preset(cls, name: str) -> "SegArchSpec":
        widths = {"full": FULL_WIDTHS, "desk": DESK_WIDTHS}.get(name)
        if widths is None:
            raise ValueError(f"unknown segnet preset {name!r}")
        return cls(tuple(zip(VGG_DEPTHS, widths)))

    @property
    def reduction(self) -> int:
        return 2 ** len(self.stages)

    def encoder_convs(self) -> list[list[tuple[int, int]]]:
        convs, cin = [], self.in_channels
        for n, c in self.stages:
            stage = []
            for _ in range(n):
                stage.append((cin, c))
                cin = c
            convs.append(stage)
        return convs

    def to_dict(self) -> dict:
        return {"kind": "segnet", "stages": [list(s) for s in self.stages], "in_channels": self.in_channels,
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "SegArchSpec":
        if d.get("kind") != "segnet":
            raise ValueError(f"not a segnet architecture: {d.get('kind')!r}")
        return cls(tuple(tuple(s) for s in d["stages"]), d["in_channels"], d["num_classes"])


class SegNet(Network):
    def __init__(self, spec: SegArchSpec, rng: np.random.Generator, dtype=TRAIN_DTYPE, input_grad=False):
        self.spec = spec
        layers, pools = [], {}
        enc = spec.encoder_convs()
        for s, stage in enumerate(enc, start=1):
            for j, (cin, cout) in enumerate(stage):
                first = s == 1 and j == 0
                layers += [(f"enc{s}.{j}.conv", Conv2d(cin, cout, 3, "same", rng, dtype, input_grad or not first)),
                           (f"enc{s}.{j}.bn", BatchNorm2d(cout, dtype=dtype)),
                           (f"enc{s}.{j}.relu", ReLU())]
            pools[s] = MaxPool2()
            layers.append((f"enc{s}.pool", pools[s]))
        for s in range(len(enc), 0, -1):
            layers.append((f"dec{s}.unpool", MaxUnpool2(pools[s])))
            mirrored = [(cout, cin) for cin, cout in reversed(enc[s - 1])]
            for j, (cin, cout) in enumerate(mirrored):
                if s == 1 and j == len(mirrored) - 1:
                    layers.append(("classifier", Conv2d(cin, spec.num_classes, 3, "same", rng, dtype)))
                else:
                    layers += [(f"dec{s}.{j}.conv", Conv2d(cin, cout, 3, "same", rng, dtype)),
                               (f"dec{s}.{j}.bn", BatchNorm2d(cout, dtype=dtype)),
                               (f"dec{s}.{j}.relu", ReLU())]
        super().__init__(layers, spec.to_dict())

    def forward(self, x, train=True):
        h, w = x.shape[-2:]
        r = self.spec.reduction
        if h % r or w % r:
            raise ValueError(f"input {h}x{w} not divisible by {r}")
        return super().forward(x, train)

    __call__ = forward


def build_segnet(spec: SegArchSpec, rng: np.random.Generator | None = None, window: int | None = None,
                 dtype=TRAIN_DTYPE, input_grad: bool = False) -> SegNet:
    """``input_grad`` keeps the gradient w.r.t. the network input (off for training)."""
    if window is not None and window % spec.reduction:
        raise ValueError(f"window {window} not divisible by {spec.reduction}")
    return SegNet(spec, rng if rng is not None else rng_stream(0), dtype, input_grad)


# ---------------------------------------------------------------------------
# training


@dataclass
class SegStage:
    """One training stage.

    ``mode`` is ``random`` (augmented fg-biased random crops),
    ``dense_flip`` (stride crops of the four flip states) or ``dense``
    (stride crops of the originals).
    """

    mode: str
    epochs: int
    fg_weight: float
    bg_weight: float = 1.0
    crops_per_image: int = 4

    def __post_init__(self):
        if self.mode not in ("random", "dense_flip", "dense"):
            raise ValueError(f"unknown stage mode {self.mode!r}")
        if self.epochs < 0 or self.fg_weight <= 0 or self.bg_weight <= 0:
            raise ValueError("stage epochs must be >= 0 and weights > 0")


PAPER_STAGES = (SegStage("random", 5, 2.0), SegStage("dense_flip", 8, 1.2), SegStage("dense", 37, 1.2))


@dataclass
class SegTrainConfig:
    window: int = 224
    stride: int = 112
    stages: tuple[SegStage, ...] = PAPER_STAGES
    batch_size: int = 8
    optimizer: OptimizerConfig = SEGNET_SGD
    schedule: tuple = ()
    rotation_step: float = 4.0
    photometric: tuple[tuple[str, float], ...] = (("blur", 0.8), ("blur", 1.6), ("sharpen", 0.5), ("sharpen", 1.0))
    seed: int = 0

    def __post_init__(self):
        self.stages = tuple(s if isinstance(s, SegStage) else SegStage(**s) for s in self.stages)
        if self.window % 32:
            raise ValueError(f"window {self.window} must be divisible by 32")
        if self.stride < 1 or self.batch_size < 1:
            raise ValueError("stride and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = asdict(self.optimizer)
        return d


def _augmented_crop(rec: SampleRecord, cfg: SegTrainConfig, rng: np.random.Generator):
    """Flip, rotate-and-crop, optional blur/sharpen, then a fg-biased window crop."""
    geo = augment.GEOMETRIC[int(rng.integers(0, len(augment.GEOMETRIC)))]
    img = augment.flip_rotate(rec.rgb, geo)
    mask = augment.flip_rotate(rec.mask.astype(np.float32), geo)
    H, W = img.shape[-2:]
    angles = [a for a in np.arange(0.0, 90.0, cfg.rotation_step)
              if augment.inscribed_square_side(H, W, a) >= cfg.window]
    angle = float(angles[int(rng.integers(0, len(angles)))])
    img = augment.rotate_center_crop(img, angle)
    mask = (augment.rotate_center_crop(mask, angle) >= 0.5).astype(np.uint8)
    choice = int(rng.integers(0, len(cfg.photometric) + 1))
    if choice:
        kind, strength = cfg.photometric[choice - 1]
        img = augment.photometric(img, kind, strength, rng)
    p, m = augment.random_fg_crop(img, mask, cfg.window, rng)
    return p, m


def stage_samples(records: Sequence[SampleRecord], stage: SegStage, cfg: SegTrainConfig, epoch: int,
                  threads: int = 1):
    """All (image, mask) training pairs of one epoch, in a fixed order."""
    if stage.mode == "random":
        jobs = [(i, c) for i in range(len(records)) for c in range(stage.crops_per_image)]

        def make(job):
            i, c = job
            rng = rng_stream(cfg.seed, (epoch * len(records) + i) * stage.crops_per_image + c)
            return _augmented_crop(records[i], cfg, rng)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                return list(ex.map(make, jobs))
        return [make(j) for j in jobs]
    geos = augment.GEOMETRIC if stage.mode == "dense_flip" else ("identity",)
    out = []
    for rec in records:
        for g in geos:
            img = augment.flip_rotate(rec.rgb, g)
            mask = augment.flip_rotate(rec.mask, g)
            for p, m, _ in augment.patch_sampler(img, mask, cfg.window, "dense", cfg.stride):
                out.append((p, m))
    return out


def batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    """Consecutive chunks; a trailing singleton joins the previous chunk (BN needs >= 2)."""
    chunks = [order[b:b + size] for b in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _state_checkpoint(net: SegNet, opt_state: OptimizerState, cfg: SegTrainConfig, epoch: int) -> Checkpoint:
    opt = {f"{k}/{b}": v for k, bufs in opt_state.buffers.items() for b, v in bufs.items()}
    return Checkpoint(arch={**net.arch, "window": cfg.window, "stride": cfg.stride},
                      blobs={k: v.astype(np.float32) for k, v in net.state_dict().items()},
                      optimizer={k: v.astype(np.float32) for k, v in opt.items()},
                      epoch=epoch, seed=cfg.seed,
                      meta={"optimizer_step": opt_state.step, "optimizer_kind": cfg.optimizer.kind})


def train_segnet(records: Sequence[SampleRecord], spec: SegArchSpec, cfg: SegTrainConfig, threads: int = 1,
                 net: SegNet | None = None):
    """Staged training; returns ``(net, checkpoint, loss_log)``.

    ``loss_log`` rows are ``{"epoch", "stage", "mean_loss"}`` with epochs
    numbered from 1 across all stages.
    """
    if not records:
        raise DataError("empty dataset")
    if any(r.mask is None for r in records):
        raise DataError("segmentation training needs a mask for every record")
    if cfg.window % spec.reduction:
        raise ValueError(f"window {cfg.window} not divisible by {spec.reduction}")
    net = net or build_segnet(spec, rng_stream(cfg.seed, 2**32))
    params, grads = net.params(), net.grads()
    opt_state = OptimizerState()
    loss_log = []
    epoch = 0
    for s_idx, stage in enumerate(cfg.stages, start=1):
        weights = (stage.bg_weight, stage.fg_weight)
        for _ in range(stage.epochs):
            epoch += 1
            ocfg = config_for_epoch(cfg.optimizer, cfg.schedule, epoch)
            samples = stage_samples(records, stage, cfg, epoch, threads)
            order = rng_stream(cfg.seed, 2**32 + epoch).permutation(len(samples))
            losses = []
            for idx in batches(order, cfg.batch_size):
                x = np.stack([samples[i][0] for i in idx]).astype(TRAIN_DTYPE)
                y = np.stack([samples[i][1] for i in idx]).astype(np.int64)
                logits = net.forward(x, train=True)
                loss, g = weighted_spatial_cross_entropy(logits, y, weights)
                if not np.isfinite(loss):
                    check_finite(np.array([loss]), f"segnet loss at epoch {epoch}")
                net.backward(g)
                step(params, grads, opt_state, ocfg)
                losses.append(loss * len(idx))
            mean = float(np.sum(losses) / len(samples))
            loss_log.append({"epoch": epoch, "stage": s_idx, "mean_loss": mean})
            log.info("segnet epoch %d stage %d loss %.5f", epoch, s_idx, mean)
    return net, _state_checkpoint(net, opt_state, cfg, epoch), loss_log


def segnet_from_checkpoint(ckpt: Checkpoint) -> SegNet:
    spec = SegArchSpec.from_dict(ckpt.arch)
    net = build_segnet(spec)
    check_against(ckpt, {k: v.shape for k, v in net.state_dict().items()})
    net.load_state_dict(ckpt.blobs)
    return net


# ---------------------------------------------------------------------------
# inference


def segment_image(net: SegNet, rgb: np.ndarray, window: int, stride: int, batch_size: int = 16,
                  upscale_small: bool = False):
    """Dense-stride inference; returns ``(mask, prob_sum)``.

    Softmax outputs of every window are summed per pixel into ``prob_sum``
    (2,H,W) in patch order; the mask is the per-pixel argmax.  Images smaller
    than the window raise unless ``upscale_small`` is set, in which case they
    are bilinearly enlarged and the summed probabilities resized back.
    """
    H, W = rgb.shape[-2:]
    if H < window or W < window:
        if not upscale_small:
            raise ValueError(f"image {H}x{W} smaller than window {window}")
        scale = window / min(H, W)
        big = augment.resize_bilinear(rgb, max(window, round(H * scale)), max(window, round(W * scale)))
        _, acc = segment_image(net, big, window, stride, batch_size)
        acc = augment.resize_bilinear(acc, H, W)
        return acc.argmax(axis=0).astype(np.uint8), acc
    patches = augment.patch_sampler(rgb, None, window, "dense", stride)
    acc = np.zeros((2, H, W), dtype=np.float64)
    for b in range(0, len(patches), batch_size):
        chunk = patches[b:b + batch_size]
        x = np.stack([p for p, _, _ in chunk]).astype(TRAIN_DTYPE)
        prob = softmax(net.forward(x, train=False), axis=1)
        for (_, _, (t, l)), pr in zip(chunk, prob):
            acc[:, t:t + window, l:l + window] += pr
    return acc.argmax(axis=0).astype(np.uint8), acc
