"""Counting-by-regression network on 4-channel SRGB input.

SRGB channel order is ``[mask, R, G, B]``.  The conv stack uses unpadded
convolutions (each followed by LRN and ReLU) and 2x2 pools, planned so the
feature map reaches exactly 1x1 before the fully connected head, which ends
in a single real-valued count estimate.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import augment
from .augment import AugmentPlan
from .checkpoint import Checkpoint, check_against
from .dataset import SampleRecord
from .errors import DataError
from .layers import LRN, Conv2d, Flatten, Linear, MaxPool2, ReLU, smooth_l1
from .network import Network
from .optim import COUNTNET_ADAM, OptimizerConfig, OptimizerState, config_for_epoch, step
from .tensor import TRAIN_DTYPE, check_finite, rng_stream

log = logging.getLogger(__name__)

MASK_SOURCES = ("ground_truth", "segnet", "none")


class ShapePlanError(ValueError):
    def __init__(self, message: str, trace):
        super().__init__(f"{message}; trace: {' -> '.join(str(s) for _, s in trace)}")
        self.trace = trace


def _kernel(entry) -> int | None:
    """Kernel size of a conv entry, ``None`` for a pool."""
    if isinstance(entry, str):
        if entry.upper() == "P":
            return None
        if entry[0].lower() == "c":
            return int(entry[1:].split(":")[0])
        raise ValueError(f"bad stack entry {entry!r}")
    if entry[0] == "pool":
        return None
    if entry[0] == "conv":
        return int(entry[1])
    raise ValueError(f"bad stack entry {entry!r}")


def plan_shape_trace(input_size: int, stack: Sequence) -> list[tuple[str, int]]:
    """Spatial size after every layer, starting with ``("input", input_size)``.

    Conv entries shrink by ``k - 1``; pools halve with floor.  The plan must
    end at exactly 1, never dropping below 1 on the way.
    """
    if not stack:
        raise ValueError("empty conv stack")
    size = int(input_size)
    trace = [("input", size)]
    for entry in stack:
        k = _kernel(entry)
        if k is None:
            label, size = "pool", size // 2
        else:
            label, size = f"conv{k}", size - k + 1
        trace.append((label, size))
        if size < 1:
            raise ShapePlanError(f"spatial size {size} < 1 after {label}", trace)
    if size != 1:
        raise ShapePlanError(f"final spatial size is {size}, not 1", trace)
    return trace


def check_kernel_schedule(stack: Sequence) -> None:
    """9x9 convolutions up to the second pool, 5x5 after it."""
    pools = 0
    for entry in stack:
        k = _kernel(entry)
        if k is None:
            pools += 1
        elif k != (9 if pools < 2 else 5):
            raise ValueError(f"conv{k} after {pools} pool(s) breaks the 9x9-then-5x5 kernel schedule")


PAPER_STACK = ("c9", "c9", "P", "c9", "c9", "P", "c5", "c5", "P", "c5", "c5", "P", "c5", "c5", "P", "c5")
PAPER_WIDTHS = (32, 32, 64, 64, 128, 128, 256, 256, 512, 512, 1024)
DESK_STACK = ("c9", "P", "c9", "P", "c5", "c5", "P")
DESK_WIDTHS = (16, 32, 48, 64)


@dataclass(frozen=True)
class CountArchSpec:
    input_size: int = 448
    stack: tuple[str, ...] = PAPER_STACK
    widths: tuple[int, ...] = PAPER_WIDTHS
    fc_widths: tuple[int, ...] = (512, 512)
    in_channels: int = 4
    lrn: tuple[float, int, float, float] = (2.0, 5, 1e-4, 0.75)
    kernel_schedule: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stack", tuple(self.stack))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "lrn", tuple(self.lrn))
        n_conv = sum(_kernel(e) is not None for e in self.stack)
        if n_conv != len(self.widths):
            raise ValueError(f"{n_conv} convs in stack but {len(self.widths)} widths")

    @classmethod
    def preset(cls, name: str) -> "CountArchSpec":
        if name == "full":
            return cls()
        if name == "desk":
            return cls(64, DESK_STACK, DESK_WIDTHS)
        raise ValueError(f"unknown countnet preset {name!r}")

    def trace(self):
        if self.kernel_schedule:
            check_kernel_schedule(self.stack)
        return plan_shape_trace(self.input_size, self.stack)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(kind="countnet", stack=list(self.stack), widths=list(self.widths),
                 fc_widths=list(self.fc_widths), lrn=list(self.lrn))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CountArchSpec":
        d = dict(d)
        if d.pop("kind", None) != "countnet":
            raise ValueError("not a countnet architecture")
        return cls(**d)


def count_parameters(spec: CountArchSpec) -> int:
    """Closed-form parameter count: sum of k*k*Cin*Cout + Cout over convs, plus the FC terms."""
    total, cin, widths = 0, spec.in_channels, iter(spec.widths)
    for entry in spec.stack:
        k = _kernel(entry)
        if k is not None:
            cout = next(widths)
            total += k * k * cin * cout + cout
            cin = cout
    for w in spec.fc_widths + (1,):
        total += cin * w + w
        cin = w
    return total


class CountNet(Network):
    def __init__(self, spec: CountArchSpec, rng: np.random.Generator, dtype=TRAIN_DTYPE, input_grad=False):
        spec.trace()
        self.spec = spec
        k, n, alpha, beta = spec.lrn
        layers, cin, widths, ci, pi = [], spec.in_channels, iter(spec.widths), 0, 0
        for entry in spec.stack:
            ks = _kernel(entry)
            if ks is None:
                pi += 1
                layers.append((f"pool{pi}", MaxPool2()))
                continue
            ci += 1
            cout = next(widths)
            layers += [(f"conv{ci}", Conv2d(cin, cout, ks, "none", rng, dtype, input_grad=ci > 1 or input_grad)),
                       (f"lrn{ci}", LRN(k, int(n), alpha, beta)),
                       (f"relu{ci}", ReLU())]
            cin = cout
        layers.append(("flatten", Flatten()))
        for i, w in enumerate(spec.fc_widths, start=1):
            layers += [(f"fc{i}", Linear(cin, w, rng, dtype)), (f"fc{i}.relu", ReLU())]
            cin = w
        layers.append(("out", Linear(cin, 1, rng, dtype)))
        super().__init__(layers, spec.to_dict())

    @property
    def fc_input_dim(self) -> int:
        return self.spec.widths[-1]


def build_countnet(spec: CountArchSpec, rng: np.random.Generator | None = None, dtype=TRAIN_DTYPE,
                   input_grad: bool = False) -> CountNet:
    """``input_grad`` keeps the gradient w.r.t. the network input (off for training)."""
    return CountNet(spec, rng if rng is not None else rng_stream(0), dtype, input_grad)


# ---------------------------------------------------------------------------
# input assembly and prediction


def assemble_srgb(rgb: np.ndarray, mask: np.ndarray | None, target_size: int) -> np.ndarray:
    """Resize so the long side is ``target_size``, zero-pad bottom/right to a square.

    Returns a (4,S,S) float32 array ``[mask, R, G, B]``; ``mask=None`` feeds a
    constant-one mask channel over the image area.
    """
    H, W = rgb.shape[-2:]
    if mask is not None and mask.shape != (H, W):
        raise ValueError(f"mask {mask.shape} not aligned with rgb {rgb.shape}")
    scale = target_size / max(H, W)
    h, w = (target_size, max(1, round(W * scale))) if H >= W else (max(1, round(H * scale)), target_size)
    m = np.ones((H, W), np.float32) if mask is None else mask.astype(np.float32)
    rgb_r = np.clip(augment.resize_bilinear(rgb.astype(np.float32), h, w), 0, 1)
    m_r = (augment.resize_bilinear(m, h, w) >= 0.5).astype(np.float32)
    out = np.zeros((4, target_size, target_size), np.float32)
    out[0, :h, :w] = m_r
    out[1:, :h, :w] = rgb_r
    return out


def round_count(raw: float) -> int:
    """Round half away from zero, clamp at 0."""
    r = math.floor(abs(raw) + 0.5) * (1 if raw >= 0 else -1)
    return max(0, int(r))


def predict_raw(net: CountNet, srgb: np.ndarray, batch_size: int = 32) -> np.ndarray:
    x = srgb[None] if srgb.ndim == 3 else srgb
    out = [net.forward(x[b:b + batch_size].astype(TRAIN_DTYPE), train=False)[:, 0]
           for b in range(0, len(x), batch_size)]
    return check_finite(np.concatenate(out), "countnet output")


def predict_count(net: CountNet, srgb: np.ndarray) -> tuple[float, int]:
    raw = float(predict_raw(net, srgb)[0])
    return raw, round_count(raw)


# ---------------------------------------------------------------------------
# training


@dataclass
class CountTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    optimizer: OptimizerConfig = COUNTNET_ADAM
    schedule: tuple = ()
    augment: AugmentPlan = AugmentPlan()
    mask_source: str = "ground_truth"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPlan.from_dict(self.augment)
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "optimizer": asdict(self.optimizer),
                "schedule": [list(s) for s in self.schedule], "augment": self.augment.to_dict(),
                "mask_source": self.mask_source, "seed": self.seed}


def build_training_set(records: Sequence[SampleRecord], masks: Sequence[np.ndarray | None], size: int,
                       plan: AugmentPlan, threads: int = 1):
    """Augmented SRGB tensors ``(N*variants, 4, S, S)`` and their labels."""

    def one(i):
        srgb = assemble_srgb(records[i].rgb, masks[i], size)
        variants = augment.make_count_variants(srgb[1:], srgb[0], plan, sample_id=i)
        return np.stack([np.concatenate([m[None], img]) for img, m in variants])

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            stacks = list(ex.map(one, range(len(records))))
    else:
        stacks = [one(i) for i in range(len(records))]
    labels = np.repeat([r.count for r in records], plan.variants_per_image).astype(np.float32)
    manifest = augment.variant_manifest([r.count for r in records], plan)
    assert len(manifest) == len(labels) and all(labels[j] == lab for j, (_, _, lab) in enumerate(manifest))
    return np.concatenate(stacks), labels


def _state_checkpoint(net: CountNet, opt_state: OptimizerState, cfg: CountTrainConfig, epoch: int) -> Checkpoint:
    opt = {f"{k}/{b}": v for k, bufs in opt_state.buffers.items() for b, v in bufs.items()}
    return Checkpoint(arch=net.arch, blobs={k: v.astype(np.float32) for k, v in net.state_dict().items()},
                      optimizer={k: v.astype(np.float32) for k, v in opt.items()}, epoch=epoch, seed=cfg.seed,
                      meta={"optimizer_step": opt_state.step, "optimizer_kind": cfg.optimizer.kind,
                            "mask_source": cfg.mask_source})


def train_countnet(records: Sequence[SampleRecord], spec: CountArchSpec, cfg: CountTrainConfig,
                   masks: Sequence[np.ndarray | None] | None = None, threads: int = 1):
    """Train on 36-variant augmented SRGB inputs; returns ``(net, checkpoint, loss_log)``.

    ``masks`` supplies the segmentation channel when ``mask_source`` is
    ``segnet``; ``ground_truth`` uses record masks and ``none`` a constant one.
    """
    if not records:
        raise DataError("empty dataset")
    if any(r.count is None for r in records):
        raise DataError("count training needs a leaf count for every record")
    if cfg.mask_source == "ground_truth":
        if any(r.mask is None for r in records):
            raise DataError("mask_source=ground_truth but some records have no mask")
        masks = [r.mask for r in records]
    elif cfg.mask_source == "none":
        masks = [None] * len(records)
    elif masks is None or len(masks) != len(records):
        raise DataError("mask_source=segnet needs one predicted mask per record")
    x, y = build_training_set(records, masks, spec.input_size, cfg.augment, threads)
    net = build_countnet(spec, rng_stream(cfg.seed, 2**32))
    params, grads = net.params(), net.grads()
    opt_state = OptimizerState()
    loss_log = []
    for epoch in range(1, cfg.epochs + 1):
        ocfg = config_for_epoch(cfg.optimizer, cfg.schedule, epoch)
        order = rng_stream(cfg.seed, 2**32 + epoch).permutation(len(x))
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            pred = net.forward(x[idx], train=True)
            loss, g = smooth_l1(pred, y[idx])
            if not np.isfinite(loss):
                check_finite(np.array([loss]), f"countnet loss at epoch {epoch}")
            net.backward(g)
            step(params, grads, opt_state, ocfg)
            total += loss * len(idx)
        mean = total / len(x)
        loss_log.append({"epoch": epoch, "mask_source": cfg.mask_source, "mean_loss": mean})
        log.info("countnet[%s] epoch %d loss %.5f", cfg.mask_source, epoch, mean)
    return net, _state_checkpoint(net, opt_state, cfg, cfg.epochs), loss_log


def countnet_from_checkpoint(ckpt: Checkpoint) -> CountNet:
    net = build_countnet(CountArchSpec.from_dict(ckpt.arch))
    check_against(ckpt, {k: v.shape for k, v in net.state_dict().items()})
    net.load_state_dict(ckpt.blobs)
    return net
