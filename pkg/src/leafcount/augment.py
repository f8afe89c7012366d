"""Geometric and photometric augmentation plus patch sampling.

Images are (C,H,W) float arrays in [0,1]; masks are (H,W) arrays in {0,1}.
Geometric ops work on any array whose last two axes are spatial, so the same
call transforms an image and its mask identically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import rng_stream

GEOMETRIC = ("identity", "flip_tb", "flip_lr", "rot180")
PHOTOMETRIC = ("saturation", "blur", "sharpen", "noise")

SHARPEN_SIGMA = 1.0
# variant streams per sample; sample ``i`` owns streams [i*STREAMS_PER_SAMPLE, (i+1)*STREAMS_PER_SAMPLE)
STREAMS_PER_SAMPLE = 1024


def flip_rotate(image: np.ndarray, op: str) -> np.ndarray:
    if op == "identity":
        return image.copy()
    if op == "flip_tb":
        return np.ascontiguousarray(image[..., ::-1, :])
    if op == "flip_lr":
        return np.ascontiguousarray(image[..., :, ::-1])
    if op == "rot180":
        return np.ascontiguousarray(image[..., ::-1, ::-1])
    raise ValueError(f"unknown geometric op {op!r}; expected one of {GEOMETRIC}")


def inscribed_square_side(h: int, w: int, angle_deg: float) -> int:
    t = math.radians(angle_deg)
    # tiny epsilon keeps exact cases such as 0 degrees from flooring one short
    return int(math.floor(min(h, w) / (math.cos(t) + math.sin(t)) + 1e-9))


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    H, W = img.shape[-2:]
    y = np.clip(y, 0, H - 1)
    x = np.clip(x, 0, W - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros(y.shape, np.int64)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros(x.shape, np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (y - y0).astype(img.dtype)
    fx = (x - x0).astype(img.dtype)
    top = img[..., y0, x0] * (1 - fx) + img[..., y0, x1] * fx
    bot = img[..., y1, x0] * (1 - fx) + img[..., y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rotate_center_crop(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the centre (bilinear) and keep the largest inscribed square.

    The square never reaches outside the source image, so no fill value is
    ever sampled.
    """
    if not 0 <= angle_deg < 90:
        raise ValueError(f"angle must be in [0, 90), got {angle_deg}")
    H, W = image.shape[-2:]
    side = inscribed_square_side(H, W, angle_deg)
    if side < 1:
        raise ValueError(f"crop side {side} < 1 for {H}x{W} at {angle_deg} degrees")
    if angle_deg == 0:
        top, left = (H - side) // 2, (W - side) // 2
        return image[..., top:top + side, left:left + side].copy()
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    r = np.arange(side) - (side - 1) / 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    y = (H - 1) / 2 + c * dy + s * dx
    x = (W - 1) / 2 - s * dy + c * dx
    return _bilinear(image, y, x)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    out = correlate1d(image.astype(np.float64), k, axis=-2, mode="nearest")
    out = correlate1d(out, k, axis=-1, mode="nearest")
    return out.astype(image.dtype)


def photometric(image: np.ndarray, kind: str, strength: float, rng: np.random.Generator | None = None):
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    if kind == "saturation":
        return np.clip(image * strength, 0, 1).astype(image.dtype)
    if kind == "blur":
        return gaussian_blur(image, strength)
    if kind == "sharpen":
        detail = image - gaussian_blur(image, SHARPEN_SIGMA)
        return np.clip(image + strength * detail, 0, 1).astype(image.dtype)
    if kind == "noise":
        if rng is None:
            raise ValueError("noise needs an rng")
        return np.clip(image + rng.normal(0.0, strength, size=image.shape), 0, 1).astype(image.dtype)
    raise ValueError(f"unknown photometric op {kind!r}; expected one of {PHOTOMETRIC}")


DEFAULT_PHOTOMETRIC = (
    ("saturation", 0.8), ("saturation", 1.2),
    ("blur", 0.8), ("blur", 1.6),
    ("sharpen", 0.5), ("sharpen", 1.0),
    ("noise", 0.01), ("noise", 0.03),
)


@dataclass
class AugmentPlan:
    """Geometric states crossed with (identity + photometric ops)."""

    geometric: tuple[str, ...] = GEOMETRIC
    photometric: tuple[tuple[str, float], ...] = DEFAULT_PHOTOMETRIC
    seed: int = 0

    def __post_init__(self):
        self.geometric = tuple(self.geometric)
        self.photometric = tuple((str(k), float(s)) for k, s in self.photometric)
        for g in self.geometric:
            if g not in GEOMETRIC:
                raise ValueError(f"unknown geometric op {g!r}")
        for k, s in self.photometric:
            if k not in PHOTOMETRIC or s < 0:
                raise ValueError(f"bad photometric entry ({k!r}, {s})")

    @property
    def variants_per_image(self) -> int:
        return len(self.geometric) * (1 + len(self.photometric))

    def to_dict(self) -> dict:
        return {"geometric": list(self.geometric), "photometric": [list(p) for p in self.photometric],
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPlan":
        unknown = set(d) - {"geometric", "photometric", "seed"}
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)


def make_count_variants(image: np.ndarray, mask: np.ndarray | None, plan: AugmentPlan, sample_id: int = 0):
    """All (image, mask) variants of one sample, in (geometric, photometric) order.

    Variant 0 is the untouched input.  Photometric ops touch the image only.
    """
    if mask is not None and mask.shape != image.shape[-2:]:
        raise ValueError(f"mask {mask.shape} not aligned with image {image.shape}")
    out = []
    vid = 0
    for g in plan.geometric:
        gi = flip_rotate(image, g)
        gm = None if mask is None else flip_rotate(mask, g)
        out.append((gi, gm))
        vid += 1
        for kind, strength in plan.photometric:
            rng = rng_stream(plan.seed, sample_id * STREAMS_PER_SAMPLE + vid)
            out.append((photometric(gi, kind, strength, rng), None if gm is None else gm.copy()))
            vid += 1
    return out


def dense_positions(length: int, window: int, stride: int) -> list[int]:
    """0, stride, 2*stride, ... plus the final window flush with the edge."""
    if window > length:
        raise ValueError(f"window {window} larger than extent {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    pos = list(range(0, length - window + 1, stride))
    if pos[-1] != length - window:
        pos.append(length - window)
    return pos


def patch_sampler(image, mask, window: int, mode: str = "dense", stride: int | None = None,
                  rng: np.random.Generator | None = None, n: int = 1):
    """Crop ``window``-sized patches; returns ``[(patch, mask_patch, (top, left)), ...]``.

    ``dense`` tiles the image row by row; ``random`` draws ``n`` uniform
    positions from ``rng``.
    """
    H, W = image.shape[-2:]
    if window > min(H, W):
        raise ValueError(f"window {window} larger than image {H}x{W}")
    if mode == "dense":
        stride = window if stride is None else stride
        positions = [(t, l) for t in dense_positions(H, window, stride) for l in dense_positions(W, window, stride)]
    elif mode == "random":
        if rng is None:
            raise ValueError("random sampling needs an rng")
        positions = [(int(rng.integers(0, H - window + 1)), int(rng.integers(0, W - window + 1))) for _ in range(n)]
    else:
        raise ValueError(f"mode must be 'dense' or 'random', got {mode!r}")
    out = []
    for t, l in positions:
        p = image[..., t:t + window, l:l + window]
        m = None if mask is None else mask[t:t + window, l:l + window]
        out.append((p, m, (t, l)))
    return out


def random_fg_crop(image, mask, window: int, rng: np.random.Generator):
    """Random crop that contains at least one foreground pixel when the mask has any."""
    H, W = image.shape[-2:]
    if window > min(H, W):
        raise ValueError(f"window {window} larger than image {H}x{W}")
    fg = np.flatnonzero(mask) if mask is not None else np.empty(0)
    if fg.size:
        r, c = divmod(int(fg[rng.integers(0, fg.size)]), W)
        t = int(rng.integers(max(0, r - window + 1), min(r, H - window) + 1))
        l = int(rng.integers(max(0, c - window + 1), min(c, W - window) + 1))
    else:
        t = int(rng.integers(0, H - window + 1))
        l = int(rng.integers(0, W - window + 1))
    m = None if mask is None else mask[t:t + window, l:l + window]
    return image[..., t:t + window, l:l + window], m


def variant_manifest(labels, plan: AugmentPlan):
    """``(sample index, variant index, label)`` for every augmented instance, without pixels."""
    n = plan.variants_per_image
    return [(i, v, lab) for i, lab in enumerate(labels) for v in range(n)]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, pixel-centre aligned."""
    H, W = image.shape[-2:]
    if (H, W) == (out_h, out_w):
        return image.copy()
    y = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    x = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return _bilinear(image, yy, xx)
