"""CVPPP-style dataset directories.

Layout::

    root/
      A1/
        plant001_rgb.png
        plant001_fg.png      # optional foreground mask
        A1.csv               # rows "<rgb filename>,<count>", header optional

One record per RGB image, sorted by id within each directory.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .images import decode_image, decode_mask, encode_image, encode_mask, write_bytes_atomic

DEFAULT_TAGS = ("A1", "A2", "A3", "A4", "A5")


@dataclass
class SampleRecord:
    id: str
    rgb: np.ndarray
    mask: np.ndarray | None = None
    count: int | None = None
    directory: str = "synth"

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"{self.id}: rgb must be (3,H,W), got {self.rgb.shape}")
        if self.mask is not None and self.mask.shape != self.rgb.shape[1:]:
            raise DataError(f"{self.id}: mask {self.mask.shape} does not match rgb {self.rgb.shape[1:]}")
        if self.count is not None and self.count < 0:
            raise DataError(f"{self.id}: negative count {self.count}")


@dataclass(frozen=True)
class SplitConfig:
    tags: Sequence[str] = DEFAULT_TAGS
    rgb_suffix: str = "_rgb.png"
    mask_suffix: str = "_fg.png"


def _read_counts(csv_path: Path) -> dict[str, int]:
    counts = {}
    with csv_path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise DataError(f"{csv_path}:{lineno + 1}: expected '<file>,<count>'")
            name, value = row[0].strip(), row[1].strip()
            try:
                counts[name] = int(value)
            except ValueError:
                if lineno == 0:
                    continue  # header row
                raise DataError(f"{csv_path}:{lineno + 1}: count {value!r} is not an integer") from None
    return counts


def load_dataset(root, split: SplitConfig = SplitConfig()) -> list[SampleRecord]:
    """Records of every tag directory under ``root``; empty ``split.tags`` means all subdirectories."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    tags = split.tags or sorted(p.name for p in root.iterdir() if p.is_dir())
    records = []
    for tag in tags:
        d = root / tag
        if not d.is_dir():
            continue
        csv_path = d / f"{tag}.csv"
        counts = _read_counts(csv_path) if csv_path.exists() else {}
        files = sorted(p.name for p in d.iterdir() if p.name.endswith(split.rgb_suffix))
        for name in counts:
            if not (d / name).exists():
                raise DataError(f"{csv_path}: row references missing file {name}")
        for name in files:
            sid = name[: -len(split.rgb_suffix)]
            rgb = decode_image(d / name)
            mpath = d / f"{sid}{split.mask_suffix}"
            mask = decode_mask(mpath) if mpath.exists() else None
            if mask is not None and mask.shape != rgb.shape[1:]:
                raise DataError(f"{mpath}: mask size {mask.shape} does not match rgb {rgb.shape[1:]}")
            records.append(SampleRecord(sid, rgb, mask, counts.get(name), tag))
    return records


def write_dataset(records: Sequence[SampleRecord], root, fmt: str = "png") -> None:
    """Write records in the layout :func:`load_dataset` reads (suffixes from ``fmt``)."""
    root = Path(root)
    by_tag: dict[str, list[SampleRecord]] = {}
    for r in records:
        by_tag.setdefault(r.directory, []).append(r)
    for tag, recs in by_tag.items():
        d = root / tag
        d.mkdir(parents=True, exist_ok=True)
        rows = io.StringIO()
        for r in sorted(recs, key=lambda r: r.id):
            write_bytes_atomic(d / f"{r.id}_rgb.{fmt}", encode_image(r.rgb, fmt))
            if r.mask is not None:
                write_bytes_atomic(d / f"{r.id}_fg.{fmt}", encode_mask(r.mask, fmt))
            if r.count is not None:
                rows.write(f"{r.id}_rgb.{fmt},{r.count}\n")
        write_bytes_atomic(d / f"{tag}.csv", rows.getvalue().encode())


def split_for_format(fmt: str, tags: Sequence[str] = DEFAULT_TAGS) -> SplitConfig:
    return SplitConfig(tuple(tags), f"_rgb.{fmt}", f"_fg.{fmt}")
