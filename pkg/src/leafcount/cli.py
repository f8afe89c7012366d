"""Command-line front end: ``leafcount <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .countnet import assemble_srgb, countnet_from_checkpoint, predict_raw, round_count, train_countnet
from .dataset import SampleRecord, load_dataset, write_dataset
from .errors import ConfigError, DataError
from .images import decode_mask, encode_mask, write_bytes_atomic
from .metrics import MetricsReport, build_report, interpret_report
from .segnet import segment_image, segnet_from_checkpoint, train_segnet
from .synth import generate_synthetic
from .tensor import NumericError

log = logging.getLogger("leafcount")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _versions() -> dict:
    import PIL
    import scipy
    return {"leafcount": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pillow": PIL.__version__, "python": platform.python_version()}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, outputs: Sequence[Path], inputs: dict | None = None) -> None:
    """``manifest.json`` next to the outputs: effective config, its hash, seed, versions, output digests."""
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_mod.config_hash(cfg),
        "seed": cfg["run"]["seed"],
        "threads": cfg["run"]["threads"],
        "versions": _versions(),
        "inputs": inputs or {},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(outputs)},
    }
    write_bytes_atomic(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _csv_bytes(header: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map; a thread pool only when ``threads > 1``."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def _pmap_net(net, fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map of ``fn(net_copy, item)``; layers cache activations, so each worker owns a copy."""
    if threads <= 1 or len(items) < 2:
        return [fn(net, x) for x in items]
    n = min(threads, len(items))
    bounds = [len(items) * i // n for i in range(n + 1)]
    chunks = [items[bounds[i]:bounds[i + 1]] for i in range(n)]
    nets = [net] + [copy.deepcopy(net) for _ in range(n - 1)]
    with ThreadPoolExecutor(n) as ex:
        parts = list(ex.map(lambda k: [fn(nets[k], x) for x in chunks[k]], range(n)))
    return [y for part in parts for y in part]


def _load(data: str, cfg: dict) -> list[SampleRecord]:
    records = load_dataset(data, config_mod.split_config(cfg))
    if not records:
        raise DataError(f"no images found under {data}")
    return records


def _image_id(r: SampleRecord) -> str:
    return f"{r.directory}/{r.id}"


def _segment_all(net, records, cfg: dict) -> list[np.ndarray]:
    inf = cfg["infer"]
    return _pmap_net(net, lambda n, r: segment_image(n, r.rgb, inf["window"], inf["stride"], inf["batch_size"],
                                                     upscale_small=True)[0], records, cfg["run"]["threads"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: dict) -> None:
    s = cfg["synth"]
    out = Path(args.out)
    records = generate_synthetic(config_mod.synth_config(cfg), s["n"], s["start"], s["tag"])
    write_dataset(records, out, cfg["data"]["format"])
    files = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    write_manifest(out, "synth", cfg, files)
    log.info("wrote %d synthetic images to %s", len(records), out)


def cmd_train_seg(args, cfg: dict) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _load(args.data, cfg)
    _, ckpt, loss_log = train_segnet(records, config_mod.seg_arch(cfg), config_mod.seg_train_config(cfg),
                                     threads=cfg["run"]["threads"])
    ckpt_path, loss_path = out / "segnet.lcnt", out / "segnet_loss.csv"
    save_checkpoint(ckpt_path, ckpt)
    write_bytes_atomic(loss_path, _csv_bytes(("epoch", "stage", "mean_loss"),
                                             [(e["epoch"], e["stage"], _fmt_float(e["mean_loss"])) for e in loss_log]))
    write_manifest(out, "train-seg", cfg, [ckpt_path, loss_path], {"data": str(args.data)})


def cmd_train_count(args, cfg: dict) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _load(args.data, cfg)
    tcfg = config_mod.count_train_config(cfg)
    masks = None
    inputs = {"data": str(args.data)}
    if tcfg.mask_source == "segnet":
        if not args.segnet:
            raise ConfigError("countnet.mask_source = segnet needs --segnet CHECKPOINT")
        masks = _segment_all(segnet_from_checkpoint(load_checkpoint(args.segnet)), records, cfg)
        inputs["segnet"] = str(args.segnet)
    _, ckpt, loss_log = train_countnet(records, config_mod.count_arch(cfg), tcfg, masks=masks,
                                       threads=cfg["run"]["threads"])
    ckpt_path, loss_path = out / "countnet.lcnt", out / "countnet_loss.csv"
    save_checkpoint(ckpt_path, ckpt)
    write_bytes_atomic(loss_path, _csv_bytes(
        ("epoch", "stage", "mean_loss"),
        [(e["epoch"], e["mask_source"], _fmt_float(e["mean_loss"])) for e in loss_log]))
    write_manifest(out, "train-count", cfg, [ckpt_path, loss_path], inputs)


def cmd_infer(args, cfg: dict) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _load(args.data, cfg)
    count_ckpt = load_checkpoint(args.countnet)
    countnet = countnet_from_checkpoint(count_ckpt)
    uses_mask = count_ckpt.meta.get("mask_source", "ground_truth") != "none"
    outputs, inputs = [], {"data": str(args.data), "countnet": str(args.countnet)}
    masks: list[np.ndarray | None] = [None] * len(records)
    if args.segnet:
        masks = _segment_all(segnet_from_checkpoint(load_checkpoint(args.segnet)), records, cfg)
        inputs["segnet"] = str(args.segnet)
        fmt = cfg["infer"]["mask_format"]
        for r, m in zip(records, masks):
            d = out / "masks" / r.directory
            d.mkdir(parents=True, exist_ok=True)
            path = d / f"{r.id}_fg.{fmt}"
            write_bytes_atomic(path, encode_mask(m, fmt))
            outputs.append(path)
    elif uses_mask:
        raise ConfigError("this countnet was trained with masks; pass --segnet CHECKPOINT")
    size = countnet.spec.input_size
    srgb = np.stack(_pmap(lambda rm: assemble_srgb(rm[0].rgb, rm[1] if uses_mask else None, size),
                          list(zip(records, masks)), cfg["run"]["threads"]))
    raw = predict_raw(countnet, srgb)
    pred_path = out / "predictions.csv"
    write_bytes_atomic(pred_path, _csv_bytes(("image_id", "raw", "count"),
                                             [(_image_id(r), _fmt_float(v), round_count(float(v)))
                                              for r, v in zip(records, raw)]))
    outputs.append(pred_path)
    write_manifest(out, "infer", cfg, outputs, inputs)


def read_predictions(path) -> dict[str, int]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read predictions {path}: {e}") from e
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or list(reader.fieldnames) != ["image_id", "raw", "count"]:
        raise DataError(f"{path}: header must be image_id,raw,count")
    out = {}
    for i, row in enumerate(reader, start=2):
        try:
            out[row["image_id"]] = int(row["count"])
        except (TypeError, ValueError):
            raise DataError(f"{path}:{i}: count {row['count']!r} is not an integer") from None
    return out


def cmd_evaluate(args, cfg: dict) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _load(args.data, cfg)
    groups: dict[str, dict] = {}
    if args.predictions:
        preds = read_predictions(args.predictions)
        for r in records:
            if r.count is None:
                continue
            key = _image_id(r)
            if key not in preds:
                raise DataError(f"{args.predictions}: no prediction for {key}")
            g = groups.setdefault(r.directory, {"pred": [], "truth": []})
            g["pred"].append(preds[key])
            g["truth"].append(r.count)
    if args.masks:
        fmt = cfg["infer"]["mask_format"]
        for r in records:
            if r.mask is None:
                continue
            path = Path(args.masks) / r.directory / f"{r.id}_fg.{fmt}"
            if not path.exists():
                raise DataError(f"missing predicted mask {path}")
            g = groups.setdefault(r.directory, {})
            g.setdefault("pred_masks", []).append(decode_mask(path))
            g.setdefault("truth_masks", []).append(r.mask)
    if not groups:
        raise DataError("nothing to evaluate: give --predictions and/or --masks with matching ground truth")
    report = build_report(groups)
    baseline = None
    if args.baseline:
        try:
            baseline = MetricsReport.from_csv(Path(args.baseline).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read baseline {args.baseline}: {e}") from e
    text = report.to_table()
    notes = interpret_report(report, baseline) if baseline and baseline.pooled.counts else []
    if notes:
        text += "\nCompared with baseline:\n" + "".join(f"- {n}\n" for n in notes)
    losses = []
    for item in args.loss or []:
        label, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--loss expects LABEL=PATH, got {item!r}")
        losses.append((label, _read_loss(path)))
    if losses:
        text += "\nFinal training loss:\n"
        width = max(len(label) for label, _ in losses)
        text += "".join(f"{label.ljust(width)}  epoch {ep}  {loss:.5f}\n" for label, (ep, loss) in losses)
    metrics_path, report_path = out / "metrics.csv", out / "report.txt"
    write_bytes_atomic(metrics_path, report.to_csv().encode())
    write_bytes_atomic(report_path, text.encode())
    write_manifest(out, "evaluate", cfg, [metrics_path, report_path],
                   {k: str(v) for k, v in (("data", args.data), ("predictions", args.predictions),
                                           ("masks", args.masks), ("baseline", args.baseline)) if v})
    sys.stdout.write(text)


def _read_loss(path) -> tuple[int, float]:
    try:
        rows = list(csv.DictReader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
        last = rows[-1]
        return int(last["epoch"]), float(last["mean_loss"])
    except (OSError, IndexError, KeyError, ValueError) as e:
        raise DataError(f"cannot read loss log {path}: {e}") from e


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--preset", choices=config_mod.PRESETS, help="default values to start from (desk)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--threads", type=int, help="worker threads; 1 is bit-reproducible (run.threads)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="leafcount", description="Two-stage leaf counting: segmentation then regression.")
    parser.add_argument("--version", action="version", version=f"leafcount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic rosette dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of images (synth.n)")
    p.add_argument("--start", type=int, help="index of the first image (synth.start)")
    p.add_argument("--tag", help="directory name (synth.tag)")
    p.add_argument("--format", choices=("png", "ppm"), help="image format (data.format)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", parents=[common], help="train the segmentation network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-count", parents=[common], help="train the counting network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-source", choices=("ground_truth", "segnet", "none"), help="countnet.mask_source")
    p.add_argument("--segnet", help="segmentation checkpoint (mask source segnet)")
    p.set_defaults(func=cmd_train_count)

    p = sub.add_parser("infer", parents=[common], help="segment and count images")
    p.add_argument("--data", required=True)
    p.add_argument("--countnet", required=True)
    p.add_argument("--segnet", help="segmentation checkpoint; required unless the countnet ignores masks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="predictions CSV from infer")
    p.add_argument("--masks", help="mask directory from infer")
    p.add_argument("--baseline", help="metrics CSV of a run to compare against")
    p.add_argument("--loss", action="append", metavar="LABEL=PATH", help="loss CSV to summarize (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _flags(args) -> dict:
    flags = {"run": {"seed": args.seed, "threads": args.threads}}
    if args.command == "synth":
        flags["synth"] = {"n": args.n, "start": args.start, "tag": args.tag}
        flags["data"] = {"format": args.format}
    if args.command == "train-count":
        flags["countnet"] = {"mask_source": args.mask_source}
    return flags


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load_config(args.config, args.set, _flags(args), args.preset)
        args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
