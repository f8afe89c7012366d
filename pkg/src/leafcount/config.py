"""Run configuration: a TOML document of sections, defaults per preset, CLI overrides.

Every key has a default, so the effective configuration is fully explicit.
Unknown sections or keys are rejected.  Values are type-checked against the
default they replace.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Iterable, Mapping

from .augment import DEFAULT_PHOTOMETRIC, GEOMETRIC, AugmentPlan
from .countnet import DESK_STACK, DESK_WIDTHS, PAPER_STACK, PAPER_WIDTHS, CountArchSpec, CountTrainConfig
from .dataset import SplitConfig
from .errors import ConfigError
from .optim import OptimizerConfig
from .segnet import DESK_WIDTHS as SEG_DESK_WIDTHS
from .segnet import FULL_WIDTHS, VGG_DEPTHS, SegArchSpec, SegStage, SegTrainConfig
from .synth import SynthConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

PRESETS = ("desk", "full")

_SEG_SGD = {"kind": "sgd_momentum", "lr": 0.01, "momentum": 0.9, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
            "weight_decay": 1e-4}
_COUNT_ADAM = dict(_SEG_SGD, kind="adam", lr=1e-4)

_FULL = {
    "run": {"preset": "full", "seed": 0, "threads": 1},
    "data": {"tags": [], "rgb_suffix": "auto", "mask_suffix": "auto", "format": "png"},
    "synth": {"n": 64, "start": 0, "tag": "synth", "size": 64, "count_min": 1, "count_max": 6,
              "leaf_length": [15.0, 20.0], "leaf_width": [6.0, 8.5], "center_offset": 2.0,
              "texture_amplitude": 0.06},
    "segnet": {"widths": list(FULL_WIDTHS), "depths": list(VGG_DEPTHS), "window": 224, "stride": 112,
               "batch_size": 8, "rotation_step": 4.0,
               "photometric": [["blur", 0.8], ["blur", 1.6], ["sharpen", 0.5], ["sharpen", 1.0]],
               "stages": [{"mode": "random", "epochs": 5, "fg_weight": 2.0, "bg_weight": 1.0, "crops_per_image": 4},
                          {"mode": "dense_flip", "epochs": 8, "fg_weight": 1.2, "bg_weight": 1.0,
                           "crops_per_image": 4},
                          {"mode": "dense", "epochs": 37, "fg_weight": 1.2, "bg_weight": 1.0,
                           "crops_per_image": 4}],
               "optimizer": dict(_SEG_SGD), "schedule": []},
    "countnet": {"input_size": 448, "stack": list(PAPER_STACK), "widths": list(PAPER_WIDTHS),
                 "fc_widths": [512, 512], "epochs": 40, "batch_size": 16, "mask_source": "ground_truth",
                 "optimizer": dict(_COUNT_ADAM), "schedule": [],
                 "geometric": list(GEOMETRIC), "photometric": [list(p) for p in DEFAULT_PHOTOMETRIC]},
    "infer": {"window": 224, "stride": 112, "batch_size": 16, "mask_format": "png"},
}

_DESK_OVERRIDES = {
    "run": {"preset": "desk"},
    "segnet": {"widths": list(SEG_DESK_WIDTHS), "window": 32, "stride": 16,
               "stages": [{"mode": "random", "epochs": 2, "fg_weight": 2.0, "bg_weight": 1.0, "crops_per_image": 4},
                          {"mode": "dense_flip", "epochs": 1, "fg_weight": 1.5, "bg_weight": 1.0,
                           "crops_per_image": 4},
                          {"mode": "dense", "epochs": 3, "fg_weight": 1.5, "bg_weight": 1.0,
                           "crops_per_image": 4}]},
    "countnet": {"input_size": 64, "stack": list(DESK_STACK), "widths": list(DESK_WIDTHS), "epochs": 3,
                 "optimizer": dict(_COUNT_ADAM, lr=1e-3)},
    "infer": {"window": 32, "stride": 16},
}

# table-valued keys merged per entry
_TABLE_KEYS = {("segnet", "optimizer"), ("countnet", "optimizer")}


def defaults(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    cfg = copy.deepcopy(_FULL)
    if preset == "desk":
        for section, values in _DESK_OVERRIDES.items():
            cfg[section].update(copy.deepcopy(values))
    return cfg


def _check_type(where: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
    return value


def merge(base: dict, overrides: Mapping, origin: str = "config") -> dict:
    """Return ``base`` updated by ``overrides``; unknown keys raise :class:`ConfigError`."""
    out = copy.deepcopy(base)
    for section, values in overrides.items():
        if section not in out:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"{origin}: [{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            where = f"{origin}: {section}.{key}"
            default = out[section][key]
            value = _check_type(where, default, value)
            if (section, key) in _TABLE_KEYS:
                unknown = set(value) - set(default)
                if unknown:
                    raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
                value = {**default, **{k: _check_type(f"{where}.{k}", default[k], v) for k, v in value.items()}}
            out[section][key] = value
    return out


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with the value parsed as a TOML value (bare words become strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return section, key, value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                flags: Mapping[str, Mapping[str, Any]] | None = None, preset: str | None = None) -> dict:
    """Effective configuration: preset defaults < file < ``--set`` overrides < explicit flags."""
    file_cfg: dict = {}
    if path is not None:
        try:
            file_cfg = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    chosen = preset or file_cfg.get("run", {}).get("preset", "desk")
    cfg = merge(defaults(chosen), file_cfg, str(path) if path else "config")
    cfg["run"]["preset"] = chosen
    extra: dict = {}
    for text in overrides:
        section, key, value = parse_override(text)
        extra.setdefault(section, {})[key] = value
    cfg = merge(cfg, extra, "--set")
    if flags:
        cfg = merge(cfg, {s: {k: v for k, v in d.items() if v is not None} for s, d in flags.items()}, "flag")
    validate(cfg)
    return cfg


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _schedule(entries: list) -> tuple:
    out = []
    for e in entries:
        if not isinstance(e, dict) or "epoch" not in e:
            raise ConfigError(f"schedule entries need an 'epoch' key, got {e!r}")
        rest = {k: v for k, v in e.items() if k != "epoch"}
        out.append((int(e["epoch"]), rest))
    return tuple(out)


def _wrap(fn, what: str):
    try:
        return fn()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what}: {e}") from e


def split_config(cfg: Mapping) -> SplitConfig:
    """Empty ``tags`` reads every subdirectory; ``auto`` suffixes follow ``data.format``."""
    d = cfg["data"]
    rgb = f"_rgb.{d['format']}" if d["rgb_suffix"] == "auto" else d["rgb_suffix"]
    mask = f"_fg.{d['format']}" if d["mask_suffix"] == "auto" else d["mask_suffix"]
    return SplitConfig(tuple(d["tags"]), rgb, mask)


def synth_config(cfg: Mapping) -> SynthConfig:
    s = {k: v for k, v in cfg["synth"].items() if k not in ("n", "start", "tag")}
    return _wrap(lambda: SynthConfig(seed=cfg["run"]["seed"], **s), "synth")


def seg_arch(cfg: Mapping) -> SegArchSpec:
    s = cfg["segnet"]
    return _wrap(lambda: SegArchSpec(tuple(zip(s["depths"], s["widths"]))), "segnet architecture")


def seg_train_config(cfg: Mapping) -> SegTrainConfig:
    s = cfg["segnet"]

    def build():
        stages = []
        for st in s["stages"]:
            if not isinstance(st, dict):
                raise ConfigError(f"segnet.stages entries must be tables, got {st!r}")
            stages.append(SegStage(**st))
        return SegTrainConfig(window=s["window"], stride=s["stride"], stages=tuple(stages),
                              batch_size=s["batch_size"], optimizer=OptimizerConfig(**s["optimizer"]),
                              schedule=_schedule(s["schedule"]), rotation_step=s["rotation_step"],
                              photometric=tuple((str(k), float(v)) for k, v in s["photometric"]),
                              seed=cfg["run"]["seed"])
    return _wrap(build, "segnet")


def count_arch(cfg: Mapping) -> CountArchSpec:
    c = cfg["countnet"]
    return _wrap(lambda: CountArchSpec(c["input_size"], tuple(c["stack"]), tuple(c["widths"]), tuple(c["fc_widths"])),
                 "countnet architecture")


def count_train_config(cfg: Mapping) -> CountTrainConfig:
    c = cfg["countnet"]

    def build():
        plan = AugmentPlan(tuple(c["geometric"]), tuple((str(k), float(v)) for k, v in c["photometric"]),
                           seed=cfg["run"]["seed"])
        return CountTrainConfig(epochs=c["epochs"], batch_size=c["batch_size"],
                                optimizer=OptimizerConfig(**c["optimizer"]), schedule=_schedule(c["schedule"]),
                                augment=plan, mask_source=c["mask_source"], seed=cfg["run"]["seed"])
    return _wrap(build, "countnet")


def validate(cfg: Mapping) -> None:
    """Build every typed config once so errors surface before any work starts."""
    if cfg["run"]["seed"] < 0:
        raise ConfigError("run.seed must be >= 0")
    if cfg["run"]["threads"] < 1:
        raise ConfigError("run.threads must be >= 1")
    if cfg["data"]["format"] not in ("png", "ppm") or cfg["infer"]["mask_format"] not in ("png", "ppm"):
        raise ConfigError("image formats must be 'png' or 'ppm'")
    for key in ("window", "stride", "batch_size"):
        if cfg["infer"][key] < 1:
            raise ConfigError(f"infer.{key} must be >= 1")
    synth_config(cfg)
    seg_arch(cfg)
    seg_train_config(cfg)
    spec = count_arch(cfg)
    _wrap(spec.trace, "countnet architecture")
    count_train_config(cfg)
