import csv
import filecmp
import json

import pytest

from leafcount.cli import main
from leafcount.config import load_config, parse_override
from leafcount.errors import ConfigError
from leafcount.metrics import MetricsReport

FAST = """
[synth]
n = 4

[segnet]
widths = [4, 4, 4, 4, 4]
depths = [1, 1, 1, 1, 1]
stages = [{mode = "dense", epochs = 1, fg_weight = 1.2}]

[countnet]
epochs = 1
widths = [4, 4, 4, 4]
fc_widths = [8]
geometric = ["identity", "flip_lr"]
photometric = []
"""


@pytest.fixture()
def fast_cfg(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST)
    return str(p)


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only and not cmp.diff_files and not cmp.funny_files
    for sub in cmp.common_dirs:
        _same_tree(a / sub, b / sub)


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n", "5", "--seed", "1"]) == 0
    _same_tree(tmp_path / "a", tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a" / "synth").iterdir())
    assert "synth.csv" in files and "plant0000_rgb.png" in files and "plant0000_fg.png" in files
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["config_hash"]) == 64
    assert {"numpy", "scipy", "pillow", "python"} <= set(manifest["versions"])


def test_synth_ppm(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "2", "--format", "ppm"]) == 0
    assert (tmp_path / "synth" / "plant0001_rgb.ppm").read_bytes().startswith(b"P6")


@pytest.mark.parametrize("argv", [["bogus"], ["synth"], ["synth", "--out", "x", "--frobnicate"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[segnet]\nwindw = 32\n")
    assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2
    bad.write_text("[segnet\n")
    assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2
    assert main(["synth", "--out", str(tmp_path / "o"), "--set", "synth.n=many"]) == 2
    assert main(["synth", "--out", str(tmp_path / "o"), "--set", "countnet.stack=['c9']"]) == 2


def test_config_layering(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[run]\nseed = 4\n[countnet]\nepochs = 7\noptimizer = {lr = 0.5}\n")
    cfg = load_config(p, ["countnet.epochs=9"], {"run": {"seed": None, "threads": 2}})
    assert cfg["run"]["seed"] == 4 and cfg["run"]["threads"] == 2
    assert cfg["countnet"]["epochs"] == 9
    assert cfg["countnet"]["optimizer"]["lr"] == 0.5 and cfg["countnet"]["optimizer"]["kind"] == "adam"
    with pytest.raises(ConfigError):
        load_config(None, ["countnet.optimizer={lr = 1, nesterov = true}"])
    assert parse_override("segnet.window=64") == ("segnet", "window", 64)
    assert parse_override("countnet.mask_source=none") == ("countnet", "mask_source", "none")


def test_data_errors_exit_3(tmp_path, fast_cfg):
    (tmp_path / "empty").mkdir()
    assert main(["train-seg", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 3
    assert main(["train-seg", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    main(["synth", "--out", str(tmp_path / "d"), "--n", "2", "--config", fast_cfg])
    junk = tmp_path / "junk.lcnt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["infer", "--data", str(tmp_path / "d"), "--countnet", str(junk), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_4(tmp_path, fast_cfg):
    main(["synth", "--out", str(tmp_path / "d"), "--config", fast_cfg])
    rc = main(["train-count", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o"), "--config", fast_cfg,
               "--set", "countnet.optimizer={kind = 'sgd_momentum', lr = 1e30, momentum = 0.0}",
               "--set", "countnet.epochs=3"])
    assert rc == 4


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.mark.filterwarnings("ignore:precision has a zero denominator")
def test_pipeline_and_evaluate(tmp_path, fast_cfg):
    base = ["--config", fast_cfg]
    d = str(tmp_path / "data")
    assert main(["synth", "--out", d] + base) == 0
    assert main(["train-seg", "--data", d, "--out", str(tmp_path / "seg")] + base) == 0
    assert main(["train-count", "--data", d, "--out", str(tmp_path / "cnt")] + base) == 0
    loss = _read_csv(tmp_path / "seg" / "segnet_loss.csv")
    assert loss[0] == ["epoch", "stage", "mean_loss"] and len(loss) == 2
    assert main(["infer", "--data", d, "--segnet", str(tmp_path / "seg" / "segnet.lcnt"),
                 "--countnet", str(tmp_path / "cnt" / "countnet.lcnt"), "--out", str(tmp_path / "pred")] + base) == 0
    rows = _read_csv(tmp_path / "pred" / "predictions.csv")
    assert rows[0] == ["image_id", "raw", "count"] and len(rows) == 5
    assert rows[1][0] == "synth/plant0000"
    assert (tmp_path / "pred" / "masks" / "synth" / "plant0000_fg.png").exists()
    assert main(["evaluate", "--data", d, "--predictions", str(tmp_path / "pred" / "predictions.csv"),
                 "--masks", str(tmp_path / "pred" / "masks"), "--out", str(tmp_path / "ev")] + base) == 0
    report = MetricsReport.from_csv((tmp_path / "ev" / "metrics.csv").read_text())
    assert report.pooled.counts.n == 4 and report.pooled.precision is not None
    assert "AbsCountDiff" in (tmp_path / "ev" / "report.txt").read_text()
    # infer without a segnet is refused for a mask-trained countnet
    assert main(["infer", "--data", d, "--countnet", str(tmp_path / "cnt" / "countnet.lcnt"),
                 "--out", str(tmp_path / "p2")] + base) == 2


def _write_preds(path, truth, offset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "raw", "count"])
        for name, count in truth:
            w.writerow([f"synth/{name.removesuffix('_rgb.png')}", int(count) + float(offset), int(count) + offset])


def test_evaluate_perfect_predictions(tmp_path, fast_cfg):
    d = tmp_path / "data"
    main(["synth", "--out", str(d), "--config", fast_cfg])
    truth = _read_csv(d / "synth" / "synth.csv")
    _write_preds(tmp_path / "good.csv", truth, 0)
    _write_preds(tmp_path / "bad.csv", truth, 2)
    assert main(["evaluate", "--data", str(d), "--predictions", str(tmp_path / "bad.csv"),
                 "--out", str(tmp_path / "bad")]) == 0
    assert main(["evaluate", "--data", str(d), "--predictions", str(tmp_path / "good.csv"),
                 "--out", str(tmp_path / "good"), "--baseline", str(tmp_path / "bad" / "metrics.csv")]) == 0
    report = MetricsReport.from_csv((tmp_path / "good" / "metrics.csv").read_text())
    assert report.pooled.counts.percent_agreement == 100.0
    text = (tmp_path / "good" / "report.txt").read_text()
    assert "Compared with baseline" in text and "Less bias with better performance." in text


def test_rgb_only_ablation_pipeline(tmp_path, fast_cfg):
    base = ["--config", fast_cfg]
    d = str(tmp_path / "data")
    main(["synth", "--out", d] + base)
    assert main(["train-count", "--data", d, "--out", str(tmp_path / "cnt"), "--mask-source", "none"] + base) == 0
    assert _read_csv(tmp_path / "cnt" / "countnet_loss.csv")[1][1] == "none"
    assert main(["infer", "--data", d, "--countnet", str(tmp_path / "cnt" / "countnet.lcnt"),
                 "--out", str(tmp_path / "pred")] + base) == 0
