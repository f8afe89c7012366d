"""Counting and segmentation metrics, reports and their comparative reading.

Count differences use ``d = pred - truth``; standard deviations divide by n.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CountMetrics:
    count_diff_mean: float
    count_diff_std: float
    abs_count_diff_mean: float
    abs_count_diff_std: float
    percent_agreement: float
    mse: float
    n: int


def count_metrics(pred: Sequence[int], truth: Sequence[int]) -> CountMetrics:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise ValueError(f"need equal non-zero lengths, got {p.size} predictions and {t.size} truths")
    d = p - t
    a = np.abs(d)
    return CountMetrics(float(d.mean()), float(d.std()), float(a.mean()), float(a.std()),
                        100.0 * float(np.count_nonzero(d == 0)) / d.size, float(np.mean(d * d)), int(d.size))


def _as_binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} mask is not binary (values outside {{0, 1}})")
    return m.astype(bool)


def confusion(pred_mask, truth_mask) -> tuple[int, int, int]:
    """``(TP, FP, FN)`` for the foreground class."""
    p = _as_binary(pred_mask, "predicted")
    t = _as_binary(truth_mask, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return int(np.count_nonzero(p & t)), int(np.count_nonzero(p & ~t)), int(np.count_nonzero(~p & t))


def _ratio(num: int, den: int, vacuous: bool, what: str) -> float:
    if den:
        return num / den
    value = 1.0 if vacuous else 0.0
    warnings.warn(f"{what} has a zero denominator; reporting {value}", RuntimeWarning, stacklevel=3)
    log.warning("%s has a zero denominator; reporting %s", what, value)
    return value


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    # vacuous success only when the other side is empty as well
    return (_ratio(tp, tp + fp, fn == 0, "precision"), _ratio(tp, tp + fn, fp == 0, "recall"))


def seg_metrics(pred_mask, truth_mask) -> tuple[float, float]:
    return precision_recall(*confusion(pred_mask, truth_mask))


# ---------------------------------------------------------------------------
# reports


COLUMNS = ("directory", "n", "count_diff_mean", "count_diff_std", "abs_count_diff_mean", "abs_count_diff_std",
           "percent_agreement", "mse", "precision", "recall")


@dataclass(frozen=True)
class ReportRow:
    directory: str
    counts: CountMetrics | None
    precision: float | None = None
    recall: float | None = None

    def as_dict(self) -> dict:
        d = {"directory": self.directory}
        c = asdict(self.counts) if self.counts else {}
        d["n"] = c.get("n")
        for k in COLUMNS[2:8]:
            d[k] = c.get(k)
        d["precision"], d["recall"] = self.precision, self.recall
        return d


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, directory: str = "All") -> ReportRow:
        for r in self.rows:
            if r.directory == directory:
                return r
        raise KeyError(directory)

    @property
    def pooled(self) -> ReportRow:
        return self.row("All")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v)
                        for v in r.as_dict().values()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        """Inverse of :meth:`to_csv`."""
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"metrics CSV header must be {','.join(COLUMNS)}")
        for rec in reader:
            num = {k: (float(v) if v != "" else None) for k, v in rec.items() if k not in ("directory", "n")}
            counts = None
            if rec["n"]:
                counts = CountMetrics(*(num[k] for k in COLUMNS[2:8]), n=int(rec["n"]))
            rows.append(ReportRow(rec["directory"], counts, num["precision"], num["recall"]))
        return cls(rows)

    def to_table(self) -> str:
        """Aligned text table, one column per directory plus ``All``."""
        def fmt(r: ReportRow, key: str) -> str:
            c = r.counts
            if key == "CountDiff":
                return "-" if c is None else f"{c.count_diff_mean:.2f}({c.count_diff_std:.2f})"
            if key == "AbsCountDiff":
                return "-" if c is None else f"{c.abs_count_diff_mean:.2f}({c.abs_count_diff_std:.2f})"
            if key == "PercentAgreement":
                return "-" if c is None else f"{c.percent_agreement:.1f}%"
            if key == "MSE":
                return "-" if c is None else f"{c.mse:.2f}"
            v = getattr(r, key.lower())
            return "-" if v is None else f"{v:.3f}"

        keys = ["CountDiff", "AbsCountDiff", "PercentAgreement", "MSE", "Precision", "Recall"]
        header = [""] + [r.directory for r in self.rows]
        body = [[k] + [fmt(r, k) for r in self.rows] for k in keys]
        widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i])
                           for i, cell in enumerate(line)) for line in [header] + body]
        return "\n".join(lines) + "\n"


def build_report(groups: Mapping[str, dict]) -> MetricsReport:
    """Per-directory rows plus an ``All`` row pooled over images.

    ``groups[dir]`` may hold ``pred``/``truth`` count lists and/or
    ``pred_masks``/``truth_masks`` lists.  Segmentation pools confusion
    counts over all pixels of all images.
    """
    rows, all_p, all_t, all_conf = [], [], [], [0, 0, 0]
    have_counts = have_masks = False
    for name in sorted(groups):
        g = groups[name]
        counts = None
        if g.get("pred") is not None:
            counts = count_metrics(g["pred"], g["truth"])
            all_p += list(g["pred"])
            all_t += list(g["truth"])
            have_counts = True
        prec = rec = None
        if g.get("pred_masks") is not None:
            if len(g["pred_masks"]) != len(g["truth_masks"]):
                raise ValueError(f"{name}: {len(g['pred_masks'])} predicted masks vs {len(g['truth_masks'])}")
            conf = [0, 0, 0]
            for pm, tm in zip(g["pred_masks"], g["truth_masks"]):
                conf = [a + b for a, b in zip(conf, confusion(pm, tm))]
            all_conf = [a + b for a, b in zip(all_conf, conf)]
            prec, rec = precision_recall(*conf)
            have_masks = True
        rows.append(ReportRow(name, counts, prec, rec))
    if not rows:
        raise ValueError("no groups to report")
    pooled_counts = count_metrics(all_p, all_t) if have_counts else None
    pooled_pr = precision_recall(*all_conf) if have_masks else (None, None)
    rows.append(ReportRow("All", pooled_counts, *pooled_pr))
    return MetricsReport(rows)


# ---------------------------------------------------------------------------
# comparative interpretation


INTERPRETATIONS = {
    ("CountDiff", "down"): "The model is less biased towards overestimate or underestimate.",
    ("AbsCountDiff", "down"): "Average performance is better.",
    ("PercentAgreement", "up"): "Number of accurate predictions is higher.",
    ("CountDiff", "down", "AbsCountDiff", "down"):
        "Less bias with better performance. Desirable properties of an ideal nonlinear regression model.",
    ("CountDiff", "down", "AbsCountDiff", "up"):
        "High positive and negative errors cancel out. Model behaviour tends to be linear than usual.",
    ("PercentAgreement", "down", "AbsCountDiff", "down"):
        "Although many predictions are not exactly accurate, all of the predictions are close to the "
        "original; therefore, model performance is uniform over the samples.",
    ("PercentAgreement", "up", "AbsCountDiff", "up"):
        "Although many predictions are exact, wrong predictions are far from the original; therefore, "
        "model performance is not uniform over the samples.",
}


def _direction(new: float, old: float, tol: float) -> str | None:
    if math.isclose(new, old, rel_tol=0.0, abs_tol=tol):
        return None
    return "down" if new < old else "up"


def interpret_report(report: MetricsReport, baseline: MetricsReport | None = None,
                     directory: str = "All", tol: float = 1e-9) -> list[str]:
    """Interpretation texts triggered by how ``report`` moves against ``baseline``.

    CountDiff compares the magnitude of the mean signed difference, i.e. the
    size of the bias.  Single-measure texts come first, then paired ones.
    """
    if baseline is None:
        return []
    a, b = report.row(directory).counts, baseline.row(directory).counts
    if a is None or b is None:
        return []
    moves = {
        "CountDiff": _direction(abs(a.count_diff_mean), abs(b.count_diff_mean), tol),
        "AbsCountDiff": _direction(a.abs_count_diff_mean, b.abs_count_diff_mean, tol),
        "PercentAgreement": _direction(a.percent_agreement, b.percent_agreement, tol),
    }
    out = []
    for key, text in INTERPRETATIONS.items():
        pairs = list(zip(key[::2], key[1::2]))
        if all(moves[m] == d for m, d in pairs):
            out.append(text)
    return out
