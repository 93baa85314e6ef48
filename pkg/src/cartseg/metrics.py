"""Per-class overlap and surface-distance metrics and dataset-level reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CartsegError
from .volume import Cartilage, read_csgv

UNDEFINED = "undefined"
ROW_CLASSES = ("FC", "TC", "PC", "ALL", "ALL_AVG")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise CartsegError("metric-shape-mismatch", f"{a.shape} vs {b.shape}")
    return a, b


def dsc(pred, gt) -> float:
    """Dice coefficient; 1.0 when both masks are empty."""
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def voe(pred, gt) -> float:
    """Volumetric overlap error in percent; 0.0 when both masks are empty."""
    a, b = _pair(pred, gt)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return 100.0 * (1.0 - int(np.logical_and(a, b).sum()) / union)


def surface_points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(kernels.surface_mask(mask))


def asd(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """Average symmetric surface distance in mm, or ``"undefined"`` if either mask is empty."""
    a, b = _pair(pred, gt)
    if any(not s > 0 for s in spacing):
        raise CartsegError("invalid-spacing", f"spacing must be > 0, got {spacing}")
    if not a.any() or not b.any():
        return UNDEFINED
    sa, sb = surface_points(a), surface_points(b)
    d_ab = kernels.nearest_distances(sa, sb, spacing)
    d_ba = kernels.nearest_distances(sb, sa, spacing)
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def class_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    masks = {c.name: labels == int(c) for c in Cartilage}
    masks["ALL"] = labels > 0
    return masks


def case_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, spacing) -> dict[str, dict]:
    """Metrics per class plus the merged-foreground ``ALL`` row and the class-average ``ALL_AVG`` row."""
    if pred_labels.shape != gt_labels.shape:
        raise CartsegError("metric-shape-mismatch", f"{pred_labels.shape} vs {gt_labels.shape}")
    pm, gm = class_masks(pred_labels), class_masks(gt_labels)
    out = {}
    for name in ("FC", "TC", "PC", "ALL"):
        out[name] = {
            "dsc": dsc(pm[name], gm[name]),
            "voe": voe(pm[name], gm[name]),
            "asd": asd(pm[name], gm[name], spacing),
        }
    per_class = [out[c.name] for c in Cartilage]
    out["ALL_AVG"] = {k: _mean_defined([m[k] for m in per_class]) for k in ("dsc", "voe", "asd")}
    return out


def _defined(values):
    return [v for v in values if v != UNDEFINED and v is not None]


def _mean_defined(values):
    vals = _defined(values)
    return float(np.mean(vals)) if vals else UNDEFINED


def _std_defined(values):
    vals = _defined(values)
    return float(np.std(vals)) if vals else UNDEFINED


@dataclass
class MetricsReport:
    cases: dict = field(default_factory=dict)  # case_id -> row class -> {dsc, voe, asd}

    def add(self, case_id: str, metrics: dict) -> None:
        self.cases[case_id] = metrics

    def values(self, row: str, metric: str) -> list:
        return [self.cases[c][row][metric] for c in sorted(self.cases)]

    def mean(self, row: str, metric: str):
        return _mean_defined(self.values(row, metric))

    def std(self, row: str, metric: str):
        """Population standard deviation over cases with a defined value."""
        return _std_defined(self.values(row, metric))

    def mean_foreground_dsc(self) -> float:
        return float(np.mean([self.mean(c.name, "dsc") for c in Cartilage]))

    def summary(self) -> dict:
        return {
            row: {m: {"mean": self.mean(row, m), "std": self.std(row, m)} for m in ("dsc", "voe", "asd")}
            for row in ROW_CLASSES
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(
            "# std is the population standard deviation; ALL = merged foreground mask (primary), "
            "ALL_AVG = mean of FC/TC/PC\n"
        )
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case_id", "class", "dsc", "voe_percent", "asd_mm"])
        for case_id in sorted(self.cases):
            for row in ROW_CLASSES:
                m = self.cases[case_id][row]
                writer.writerow([case_id, row, _fmt(m["dsc"]), _fmt(m["voe"]), _fmt(m["asd"])])
        for label, fn in (("MEAN", self.mean), ("STD", self.std)):
            for row in ROW_CLASSES:
                writer.writerow([label, row] + [_fmt(fn(row, m)) for m in ("dsc", "voe", "asd")])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v) -> str:
    if v == UNDEFINED:
        return UNDEFINED
    return f"{v:.6f}"


def read_report_csv(path) -> dict:
    """Parse a report written by :meth:`MetricsReport.write_csv` into ``{(case, class): row}``."""
    rows = {}
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows[(rec["case_id"], rec["class"])] = {
            k: (rec[k] if rec[k] == UNDEFINED else float(rec[k])) for k in ("dsc", "voe_percent", "asd_mm")
        }
    return rows


def _case_dirs(root: Path) -> dict[str, Path]:
    return {p.parent.name: p for p in sorted(root.glob("*/label.csgv"))}


def evaluate_dataset(pred_dir, gt_dir) -> MetricsReport:
    """Compare ``<pred_dir>/<case>/label.csgv`` against ``<gt_dir>/<case>/label.csgv``.

    Every predicted case needs a ground-truth partner; extra ground-truth cases
    are ignored so a single split can be evaluated against a full dataset.
    """
    preds = _case_dirs(Path(pred_dir))
    gts = _case_dirs(Path(gt_dir))
    missing = sorted(set(preds) - set(gts))
    if missing or not preds:
        raise CartsegError("case-mismatch", f"cases without ground truth: {missing or 'no predictions found'}")
    report = MetricsReport()
    for case_id, path in preds.items():
        pred = read_csgv(path)
        gt = read_csgv(gts[case_id])
        report.add(case_id, case_metrics(pred.array, gt.array, gt.spacing))
    return report
