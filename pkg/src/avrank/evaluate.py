"""A/V classification metrics, connectivity statistics and ablation tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import AVMask

MODES = {"gt": "gt_pixels", "gt_pixels": "gt_pixels",
         "seg": "segmented_pixels", "segmented_pixels": "segmented_pixels"}
MIN_COMPONENT = 10
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class AVMetrics:
    acc: float
    sen: float
    spec: float
    n_artery: int
    n_vein: int
    tp_artery: int
    tp_vein: int
    mode: str


def _mode(mode: str) -> str:
    try:
        return MODES[mode]
    except KeyError:
        raise ValueError(f"unknown evaluation mode {mode!r}") from None


def _from_counts(ta, tv, na, nv, mode) -> AVMetrics:
    if na == 0:
        raise ValueError("no artery pixels to evaluate")
    if nv == 0:
        raise ValueError("no vein pixels to evaluate")
    return AVMetrics(acc=(ta + tv) / (na + nv), sen=ta / na, spec=tv / nv,
                     n_artery=int(na), n_vein=int(nv), tp_artery=int(ta), tp_vein=int(tv),
                     mode=mode)


def av_metrics(pred: AVMask, gt: AVMask, mode: str = "gt_pixels") -> AVMetrics:
    """Artery-positive accuracy, sensitivity and specificity.

    Scored pixels are ground-truth vessels with a unique A/V label (crossings
    and uncertain pixels are skipped). In ``gt_pixels`` mode a missed vessel
    pixel counts as misclassified; ``segmented_pixels`` mode only scores
    pixels the prediction also marks as vessel.
    """
    mode = _mode(mode)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in shape")
    ga, gv, gves = gt.artery > 0.5, gt.vein > 0.5, gt.vessel > 0.5
    scored = gves & (ga ^ gv) & ~gt.ignore
    pa, pv, pves = pred.artery > 0.5, pred.vein > 0.5, pred.vessel > 0.5
    if mode == "segmented_pixels":
        scored &= pves
    gt_art, gt_vein = scored & ga, scored & gv
    pred_art = pves & pa & ~pv
    pred_vein = pves & pv & ~pa
    return _from_counts(np.count_nonzero(gt_art & pred_art), np.count_nonzero(gt_vein & pred_vein),
                        np.count_nonzero(gt_art), np.count_nonzero(gt_vein), mode)


def pool_metrics(metrics) -> AVMetrics:
    """Pixel-pooled metrics over several images."""
    metrics = list(metrics)
    modes = {m.mode for m in metrics}
    if len(modes) != 1:
        raise ValueError("cannot pool metrics from different modes")
    return _from_counts(sum(m.tp_artery for m in metrics), sum(m.tp_vein for m in metrics),
                        sum(m.n_artery for m in metrics), sum(m.n_vein for m in metrics),
                        modes.pop())


@dataclass
class ClassConnectivity:
    component_count: int
    largest_component_ratio: float | None  # None for an empty class


@dataclass
class ConnectivityReport:
    artery: ClassConnectivity
    vein: ClassConnectivity

    def __getitem__(self, name) -> ClassConnectivity:
        return getattr(self, name)


def _class_connectivity(pixels: np.ndarray, min_size: int) -> ClassConnectivity:
    total = int(pixels.sum())
    if total == 0:
        return ClassConnectivity(0, None)
    labels, n = ndimage.label(pixels, structure=_EIGHT)
    sizes = np.bincount(labels.ravel())[1:]
    return ClassConnectivity(int(np.count_nonzero(sizes >= min_size)), float(sizes.max()) / total)


def connectivity_report(mask: AVMask, min_size: int = MIN_COMPONENT) -> ConnectivityReport:
    """8-connected component statistics per class, ignoring components below ``min_size``."""
    return ConnectivityReport(
        artery=_class_connectivity(mask.artery > 0.5, min_size),
        vein=_class_connectivity(mask.vein > 0.5, min_size),
    )


TABLE_FIELDS = ("name", "mode", "acc", "sen", "spec", "n_artery", "n_vein",
                "artery_components", "vein_components", "artery_largest", "vein_largest")


@dataclass
class TableReport:
    csv: str
    text: str
    rows: list


def emit_tables(runs) -> TableReport:
    """Tabulate ``(name, AVMetrics, ConnectivityReport | None)`` runs.

    Returns CSV text plus a fixed-width table with Acc/Sen/Spec in percent.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to tabulate")
    rows = []
    for name, m, conn in runs:
        row = {"name": name, "mode": m.mode, "acc": m.acc, "sen": m.sen, "spec": m.spec,
               "n_artery": m.n_artery, "n_vein": m.n_vein,
               "artery_components": "", "vein_components": "",
               "artery_largest": "", "vein_largest": ""}
        if conn is not None:
            for cls in ("artery", "vein"):
                row[f"{cls}_components"] = conn[cls].component_count
                ratio = conn[cls].largest_component_ratio
                row[f"{cls}_largest"] = "" if ratio is None else ratio
        rows.append(row)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    width = max(12, max(len(r["name"]) for r in rows) + 2)
    lines = [f"{'Configuration':<{width}}{'Acc':>8}{'Sen':>8}{'Spec':>8}", "-" * (width + 24)]
    for r in rows:
        lines.append(f"{r['name']:<{width}}{100 * r['acc']:>8.2f}{100 * r['sen']:>8.2f}"
                     f"{100 * r['spec']:>8.2f}")
    return TableReport(csv=buf.getvalue(), text="\n".join(lines) + "\n", rows=rows)


def read_table_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        for key in ("acc", "sen", "spec", "artery_largest", "vein_largest"):
            row[key] = float(row[key]) if row[key] != "" else None
        for key in ("n_artery", "n_vein", "artery_components", "vein_components"):
            row[key] = int(row[key]) if row[key] != "" else None
        out.append(row)
    return out
