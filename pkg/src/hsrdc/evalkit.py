"""Accuracy and IoU metrics, feature-space distance diagnostics, CSV/SVG output."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


# -- classification / segmentation metrics -------------------------------
def accuracy(predictions, labels, per_class_mean: bool = False) -> float:
    """Overall accuracy, or the mean of per-class recalls."""
    pred = np.asarray(predictions).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    if pred.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    if pred.shape != lab.shape:
        raise ContractError("predictions and labels differ in length")
    if not per_class_mean:
        return float(np.mean(pred == lab))
    recalls = [np.mean(pred[lab == c] == c) for c in np.unique(lab)]
    return float(np.mean(recalls))


def iou_per_class(pred, label, k: int):
    """Per-class IoU (NaN for classes absent from both grids) and their mean."""
    pred = np.asarray(pred).reshape(-1)
    label = np.asarray(label).reshape(-1)
    if pred.shape != label.shape:
        raise ContractError("prediction and label grids differ in size")
    ious = np.full(k, np.nan)
    for c in range(1, k + 1):
        p, t = pred == c, label == c
        union = np.count_nonzero(p | t)
        if union:
            ious[c - 1] = np.count_nonzero(p & t) / union
    present = ~np.isnan(ious)
    miou = float(ious[present].mean()) if present.any() else float("nan")
    return ious, miou


def cluster_size_entropy(labels, k: int) -> float:
    counts = np.bincount(np.asarray(labels) - 1, minlength=k).astype(float)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# -- distance diagnostics ---------------------------------------------------
@dataclass
class DistanceDiagnostics:
    """Mean Euclidean distances in feature space; centroid quantities are
    NaN when no learned centroids are supplied."""

    src_instance_to_centroid: float
    tgt_instance_to_centroid: float
    src_insmean_to_centroid: float
    tgt_insmean_to_centroid: float
    src_instance_to_center: float
    tgt_instance_to_center: float
    src_insmean_to_center: float
    tgt_insmean_to_center: float
    src_instance_to_insmean: float
    tgt_instance_to_insmean: float
    srcinsmean_to_tgtinsmean: float

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _class_means(Z: np.ndarray, labels: np.ndarray, k: int) -> Dict[int, np.ndarray]:
    means = {}
    for c in range(1, k + 1):
        mask = labels == c
        if mask.any():
            means[c] = Z[:, mask].mean(axis=1)
        else:
            log.warning("class %d has no instances; skipped from class averages", c)
    return means


def _instance_to(Z: np.ndarray, labels: np.ndarray, refs: Mapping[int, np.ndarray]) -> float:
    dists = [np.linalg.norm(Z[:, labels == c] - ref[:, None], axis=0) for c, ref in refs.items()]
    dists = np.concatenate(dists) if dists else np.array([])
    return float(dists.mean()) if dists.size else float("nan")


def _mean_to(a: Mapping[int, np.ndarray], b: Mapping[int, np.ndarray]) -> float:
    shared = [c for c in a if c in b]
    if not shared:
        return float("nan")
    return float(np.mean([np.linalg.norm(a[c] - b[c]) for c in shared]))


def compute_diagnostics(Z_s, labels_s, Z_t, pseudo_labels_t, C=None, k: Optional[int] = None
                        ) -> DistanceDiagnostics:
    """Distances between instances, per-domain class means, combined class
    centers and learned centroids.  Target classes come from pseudo-labels."""
    Z_s = np.asarray(Z_s, dtype=float)
    Z_t = np.asarray(Z_t, dtype=float)
    ys = np.asarray(labels_s)
    yt = np.asarray(pseudo_labels_t)
    if k is None:
        if C is None:
            raise ContractError("K required when no centroids are given")
        k = np.asarray(C).shape[1]
    if C is not None and np.asarray(C).shape[1] != k:
        raise ContractError("centroid matrix must have K columns")
    ms = _class_means(Z_s, ys, k)
    mt = _class_means(Z_t, yt, k)
    centers = _class_means(np.concatenate([Z_s, Z_t], axis=1), np.concatenate([ys, yt]), k)
    if C is not None:
        C = np.asarray(C, dtype=float)
        cents = {c: C[:, c - 1] for c in range(1, k + 1)}
        s_ic, t_ic = _instance_to(Z_s, ys, cents), _instance_to(Z_t, yt, cents)
        s_mc, t_mc = _mean_to(ms, cents), _mean_to(mt, cents)
    else:
        s_ic = t_ic = s_mc = t_mc = float("nan")
    return DistanceDiagnostics(
        s_ic, t_ic, s_mc, t_mc,
        _instance_to(Z_s, ys, centers), _instance_to(Z_t, yt, centers),
        _mean_to(ms, centers), _mean_to(mt, centers),
        _instance_to(Z_s, ys, ms), _instance_to(Z_t, yt, mt),
        _mean_to(ms, mt),
    )


# -- emission ---------------------------------------------------------------
def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".6g")


def write_csv(path, rows: Sequence[Mapping], columns: Optional[Sequence[str]] = None) -> List[str]:
    """Write rows with a fixed column order and 6-significant-digit decimals."""
    if not rows:
        raise ContractError("nothing to emit: no rows logged")
    if columns is None:
        columns = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row.get(c, float("nan"))) for c in columns])
    return list(columns)


def read_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            parsed = {}
            for key, val in row.items():
                try:
                    parsed[key] = float(val)
                except ValueError:
                    parsed[key] = val
            out.append(parsed)
    return out


DIAGNOSTIC_FAMILIES = {
    "losses": ["L_fphi_t", "L_fphi_s", "L_phiphi_t", "L_phiphi_s", "L_total"],
    "accuracy": ["target_train_acc", "target_test_acc"],
    "centroid": ["src_instance_to_centroid", "tgt_instance_to_centroid",
                 "src_insmean_to_centroid", "tgt_insmean_to_centroid"],
    "center": ["src_instance_to_center", "tgt_instance_to_center",
               "src_insmean_to_center", "tgt_insmean_to_center"],
    "insmean": ["src_instance_to_insmean", "tgt_instance_to_insmean", "srcinsmean_to_tgtinsmean"],
    "schedule": ["lambda", "lr"],
}

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def svg_line_chart(series: Mapping[str, Sequence[float]], title: str,
                   width: int = 480, height: int = 300) -> str:
    pad_l, pad_r, pad_t, pad_b = 55, 150, 30, 35
    finite = [v for vals in series.values() for v in vals if np.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(v) for v in series.values()), default=1)
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def xy(i, v):
        x = pad_l + (pw * i / (n - 1) if n > 1 else pw / 2)
        y = pad_t + ph * (1.0 - (v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad_l}" y="18" font-size="13" font-family="sans-serif">{escape(title)}</text>',
        f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
        f'<text x="4" y="{pad_t + 10}" font-size="10" font-family="sans-serif">{hi:.4g}</text>',
        f'<text x="4" y="{pad_t + ph}" font-size="10" font-family="sans-serif">{lo:.4g}</text>',
        f'<text x="{pad_l}" y="{height - 10}" font-size="10" font-family="sans-serif">epoch 1..{n}</text>',
    ]
    for j, (name, vals) in enumerate(series.items()):
        color = _COLORS[j % len(_COLORS)]
        pts = " ".join(xy(i, v) for i, v in enumerate(vals) if np.isfinite(v))
        if pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 14 * (j + 1)
        parts.append(f'<text x="{width - pad_r + 8}" y="{ly}" font-size="10" fill="{color}" '
                     f'font-family="sans-serif">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit(rows: Sequence[Mapping], out_dir, prefix: str = "metrics") -> List[Path]:
    """Write ``<prefix>.csv`` plus one ``<prefix>_<family>.svg`` per family
    that has at least one logged column."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{prefix}.csv"
    write_csv(csv_path, rows)
    return [csv_path] + emit_charts(rows, out_dir, prefix)


def emit_charts(rows: Sequence[Mapping], out_dir, prefix: str = "metrics") -> List[Path]:
    if not rows:
        raise ContractError("nothing to emit: no rows logged")
    out_dir = Path(out_dir)
    written = []
    for family, cols in DIAGNOSTIC_FAMILIES.items():
        present = {c: [float(r[c]) for r in rows] for c in cols if c in rows[0]}
        if not present:
            continue
        path = out_dir / f"{prefix}_{family}.svg"
        path.write_text(svg_line_chart(present, f"{prefix}: {family}"), encoding="utf-8")
        written.append(path)
    return written
