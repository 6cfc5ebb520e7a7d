"""Segmentation metrics: Dice overlap and symmetric Average Surface Distance.

Surfaces are 2-D boundaries: foreground pixels with at least one background
4-neighbour, where the image border counts as background. Distances are
Euclidean between pixel centres, scaled by the (row, col) pixel spacing.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from lowbridge._backend import kernels

__all__ = [
    "MetricsReport",
    "dice_score",
    "extract_boundary",
    "boundary_coords",
    "asd",
    "asd_details",
    "evaluate_dataset",
    "format_table_row",
    "better_dice",
    "better_asd",
]


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction dims {pred.shape} differ from ground-truth dims {truth.shape}")
    return pred, truth


def dice_score(pred, truth, class_id: int) -> float:
    """2|P∩T| / (|P|+|T|) for one class; 1.0 when the class is absent from both."""
    pred, truth = _check_pair(pred, truth)
    p = pred == class_id
    t = truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def extract_boundary(mask) -> np.ndarray:
    """Boolean grid marking foreground pixels that touch background (4-neighbourhood)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def boundary_coords(mask) -> np.ndarray:
    """(K, 2) int64 array of boundary pixel (row, col) coordinates, row-major order."""
    return np.argwhere(extract_boundary(mask)).astype(np.int64)


def _directed_distances_bruteforce(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    return kernels.min_distances(np.ascontiguousarray(src), np.ascontiguousarray(dst), float(spacing[0]), float(spacing[1]))


def _directed_distances_edt(src: np.ndarray, dst_mask: np.ndarray, spacing) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~dst_mask, sampling=spacing)
    return dist[src[:, 0], src[:, 1]]


def asd_details(pred, truth, class_id: int, spacing_mm=(1.0, 1.0), method: str = "bruteforce"):
    """Symmetric ASD in mm and whether the empty-vs-nonempty sentinel was used."""
    pred, truth = _check_pair(pred, truth)
    sy, sx = float(spacing_mm[0]), float(spacing_mm[1])
    if not (sy > 0 and sx > 0):
        raise ValueError(f"spacing must be positive, got {spacing_mm}")
    bp = extract_boundary(pred == class_id)
    bt = extract_boundary(truth == class_id)
    cp = np.argwhere(bp).astype(np.int64)
    ct = np.argwhere(bt).astype(np.int64)
    if len(cp) == 0 and len(ct) == 0:
        return 0.0, False
    if len(cp) == 0 or len(ct) == 0:
        h, w = pred.shape
        return math.hypot(h * sy, w * sx), True
    if method == "bruteforce":
        d_pt = _directed_distances_bruteforce(cp, ct, (sy, sx))
        d_tp = _directed_distances_bruteforce(ct, cp, (sy, sx))
    elif method == "edt":
        d_pt = _directed_distances_edt(cp, bt, (sy, sx))
        d_tp = _directed_distances_edt(ct, bp, (sy, sx))
    else:
        raise ValueError(f"unknown ASD method {method!r}")
    # fsum is correctly rounded, so the value does not depend on summation order
    mean_pt = math.fsum(d_pt.tolist()) / len(d_pt)
    mean_tp = math.fsum(d_tp.tolist()) / len(d_tp)
    return 0.5 * (mean_pt + mean_tp), False


def asd(pred, truth, class_id: int, spacing_mm=(1.0, 1.0), method: str = "bruteforce") -> float:
    """Symmetric average surface distance in mm.

    Both boundaries empty gives 0.0; exactly one empty gives the image
    diagonal in mm (see :func:`asd_details` for the sentinel flag).
    """
    return asd_details(pred, truth, class_id, spacing_mm, method)[0]


@dataclass
class MetricsReport:
    classes: list[str]
    dice: list[float]
    asd_mm: list[float]
    n_samples: int
    sentinel_count: int = 0
    foreground: list[int] = field(default_factory=list)

    @property
    def average_dice(self) -> float:
        vals = [self.dice[i] for i in self.foreground if math.isfinite(self.dice[i])]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def average_asd(self) -> float:
        vals = [self.asd_mm[i] for i in self.foreground if math.isfinite(self.asd_mm[i])]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "per_class": {"dice": list(self.dice), "asd_mm": list(self.asd_mm)},
            "average": {"dice": self.average_dice, "asd_mm": self.average_asd},
            "n_samples": self.n_samples,
            "sentinel_count": self.sentinel_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "dice", "asd_mm"])
        for name, d, a in zip(self.classes, self.dice, self.asd_mm):
            writer.writerow([name, repr(d), repr(a)])
        writer.writerow(["average_foreground", repr(self.average_dice), repr(self.average_asd)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        classes = list(d["classes"])
        return cls(
            classes=classes,
            dice=list(d["per_class"]["dice"]),
            asd_mm=list(d["per_class"]["asd_mm"]),
            n_samples=int(d["n_samples"]),
            sentinel_count=int(d.get("sentinel_count", 0)),
            foreground=list(range(1, len(classes))),
        )

    def row(self) -> str:
        return format_table_row(self.average_dice, self.average_asd)


def format_table_row(dice: float, asd_mm: float) -> str:
    """Dice (fraction) as percent and ASD, both to one decimal: ``"86.2 5.7"``."""
    return f"{dice * 100:.1f} {asd_mm:.1f}"


def better_dice(a: float, b: float) -> bool:
    """True when Dice ``a`` is the better result (higher is better)."""
    return a > b


def better_asd(a: float, b: float) -> bool:
    """True when ASD ``a`` is the better result (lower is better)."""
    return a < b


def evaluate_dataset(
    preds: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    spacings: Sequence[tuple[float, float]] | None = None,
    num_classes: int | None = None,
    class_names: Sequence[str] | None = None,
    method: str = "bruteforce",
) -> MetricsReport:
    """Per-class Dice and ASD averaged over samples, in input order."""
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} ground truths")
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if spacings is None:
        spacings = [(1.0, 1.0)] * len(preds)
    if len(spacings) != len(preds):
        raise ValueError("one spacing per sample is required")
    if num_classes is None:
        num_classes = int(max(int(np.max(t)) for t in truths)) + 1
        num_classes = max(num_classes, int(max(int(np.max(p)) for p in preds)) + 1, 2)
    names = list(class_names) if class_names else ["background"] + [f"class_{i}" for i in range(1, num_classes)]
    if len(names) != num_classes:
        raise ValueError("class_names length must equal num_classes")

    dice = np.zeros((len(preds), num_classes))
    dist = np.zeros((len(preds), num_classes))
    sentinels = 0
    for i, (p, t, sp) in enumerate(zip(preds, truths, spacings)):
        for c in range(num_classes):
            dice[i, c] = dice_score(p, t, c)
            dist[i, c], flagged = asd_details(p, t, c, sp, method)
            sentinels += int(flagged)
    return MetricsReport(
        classes=names,
        dice=[float(v) for v in dice.mean(axis=0)],
        asd_mm=[float(v) for v in dist.mean(axis=0)],
        n_samples=len(preds),
        sentinel_count=sentinels,
        foreground=list(range(1, num_classes)),
    )
