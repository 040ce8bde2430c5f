"""Per-class Dice and mean surface distance between label volumes."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError
from .volume import check_same_geometry

# 6-connected structuring element
_FACES = ndimage.generate_binary_structure(3, 1)


def _class_masks(pred, ref, cls):
    check_same_geometry(ref, pred, "prediction")
    return np.asarray(pred.data) == cls, np.asarray(ref.data) == cls


def dice(pred, ref, cls):
    """Dice overlap of class ``cls``; ``None`` when the class is absent from both."""
    a, b = _class_masks(pred, ref, cls)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return None
    return 2.0 * int(np.count_nonzero(a & b)) / total


def boundary(mask):
    """Mask voxels with at least one face neighbor outside the mask or the grid."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACES, border_value=0)


def surface_distances(a, b, spacing):
    """Distance in mm from each boundary voxel of ``a`` to the nearest one of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dist = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dist[ba]


def mean_surface_distance(pred, ref, cls):
    """Symmetric mean surface distance in mm; ``None`` if either class mask is empty.

    Distances from both boundaries are pooled, so the result is the mean over
    all boundary voxels of both masks.
    """
    a, b = _class_masks(pred, ref, cls)
    if not a.any() or not b.any():
        return None
    d_ab = surface_distances(a, b, ref.spacing)
    d_ba = surface_distances(b, a, ref.spacing)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


@dataclass
class MetricsReport:
    """Per-class metrics for one case; ``None`` marks an undefined value."""

    classes: list
    dice: dict
    msd: dict
    case: str = ""

    def rows(self):
        return [(c, self.dice[c], self.msd[c]) for c in self.classes]


def evaluate(pred, ref, num_classes=None, case=""):
    """Dice and MSD for classes ``1..N-1``; background is excluded."""
    n = num_classes or max(getattr(ref, "num_classes", 0) or 0,
                           getattr(pred, "num_classes", 0) or 0)
    if n < 2:
        raise InputError("need at least two classes to evaluate")
    classes = list(range(1, n))
    return MetricsReport(
        classes=classes,
        dice={c: dice(pred, ref, c) for c in classes},
        msd={c: mean_surface_distance(pred, ref, c) for c in classes},
        case=case,
    )


@dataclass
class Summary:
    """Mean and standard deviation per class over defined values only."""

    classes: list
    dice: dict = field(default_factory=dict)
    msd: dict = field(default_factory=dict)


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(reports):
    classes = sorted({c for r in reports for c in r.classes})
    out = Summary(classes)
    for c in classes:
        out.dice[c] = _mean_std([r.dice.get(c) for r in reports])
        out.msd[c] = _mean_std([r.msd.get(c) for r in reports])
    return out


def _fmt(value, digits):
    return "n/a" if value is None else f"{value:.{digits}f}"


def _fmt_pm(pair, digits):
    return "n/a" if pair is None else f"{pair[0]:.{digits}f} ± {pair[1]:.{digits}f}"


def format_table(reports, class_names=None):
    """Two-row table (Dice, MSD in mm) with one column per class.

    With several reports the cells hold mean ± standard deviation.
    """
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    classes = sorted({c for r in reports for c in r.classes})
    names = [str((class_names or {}).get(c, f"class {c}")) for c in classes]
    if len(reports) == 1:
        r = reports[0]
        dice_cells = [_fmt(r.dice[c], 4) for c in classes]
        msd_cells = [_fmt(r.msd[c], 4) for c in classes]
    else:
        s = aggregate(reports)
        dice_cells = [_fmt_pm(s.dice[c], 4) for c in classes]
        msd_cells = [_fmt_pm(s.msd[c], 4) for c in classes]
    header = ["metric"] + names
    body = [["Dice"] + dice_cells, ["MSD [mm]"] + msd_cells]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in [header] + body]
    return "\n".join(lines)


def format_csv(reports):
    """One line per (case, class): ``case,class,dice,msd_mm`` with ``n/a`` for undefined."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "class", "dice", "msd_mm"])
    for r in reports:
        for c, d, m in r.rows():
            writer.writerow([r.case, c, "n/a" if d is None else repr(d),
                             "n/a" if m is None else repr(m)])
    return buf.getvalue()
