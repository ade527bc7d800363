"""Saliency evaluation: MAE, adaptive/max F-measure, weighted F-measure,
S-measure, E-measure and 20-threshold PR / F curves.

Predictions are float arrays in [0, 1]; ground truths are binary arrays of
the same shape. Everything is computed in float64.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import IMAGE_EXTS
from .errors import InputError

log = logging.getLogger(__name__)

BETA2 = 0.3
N_THRESHOLDS = 20
ADAPTIVE_CLIP = 1.0 - 1e-8
EPS = np.finfo(np.float64).eps
METRIC_NAMES = ("mae", "fm", "wf", "sm", "em")


class MetricUndefined(ValueError):
    """The metric has no value for this input (e.g. empty ground truth)."""


def _prepare(s, y):
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y)
    if s.shape != y.shape:
        raise InputError(f"prediction {s.shape} and ground truth {y.shape} differ in shape")
    return s, y.astype(bool)


def _require_foreground(y):
    if not y.any():
        raise MetricUndefined("ground truth has no foreground")


def mae(s, y):
    s, y = _prepare(s, y)
    return float(np.abs(s - y).mean())


def f_beta(precision, recall, beta2=BETA2):
    denom = beta2 * precision + recall
    return (1 + beta2) * precision * recall / denom if denom > 0 else 0.0


def precision_recall(binary, y):
    """Precision := 0 when nothing is predicted."""
    tp = np.count_nonzero(binary & y)
    n_pred = np.count_nonzero(binary)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / np.count_nonzero(y)
    return precision, recall


def adaptive_threshold(s):
    # correctly rounded sum: the threshold must not depend on pixel order,
    # since quantized maps often have pixels exactly at 2 * mean
    return min(2.0 * math.fsum(np.ravel(s).tolist()) / np.size(s), ADAPTIVE_CLIP)


def adaptive_f_measure(s, y, beta2=BETA2):
    s, y = _prepare(s, y)
    _require_foreground(y)
    return f_beta(*precision_recall(s >= adaptive_threshold(s), y), beta2)


def threshold_grid(n=N_THRESHOLDS, lo=0.0, hi=1.0):
    """Bin centers of ``n`` equal parts of [lo, hi]."""
    return lo + (np.arange(n) + 0.5) / n * (hi - lo)


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def f(self):
        return np.array([f_beta(p, r) for p, r in zip(self.precision, self.recall)])

    @property
    def max_f(self):
        return float(self.f.max())


def pr_curve(s, y, n=N_THRESHOLDS, grid="fixed"):
    """Precision/recall at ``n`` thresholds.

    ``grid="fixed"`` uses the centers of ``n`` equal bins of [0, 1];
    ``grid="range"`` divides the map's own [min, max] instead.
    """
    s, y = _prepare(s, y)
    _require_foreground(y)
    if grid == "fixed":
        ts = threshold_grid(n)
    elif grid == "range":
        ts = threshold_grid(n, float(s.min()), float(s.max()))
    else:
        raise ValueError(f"unknown threshold grid {grid!r}")
    pr = np.array([precision_recall(s >= t, y) for t in ts])
    return PRCurve(ts, pr[:, 0], pr[:, 1])


def gaussian_kernel(size=7, sigma=5.0):
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def weighted_f_measure(s, y, beta2=1.0):
    """Weighted F-measure (Margolin et al.): error map propagated from the
    nearest foreground pixel, Gaussian-smoothed dependency term, and
    distance-dependent background importance."""
    s, y = _prepare(s, y)
    _require_foreground(y)
    err = np.abs(s - y)
    dist, idx = ndimage.distance_transform_edt(~y, return_indices=True)
    err_t = err.copy()
    bg = ~y
    err_t[bg] = err[idx[0][bg], idx[1][bg]]
    err_a = ndimage.correlate(err_t, gaussian_kernel(7, 5.0), mode="constant", cval=0.0)
    min_e = np.where(y & (err_a < err), err_a, err)
    importance = np.where(y, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tp_w = np.count_nonzero(y) - ew[y].sum()
    fp_w = ew[bg].sum()
    recall = 1.0 - ew[y].mean()
    precision = tp_w / (EPS + tp_w + fp_w)
    return float((1 + beta2) * recall * precision / (EPS + recall + beta2 * precision))


# -- S-measure -----------------------------------------------------------------

def _object_score(values):
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(s, y):
    o_fg = _object_score(s[y])
    o_bg = _object_score(1.0 - s[~y])
    u = y.mean()
    return u * o_fg + (1 - u) * o_bg


def _centroid(y):
    """1-based (column, row) centroid, rounded half up."""
    h, w = y.shape
    total = np.count_nonzero(y)
    if total == 0:
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    cx = (y.sum(axis=0) * np.arange(1, w + 1)).sum() / total
    cy = (y.sum(axis=1) * np.arange(1, h + 1)).sum() / total
    return int(np.floor(cx + 0.5)), int(np.floor(cy + 0.5))


def _ssim(p, g):
    n = p.size
    if n == 0:
        return 0.0
    x, yy = p.mean(), g.mean()
    sx2 = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy2 = ((g - yy) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - yy)).sum() / (n - 1 + EPS)
    a = 4 * x * yy * sxy
    b = (x * x + yy * yy) * (sx2 + sy2)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _s_region(s, y):
    h, w = y.shape
    cx, cy = _centroid(y)
    area = h * w
    w1 = cx * cy / area
    w2 = (w - cx) * cy / area
    w3 = cx * (h - cy) / area
    w4 = 1.0 - w1 - w2 - w3
    g = y.astype(np.float64)
    blocks = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
              (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    return sum(wk * _ssim(s[b], g[b]) for wk, b in zip((w1, w2, w3, w4), blocks))


def s_measure(s, y, alpha=0.5):
    s, y = _prepare(s, y)
    m = y.mean()
    if m == 0:
        return float(1.0 - s.mean())
    if m == 1:
        return float(s.mean())
    return float(max(alpha * _s_object(s, y) + (1 - alpha) * _s_region(s, y), 0.0))


def e_measure(s, y, threshold=None):
    """Enhanced alignment of the binarized prediction (adaptive threshold by
    default) with the ground truth, averaged over all pixels."""
    s, y = _prepare(s, y)
    t = adaptive_threshold(s) if threshold is None else threshold
    fm = s >= t
    if not y.any():
        enhanced = 1.0 - fm
    elif y.all():
        enhanced = fm.astype(np.float64)
    else:
        a_fm = fm - fm.mean()
        a_gt = y - y.mean()
        align = 2.0 * a_gt * a_fm / (a_gt * a_gt + a_fm * a_fm + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(np.mean(enhanced))


# -- dataset evaluation ----------------------------------------------------------

def evaluate_image(s, y, grid="fixed"):
    """Per-image metric dict plus the PR curve (None where undefined)."""
    s, y = _prepare(s, y)
    out = {"mae": mae(s, y), "sm": s_measure(s, y), "em": e_measure(s, y)}
    curve = None
    if y.any():
        out["fm"] = adaptive_f_measure(s, y)
        out["wf"] = weighted_f_measure(s, y)
        curve = pr_curve(s, y, grid=grid)
    else:
        out["fm"] = out["wf"] = None
    return out, curve


@dataclass
class MetricReport:
    per_image: dict
    aggregate: dict
    curves: dict
    groups: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    unmatched: list = field(default_factory=list)

    @property
    def max_f(self):
        return float(np.max(self.curves["f"])) if self.curves else float("nan")

    def records(self):
        """JSON-ready records: one per image, then one aggregate record."""
        rows = [{"id": k, **v} for k, v in sorted(self.per_image.items())]
        rows.append({"id": "__aggregate__", **self.aggregate, "max_f": self.max_f,
                     "n_images": len(self.per_image)})
        return rows

    def curve_rows(self):
        c = self.curves
        return [(float(t), float(p), float(r), float(f))
                for t, p, r, f in zip(c["threshold"], c["precision"], c["recall"], c["f"])]


def _aggregate(per_image, ids):
    agg = {}
    for name in METRIC_NAMES:
        vals = [per_image[i][name] for i in ids if per_image[i][name] is not None]
        agg[name] = float(np.mean(vals)) if vals else None
    return agg


def _average_curves(curves):
    if not curves:
        return {}
    p = np.mean([c.precision for c in curves], axis=0)
    r = np.mean([c.recall for c in curves], axis=0)
    return {"threshold": curves[0].thresholds, "precision": p, "recall": r,
            "f": np.array([f_beta(a, b) for a, b in zip(p, r)])}


def evaluate_arrays(pairs, attributes=None, grid="fixed"):
    """Evaluate ``{id: (prediction, gt)}``; ``attributes`` maps id -> tags."""
    per_image, skipped, curves = {}, {}, {}
    for sid in sorted(pairs):
        s, y = pairs[sid]
        vals, curve = evaluate_image(s, y, grid)
        per_image[sid] = vals
        if curve is None:
            skipped[sid] = "ground truth has no foreground: fm, wf and curves skipped"
        else:
            curves[sid] = curve
    ids = sorted(per_image)
    report = MetricReport(per_image, _aggregate(per_image, ids),
                          _average_curves([curves[i] for i in ids if i in curves]), skipped=skipped)
    if attributes:
        tags = sorted({t for i in ids for t in attributes.get(i, ())})
        for tag in tags:
            members = [i for i in ids if tag in attributes.get(i, ())]
            report.groups[tag] = {**_aggregate(per_image, members), "count": len(members)}
    return report


def _files(directory):
    return {p.stem: p for p in sorted(Path(directory).iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTS}


def read_prediction(path, shape=None, minmax=False):
    im = Image.open(path).convert("L")
    if shape is not None and im.size != (shape[1], shape[0]):
        log.warning("resizing prediction %s from %s to %s", path, im.size[::-1], shape)
        im = im.resize((shape[1], shape[0]), Image.BILINEAR)
    s = np.asarray(im, dtype=np.float64) / 255.0
    if minmax and s.max() > s.min():
        s = (s - s.min()) / (s.max() - s.min())
    return s


def read_gt(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0 >= 0.5


def evaluate_dataset(pred_dir, gt_dir, attributes=None, grid="fixed", minmax=False):
    """Evaluate filename-matched predictions against ground-truth masks."""
    preds, gts = _files(pred_dir), _files(gt_dir)
    common = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        log.warning("%d unmatched files (evaluating the intersection): %s",
                    len(unmatched), ", ".join(unmatched[:10]))
    if not common:
        raise InputError(f"no matching predictions in {pred_dir} for ground truth in {gt_dir}")
    pairs = {}
    for sid in common:
        y = read_gt(gts[sid])
        pairs[sid] = (read_prediction(preds[sid], y.shape, minmax), y)
    report = evaluate_arrays(pairs, attributes, grid)
    report.unmatched = unmatched
    return report
