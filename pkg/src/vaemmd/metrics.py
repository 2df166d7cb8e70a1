"""Segmentation and domain-adaptation evaluation suite.

Lesion-wise detection counts connected components; a ground-truth lesion is
detected on any predicted-voxel overlap. Surface metrics work on surface
voxel sets in millimeters (mask minus its 6-neighborhood erosion). HD95 is
the 95th percentile of the pooled symmetric nearest-surface distances.

Empty-mask conventions (reported, never silently skipped):
dice(empty, empty) = 1, sDice(empty, empty) = 1, one-sided empty sDice = 0,
precision with no predicted components = 0, HD95 undefined (NaN) whenever
either mask is empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import rng


class MetricError(Exception):
    pass


def _check_binary(mask: np.ndarray, name: str):
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise MetricError(f"{name} must be binary, found labels {vals.tolist()}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# connected components
# ----------------------------------------------------------------------

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: np.ndarray, connectivity=26):
    """Label components; labels follow lexicographic order of seed voxels."""
    mask = np.asarray(mask)
    _check_binary(mask, "mask")
    if connectivity not in _STRUCTURES:
        raise MetricError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    return labels, int(count)


# ----------------------------------------------------------------------
# lesion-wise detection
# ----------------------------------------------------------------------

@dataclass
class LesionMatchResult:
    gt_detected: list
    pred_is_tp: list
    tp: int
    fn: int
    fp: int


def _fbeta(precision, sensitivity, beta):
    denom = beta**2 * precision + sensitivity
    if denom == 0:
        return 0.0
    return (1 + beta**2) * precision * sensitivity / denom


def lesion_detection_metrics(gt_mask, pred_mask, connectivity=26):
    gt_mask = np.asarray(gt_mask)
    pred_mask = np.asarray(pred_mask)
    _check_same_shape(gt_mask, pred_mask)
    gt_labels, n_gt = connected_components(gt_mask, connectivity)
    pred_labels, n_pred = connected_components(pred_mask, connectivity)

    gt_detected = [
        bool(np.any(pred_mask[gt_labels == i])) for i in range(1, n_gt + 1)
    ]
    pred_is_tp = [
        bool(np.any(gt_mask[pred_labels == j])) for j in range(1, n_pred + 1)
    ]
    tp = sum(pred_is_tp)
    fp = n_pred - tp
    fn = n_gt - sum(gt_detected)
    match = LesionMatchResult(gt_detected, pred_is_tp, tp, fn, fp)

    sensitivity = sum(gt_detected) / n_gt if n_gt else (1.0 if n_pred == 0 else 0.0)
    precision = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
    f1 = _fbeta(precision, sensitivity, 1.0)
    f2 = _fbeta(precision, sensitivity, 2.0)
    return match, sensitivity, precision, f1, f2


# ----------------------------------------------------------------------
# overlap / surface metrics
# ----------------------------------------------------------------------

def dice(gt_mask, pred_mask) -> float:
    gt_mask = np.asarray(gt_mask)
    pred_mask = np.asarray(pred_mask)
    _check_same_shape(gt_mask, pred_mask)
    _check_binary(gt_mask, "gt_mask")
    _check_binary(pred_mask, "pred_mask")
    a = int(gt_mask.sum())
    b = int(pred_mask.sum())
    if a + b == 0:
        return 1.0
    inter = int(np.logical_and(gt_mask, pred_mask).sum())
    return 2 * inter / (a + b)


def surface_extract(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Surface voxel coordinates in mm: mask minus its 6-cross erosion."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.zeros((0, 3))
    eroded = ndimage.binary_erosion(mask, structure=_STRUCTURES[6], border_value=0)
    surface = mask & ~eroded
    coords = np.argwhere(surface).astype(np.float64)
    return coords * np.asarray(spacing, dtype=np.float64)


def surface_dice(gt_mask, pred_mask, spacing=(1.0, 1.0, 1.0), tolerance_mm=1.0) -> float:
    gt_mask = np.asarray(gt_mask)
    pred_mask = np.asarray(pred_mask)
    _check_same_shape(gt_mask, pred_mask)
    s_gt = surface_extract(gt_mask, spacing)
    s_pred = surface_extract(pred_mask, spacing)
    if len(s_gt) == 0 and len(s_pred) == 0:
        return 1.0
    if len(s_gt) == 0 or len(s_pred) == 0:
        return 0.0
    d_gt = cKDTree(s_pred).query(s_gt)[0]
    d_pred = cKDTree(s_gt).query(s_pred)[0]
    hits = int((d_gt <= tolerance_mm).sum()) + int((d_pred <= tolerance_mm).sum())
    return hits / (len(s_gt) + len(s_pred))


def hd95(gt_mask, pred_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled symmetric surface distances; NaN if a mask is empty."""
    gt_mask = np.asarray(gt_mask)
    pred_mask = np.asarray(pred_mask)
    _check_same_shape(gt_mask, pred_mask)
    s_gt = surface_extract(gt_mask, spacing)
    s_pred = surface_extract(pred_mask, spacing)
    if len(s_gt) == 0 or len(s_pred) == 0:
        return math.nan
    d_gt = cKDTree(s_pred).query(s_gt)[0]
    d_pred = cKDTree(s_gt).query(s_pred)[0]
    pooled = np.concatenate([d_gt, d_pred])
    return float(np.percentile(pooled, 95, method="linear"))


# ----------------------------------------------------------------------
# per-case reports and cohort aggregation
# ----------------------------------------------------------------------

@dataclass
class CaseMetrics:
    case_id: str
    sensitivity: float
    precision: float
    f1: float
    f2: float
    dice: float
    sdice: float
    hd95_mm: float  # NaN when undefined


@dataclass
class SegMetricsReport:
    cases: list
    mean_sensitivity: float
    mean_precision: float
    mean_f1: float
    mean_f2: float
    mean_dice: float
    mean_sdice: float
    median_hd95_mm: float  # NaN when no case has a defined HD95
    n_hd95_undefined: int
    n_cases: int

    def to_dict(self):
        return {
            "cases": [
                {
                    "case_id": c.case_id,
                    "sensitivity": c.sensitivity,
                    "precision": c.precision,
                    "f1": c.f1,
                    "f2": c.f2,
                    "dice": c.dice,
                    "sdice": c.sdice,
                    "hd95_mm": None if math.isnan(c.hd95_mm) else c.hd95_mm,
                }
                for c in self.cases
            ],
            "cohort": {
                "mean_sensitivity": self.mean_sensitivity,
                "mean_precision": self.mean_precision,
                "mean_f1": self.mean_f1,
                "mean_f2": self.mean_f2,
                "mean_dice": self.mean_dice,
                "mean_sdice": self.mean_sdice,
                "median_hd95_mm": None if math.isnan(self.median_hd95_mm) else self.median_hd95_mm,
                "n_hd95_undefined": self.n_hd95_undefined,
                "n_cases": self.n_cases,
            },
        }


def evaluate_case(case_id, gt_mask, pred_mask, spacing=(1.0, 1.0, 1.0), tolerance_mm=1.0, connectivity=26) -> CaseMetrics:
    _, sens, prec, f1, f2 = lesion_detection_metrics(gt_mask, pred_mask, connectivity)
    return CaseMetrics(
        case_id=case_id,
        sensitivity=sens,
        precision=prec,
        f1=f1,
        f2=f2,
        dice=dice(gt_mask, pred_mask),
        sdice=surface_dice(gt_mask, pred_mask, spacing, tolerance_mm),
        hd95_mm=hd95(gt_mask, pred_mask, spacing),
    )


def aggregate_cases(cases: list) -> SegMetricsReport:
    """Means for rates, median for HD95 (undefined sentinels excluded)."""
    if not cases:
        raise MetricError("aggregate_cases needs >= 1 case")
    hd_values = [c.hd95_mm for c in cases if not math.isnan(c.hd95_mm)]
    return SegMetricsReport(
        cases=list(cases),
        mean_sensitivity=float(np.mean([c.sensitivity for c in cases])),
        mean_precision=float(np.mean([c.precision for c in cases])),
        mean_f1=float(np.mean([c.f1 for c in cases])),
        mean_f2=float(np.mean([c.f2 for c in cases])),
        mean_dice=float(np.mean([c.dice for c in cases])),
        mean_sdice=float(np.mean([c.sdice for c in cases])),
        median_hd95_mm=float(np.median(hd_values)) if hd_values else math.nan,
        n_hd95_undefined=len(cases) - len(hd_values),
        n_cases=len(cases),
    )


def render_table(rows: dict, title="") -> str:
    """Aligned-column text table: rows maps configuration name -> cohort dict."""
    cols = ["Sens", "Prec", "F1", "F2", "Dice", "sDice", "HD95"]
    keys = [
        "mean_sensitivity",
        "mean_precision",
        "mean_f1",
        "mean_f2",
        "mean_dice",
        "mean_sdice",
        "median_hd95_mm",
    ]
    width = max([len(n) for n in rows] + [13])
    lines = []
    if title:
        lines.append(title)
    lines.append(" ".join([" " * width] + [f"{c:>8}" for c in cols]))
    for name, cohort in rows.items():
        vals = []
        for k in keys:
            v = cohort.get(k)
            vals.append(f"{v:8.4f}" if v is not None and not (isinstance(v, float) and math.isnan(v)) else f"{'n/a':>8}")
        lines.append(" ".join([f"{name:<{width}}"] + vals))
    return "\n".join(lines)


# ----------------------------------------------------------------------
# domain classifier probe
# ----------------------------------------------------------------------

@dataclass
class DomainReport:
    accuracy: float
    confusion: np.ndarray
    domains: list
    per_domain_counts: dict
    feature_description: str = ""

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "domains": self.domains,
            "confusion": self.confusion.tolist(),
            "per_domain_counts": self.per_domain_counts,
            "feature_description": self.feature_description,
        }

    def render_confusion(self) -> str:
        width = max(len(d) for d in self.domains) + 2
        lines = [" ".join([" " * width] + [f"{d:>{width}}" for d in self.domains])]
        for i, d in enumerate(self.domains):
            lines.append(
                " ".join([f"{d:<{width}}"] + [f"{int(v):>{width}}" for v in self.confusion[i]])
            )
        return "\n".join(lines)


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logistic_domain_classifier(
    features,
    labels,
    eval_fraction=0.5,
    l2_reg=1e-3,
    iters=500,
    lr=0.5,
    seed=0,
    feature_description="",
) -> DomainReport:
    """Multinomial logistic regression probe fit by full-batch gradient descent.

    Deterministic from seed: a stratified shuffle assigns the first
    (1 - eval_fraction) of each domain to training, the rest to evaluation.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    domains = sorted(set(labels))
    if len(domains) < 2:
        raise MetricError("domain classifier needs >= 2 domains")
    y = np.array([domains.index(l) for l in labels])
    gen = rng.generator(seed)

    train_idx, eval_idx = [], []
    for k in range(len(domains)):
        idx = np.where(y == k)[0]
        if len(idx) < 2:
            raise MetricError(f"domain {domains[k]!r} needs >= 2 cases")
        idx = idx[gen.permutation(len(idx))]
        n_train = max(1, int(round(len(idx) * (1 - eval_fraction))))
        n_train = min(n_train, len(idx) - 1)
        train_idx.extend(idx[:n_train])
        eval_idx.extend(idx[n_train:])
    train_idx = np.array(sorted(train_idx))
    eval_idx = np.array(sorted(eval_idx))

    mu = features[train_idx].mean(axis=0)
    sd = features[train_idx].std(axis=0)
    sd[sd == 0] = 1.0
    x = (features - mu) / sd
    x = np.hstack([x, np.ones((len(x), 1))])

    k = len(domains)
    w = np.zeros((x.shape[1], k))
    xt, yt = x[train_idx], y[train_idx]
    onehot = np.eye(k)[yt]
    for _ in range(iters):
        p = _softmax_rows(xt @ w)
        grad = xt.T @ (p - onehot) / len(xt) + l2_reg * w
        w -= lr * grad

    pred = np.argmax(x[eval_idx] @ w, axis=1)
    true = y[eval_idx]
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true, pred):
        confusion[t, p] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    counts = {domains[i]: int(confusion[i].sum()) for i in range(k)}
    return DomainReport(accuracy, confusion, domains, counts, feature_description)


# ----------------------------------------------------------------------
# 2-D embedding projection
# ----------------------------------------------------------------------

def _pca_2d(x):
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # fix sign: largest-magnitude loading positive
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return xc @ comps.T


def _tsne_2d(x, seed, perplexity, n_iter=400):
    n = len(x)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    p = np.zeros((n, n))
    target = np.log(perplexity)
    for i in range(n):
        lo, hi = 1e-20, 1e20
        beta = 1.0
        di = np.delete(d2[i], i)
        for _ in range(64):
            w = np.exp(-di * beta)
            s = w.sum()
            if s <= 0:
                beta = (lo + beta) / 2
                continue
            prob = w / s
            h = -(prob * np.log(np.maximum(prob, 1e-300))).sum()
            if h > target:
                lo = beta
                beta = beta * 2 if hi >= 1e20 else (beta + hi) / 2
            else:
                hi = beta
                beta = (lo + beta) / 2
        w = np.exp(-np.delete(d2[i], i) * beta)
        row = np.zeros(n)
        row[np.arange(n) != i] = w / max(w.sum(), 1e-300)
        p[i] = row
    p = (p + p.T) / (2 * n)
    p = np.maximum(p, 1e-12)

    gen = rng.generator(seed)
    y = gen.standard_normal((n, 2)) * 1e-2
    vel = np.zeros_like(y)
    for it in range(n_iter):
        exagger = 4.0 if it < 100 else 1.0
        yd2 = ((y[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
        num = 1.0 / (1.0 + yd2)
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (exagger * p - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = 0.5 if it < 250 else 0.8
        vel = momentum * vel - 200.0 * grad
        y = y + vel
        y = y - y.mean(axis=0)
    return y


def embed_project(features, method="pca", dims=2, seed=0):
    """Project per-case features to 2-D (PCA or exact t-SNE)."""
    features = np.asarray(features, dtype=np.float64)
    if dims != 2:
        raise MetricError("only 2-D projection is supported")
    if len(features) < 3:
        raise MetricError("embedding needs >= 3 cases")
    if method == "pca":
        return _pca_2d(features)
    if method == "tsne":
        perplexity = min(30.0, max(2.0, (len(features) - 1) / 3))
        return _tsne_2d(features, seed, perplexity)
    raise MetricError(f"unknown embedding method {method!r}")
