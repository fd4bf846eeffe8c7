"""Segmentation evaluation: overlap ratios, error rates, surface distances,
HU and volume differentials, ROC/AUC, and per-case report aggregation.

Conventions: surfaces use 6-connectivity and volume-boundary voxels count as
surface; distances are Euclidean, in voxel units unless use_spacing is set.
The mean surface distance averages nearest-surface distances over surface
voxels; the average Hausdorff distance averages nearest-point distances over
all mask voxels. Degenerate cases are reported as missing (None) rather than
silently zero; the Dice/Jaccard of two empty masks is 1.0 with a warning.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DataError
from .volumes import BinaryMask, ProbMap, Volume, require_same_geometry


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def fnr(self) -> Optional[float]:
        """Miss rate FN/(FN+TP); None when the region has no reference positives."""
        denom = self.fn + self.tp
        return self.fn / denom if denom else None

    @property
    def fpr(self) -> Optional[float]:
        """False-alarm rate FP/(FP+TN); None when the region has no negatives."""
        denom = self.fp + self.tn
        return self.fp / denom if denom else None


def dice(ref: BinaryMask, pred: BinaryMask) -> float:
    """Overlap ratio 2|ref & pred| / (|ref| + |pred|)."""
    require_same_geometry(ref, pred, "dice")
    n_ref = int(np.count_nonzero(ref.voxels))
    n_pred = int(np.count_nonzero(pred.voxels))
    if n_ref + n_pred == 0:
        warnings.warn("dice of two empty masks is degenerate; reporting 1.0", stacklevel=2)
        return 1.0
    inter = int(np.count_nonzero(ref.voxels & pred.voxels))
    return 2.0 * inter / (n_ref + n_pred)


def jaccard(ref: BinaryMask, pred: BinaryMask) -> float:
    """Overlap ratio |ref & pred| / |ref | pred|."""
    require_same_geometry(ref, pred, "jaccard")
    union = int(np.count_nonzero(ref.voxels | pred.voxels))
    if union == 0:
        warnings.warn("jaccard of two empty masks is degenerate; reporting 1.0", stacklevel=2)
        return 1.0
    inter = int(np.count_nonzero(ref.voxels & pred.voxels))
    return inter / union


def confusion(ref: BinaryMask, pred: BinaryMask, region: BinaryMask) -> ConfusionCounts:
    """Voxelwise confusion counts restricted to an evaluation region."""
    require_same_geometry(ref, pred, "confusion")
    require_same_geometry(ref, region, "confusion")
    r = region.voxels
    if not r.any():
        raise DataError("confusion: evaluation region is empty")
    a, b = ref.voxels, pred.voxels
    return ConfusionCounts(
        tp=int(np.count_nonzero(a & b & r)),
        fp=int(np.count_nonzero(~a & b & r)),
        tn=int(np.count_nonzero(~a & ~b & r)),
        fn=int(np.count_nonzero(a & ~b & r)),
    )


def surface_voxels(mask: BinaryMask) -> np.ndarray:
    """Boolean array marking true voxels with a false 6-neighbor (or on the
    volume boundary)."""
    m = mask.voxels
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return m & ~interior


def _sampling(mask: BinaryMask, use_spacing: bool):
    if not use_spacing:
        return None
    sx, sy, sz = mask.geometry.spacing
    return (sz, sy, sx)  # voxel arrays are (z, y, x)


def surface_distances(
    ref: BinaryMask, pred: BinaryMask, use_spacing: bool = False
) -> tuple[float, float]:
    """(mean surface distance, average Hausdorff distance).

    MSD symmetrizes the mean nearest-surface distance between the two surface
    voxel sets; AHD does the same over all mask voxels. Both are zero iff the
    masks coincide.
    """
    require_same_geometry(ref, pred, "surface_distances")
    if not ref.voxels.any() or not pred.voxels.any():
        raise DataError("surface_distances: both masks must be nonempty")
    sampling = _sampling(ref, use_spacing)

    s_ref = surface_voxels(ref)
    s_pred = surface_voxels(pred)
    to_ref_surface = distance_transform_edt(~s_ref, sampling=sampling)
    to_pred_surface = distance_transform_edt(~s_pred, sampling=sampling)
    msd = 0.5 * (
        float(to_ref_surface[s_pred].mean()) + float(to_pred_surface[s_ref].mean())
    )

    to_ref = distance_transform_edt(~ref.voxels, sampling=sampling)
    to_pred = distance_transform_edt(~pred.voxels, sampling=sampling)
    ahd = 0.5 * (float(to_ref[pred.voxels].mean()) + float(to_pred[ref.voxels].mean()))
    return msd, ahd


def hu_differentials(
    ct: Volume, ref: BinaryMask, pred: BinaryMask
) -> tuple[Optional[float], Optional[float]]:
    """Relative (and absolute relative) mean-HU difference of pred vs ref, in %.

    Sign convention: a more negative predicted mean yields a negative
    percentage (the denominator is |mean ref HU|).
    """
    require_same_geometry(ct, ref, "hu_differentials")
    require_same_geometry(ct, pred, "hu_differentials")
    if not ref.voxels.any() or not pred.voxels.any():
        raise DataError("hu_differentials: both masks must be nonempty")
    mu_ref = float(ct.voxels[ref.voxels].mean(dtype=np.float64))
    mu_pred = float(ct.voxels[pred.voxels].mean(dtype=np.float64))
    if mu_ref == 0.0:
        return None, None
    rel = 100.0 * (mu_pred - mu_ref) / abs(mu_ref)
    return rel, abs(rel)


def volume_differentials(ref: BinaryMask, pred: BinaryMask) -> tuple[float, float]:
    """Relative (and absolute relative) voxel-count difference of pred vs ref, in %."""
    require_same_geometry(ref, pred, "volume_differentials")
    n_ref = int(np.count_nonzero(ref.voxels))
    if n_ref == 0:
        raise DataError("volume_differentials: reference mask is empty")
    n_pred = int(np.count_nonzero(pred.voxels))
    rel = 100.0 * (n_pred - n_ref) / n_ref
    return rel, abs(rel)


@dataclass(frozen=True)
class LesionVolumeStats:
    ratio_ref: float
    ratio_pred: float
    rel_err_pct: Optional[float]


def lesion_volume_stats(
    lung: BinaryMask, lesion_ref: BinaryMask, lesion_pred: BinaryMask
) -> LesionVolumeStats:
    """Lesion/lung volume ratios and the relative error of the predicted lesion volume."""
    require_same_geometry(lung, lesion_ref, "lesion_volume_stats")
    require_same_geometry(lung, lesion_pred, "lesion_volume_stats")
    n_lung = int(np.count_nonzero(lung.voxels))
    if n_lung == 0:
        raise DataError("lesion_volume_stats: lung mask is empty")
    n_ref = int(np.count_nonzero(lesion_ref.voxels))
    n_pred = int(np.count_nonzero(lesion_pred.voxels))
    rel_err = 100.0 * (n_pred - n_ref) / n_ref if n_ref else None
    return LesionVolumeStats(n_ref / n_lung, n_pred / n_lung, rel_err)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending; leading +inf anchors the (0, 0) point
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def rows(self) -> list[tuple[float, float, float]]:
        return [
            (float(t), float(f), float(s))
            for t, f, s in zip(self.thresholds, self.fpr, self.tpr)
        ]


def _roc_from_scores(scores: np.ndarray, labels: np.ndarray, n_thresholds: Optional[int]) -> RocCurve:
    scores = scores.astype(np.float64)
    labels = labels.astype(bool)
    n_pos = int(np.count_nonzero(labels))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_curve: region needs at least one positive and one negative voxel")
    if n_thresholds is None:
        taus = np.unique(scores)[::-1]
    else:
        if n_thresholds < 2:
            raise DataError(f"n_thresholds must be >= 2, got {n_thresholds}")
        taus = np.linspace(1.0, 0.0, n_thresholds)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    # count of scores >= tau, via left bisection on the ascending sort
    tp = n_pos - np.searchsorted(pos, taus, side="left")
    fp = n_neg - np.searchsorted(neg, taus, side="left")
    taus = np.concatenate([[np.inf], taus])
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    auc = float(np.trapz(tpr, fpr))
    return RocCurve(taus, fpr, tpr, auc)


def roc_curve(
    prob: ProbMap,
    ref: BinaryMask,
    region: BinaryMask,
    n_thresholds: Optional[int] = None,
) -> RocCurve:
    """Threshold sweep of the probability map against the reference within a region.

    With n_thresholds=None every unique score is a threshold (the trapezoidal
    AUC then equals the Mann-Whitney statistic with ties counted half); else a
    uniform threshold grid on [0, 1] is used.
    """
    return roc_curve_pooled([(prob, ref, region)], n_thresholds)


def roc_curve_pooled(
    cases: list[tuple[ProbMap, BinaryMask, BinaryMask]],
    n_thresholds: Optional[int] = None,
) -> RocCurve:
    """One ROC over the voxels of several cases pooled together."""
    if not cases:
        raise DataError("roc_curve: no cases")
    scores, labels = [], []
    for prob, ref, region in cases:
        require_same_geometry(prob, ref, "roc_curve")
        require_same_geometry(prob, region, "roc_curve")
        sel = region.voxels
        scores.append(prob.voxels[sel])
        labels.append(ref.voxels[sel])
    return _roc_from_scores(np.concatenate(scores), np.concatenate(labels), n_thresholds)


@dataclass
class CaseMetrics:
    """One evaluated case; None marks metrics that are undefined or not computed."""

    case_id: str
    dice: Optional[float] = None
    jaccard: Optional[float] = None
    rel_mean_hu_diff_pct: Optional[float] = None
    abs_rel_mean_hu_diff_pct: Optional[float] = None
    rel_vol_diff_pct: Optional[float] = None
    abs_rel_vol_diff_pct: Optional[float] = None
    fnr: Optional[float] = None
    fpr: Optional[float] = None
    avg_hausdorff: Optional[float] = None
    mean_surface_dist: Optional[float] = None
    lesion_lung_ratio_ref: Optional[float] = None
    lesion_lung_ratio_pred: Optional[float] = None
    rel_lesion_vol_err_pct: Optional[float] = None


METRIC_COLUMNS = tuple(f.name for f in fields(CaseMetrics) if f.name != "case_id")

LUNG_COLUMNS = (
    "dice",
    "jaccard",
    "rel_mean_hu_diff_pct",
    "abs_rel_mean_hu_diff_pct",
    "rel_vol_diff_pct",
    "abs_rel_vol_diff_pct",
)

LESION_COLUMNS = (
    "dice",
    "jaccard",
    "fnr",
    "fpr",
    "avg_hausdorff",
    "mean_surface_dist",
    "lesion_lung_ratio_ref",
    "lesion_lung_ratio_pred",
    "rel_lesion_vol_err_pct",
)


def evaluate_lung_case(
    case_id: str, ct: Volume, ref_lung: BinaryMask, pred_lung: BinaryMask
) -> CaseMetrics:
    """Lung-segmentation metrics for one case (overlap, HU and volume differentials)."""
    out = CaseMetrics(case_id)
    out.dice = dice(ref_lung, pred_lung)
    out.jaccard = jaccard(ref_lung, pred_lung)
    if pred_lung.voxels.any() and ref_lung.voxels.any():
        out.rel_mean_hu_diff_pct, out.abs_rel_mean_hu_diff_pct = hu_differentials(
            ct, ref_lung, pred_lung
        )
    out.rel_vol_diff_pct, out.abs_rel_vol_diff_pct = volume_differentials(ref_lung, pred_lung)
    return out


def evaluate_lesion_case(
    case_id: str,
    ref_lesion: BinaryMask,
    pred_lesion: BinaryMask,
    ref_lung: BinaryMask,
) -> CaseMetrics:
    """Lesion-segmentation metrics for one case.

    Error rates are counted within the reference lung; surface distances are
    missing when either mask is empty.
    """
    out = CaseMetrics(case_id)
    out.dice = dice(ref_lesion, pred_lesion)
    out.jaccard = jaccard(ref_lesion, pred_lesion)
    counts = confusion(ref_lesion, pred_lesion, ref_lung)
    out.fnr = counts.fnr
    out.fpr = counts.fpr
    if ref_lesion.voxels.any() and pred_lesion.voxels.any():
        out.mean_surface_dist, out.avg_hausdorff = surface_distances(ref_lesion, pred_lesion)
    stats = lesion_volume_stats(ref_lung, ref_lesion, pred_lesion)
    out.lesion_lung_ratio_ref = stats.ratio_ref
    out.lesion_lung_ratio_pred = stats.ratio_pred
    out.rel_lesion_vol_err_pct = stats.rel_err_pct
    return out


@dataclass(frozen=True)
class ColumnStats:
    mean: Optional[float]
    sd: Optional[float]
    n: int


def aggregate(reports: list[CaseMetrics], columns=METRIC_COLUMNS) -> dict[str, ColumnStats]:
    """Per-column mean and population SD, excluding missing values."""
    if not reports:
        raise DataError("aggregate: no case reports")
    out: dict[str, ColumnStats] = {}
    for col in columns:
        values = [getattr(r, col) for r in reports if getattr(r, col) is not None]
        if values:
            arr = np.asarray(values, dtype=np.float64)
            out[col] = ColumnStats(float(arr.mean()), float(arr.std()), len(values))
        else:
            out[col] = ColumnStats(None, None, 0)
    return out


def write_report_csv(reports: list[CaseMetrics], path, columns=METRIC_COLUMNS) -> None:
    """Per-case rows plus two aggregate footer rows (mean, SD).

    Missing values are left blank; per-column non-missing counts are available
    from aggregate().
    """
    stats = aggregate(reports, columns)

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *columns])
        for r in reports:
            writer.writerow([r.case_id, *(fmt(getattr(r, c)) for c in columns)])
        writer.writerow(["mean", *(fmt(stats[c].mean) for c in columns)])
        writer.writerow(["sd", *(fmt(stats[c].sd) for c in columns)])


def write_roc_csv(curve: RocCurve, path) -> None:
    """Rows of (threshold, FPR, TPR) sorted by FPR ascending, then an AUC line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for tau, fpr, tpr in curve.rows():
            writer.writerow([f"{tau:.9g}", f"{fpr:.9f}", f"{tpr:.9f}"])
        writer.writerow(["AUC", f"{curve.auc:.9f}"])
