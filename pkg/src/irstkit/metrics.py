"""Detection evaluation: IoU, precision/recall/F1, PR-curve AP, mAP@50,
contrast-based AP (NoCo), and the IoU shift-sensitivity analyzer.

All operations are pure functions with deterministic, order-fixed
aggregation.  Boxes are axis-aligned with corner and center-size views.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ShapeError


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; corners (x1, y1, x2, y2) with derived center view."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ShapeError(f"inverted box ({self.x1},{self.y1},{self.x2},{self.y2})")

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float) -> "Box":
        return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2.0

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2.0

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2


@dataclass
class Detection:
    """Scored prediction for one image."""

    class_id: int
    score: float
    box: Box
    image_id: int | str = 0


@dataclass
class GTBox:
    """Ground-truth box in the same pixel space as detections."""

    image_id: int | str
    class_id: int
    box: Box


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes and for two zero-area boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_sensitivity(box_size: float, shifts) -> list[tuple[float, float]]:
    """IoU of an axis-aligned square against its diagonally shifted copy,
    in continuous coordinates, for each shift."""
    if box_size < 1:
        raise DataError(f"box_size must be >= 1, got {box_size}")
    out = []
    for d in shifts:
        side = max(box_size - d, 0.0)
        inter = side * side
        union = 2.0 * box_size * box_size - inter
        out.append((float(d), inter / union))
    return out


# ---------------------------------------------------------------------------
# Confusion counts and PR curves
# ---------------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0  # unused by P/R/F1, retained for completeness


def prf1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall, F1 with 0/0 -> 0 conventions."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class PRCurve:
    points: list[tuple[float, float]] = field(default_factory=list)  # (recall, precision)


def _sorted_labels(scored: list[tuple[float, bool]]) -> list[bool]:
    # stable sort by descending score keeps tie order deterministic
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    return [scored[i][1] for i in order]


def pr_curve(scored: list[tuple[float, bool]], n_gt: int) -> PRCurve:
    labels = _sorted_labels(scored)
    tp = fp = 0
    pts = []
    for is_tp in labels:
        tp += int(is_tp)
        fp += int(not is_tp)
        pts.append((tp / n_gt, tp / (tp + fp)))
    return PRCurve(points=pts)


def average_precision(scored: list[tuple[float, bool]], n_gt: int) -> float:
    """Area under the monotone precision envelope of the PR step curve.

    ``scored`` holds (score, is_true_positive) pairs from one-to-one greedy
    matching; all-point interpolation (exact area), not sampled.
    """
    if n_gt < 1:
        raise DataError("average precision undefined without ground truth")
    labels = _sorted_labels(scored)
    if not labels:
        return 0.0
    tps = np.cumsum([1 if t else 0 for t in labels])
    fps = np.cumsum([0 if t else 1 for t in labels])
    recalls = tps / n_gt
    precisions = tps / (tps + fps)
    # envelope: non-increasing from the right
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def match_detections(dets: list[Detection], gts: list[GTBox],
                     iou_thresh: float = 0.5) -> tuple[list[tuple[float, bool]], int]:
    """Greedy one-to-one matching by descending score within (image, class).

    A detection is a true positive when its best unmatched same-class
    ground truth in the same image exceeds the IoU threshold; each ground
    truth matches at most one detection.  Returns (score, tp) pairs aligned
    with the detections plus the matched count.
    """
    matched: set[int] = set()
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    labels: list[tuple[float, bool]] = [None] * len(dets)  # type: ignore[list-item]
    n_matched = 0
    for i in order:
        det = dets[i]
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if j in matched or gt.image_id != det.image_id or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou > iou_thresh:
            matched.add(best_j)
            labels[i] = (det.score, True)
            n_matched += 1
        else:
            labels[i] = (det.score, False)
    return labels, n_matched


def map50(dets: list[Detection], gts: list[GTBox], iou_thresh: float = 0.5) -> float:
    """Mean AP over the classes present in the ground truth (IoU > 0.5 match)."""
    if not gts:
        raise DataError("mAP undefined: no ground truth at all")
    classes = sorted({g.class_id for g in gts})
    aps = []
    for cls in classes:
        cls_gts = [g for g in gts if g.class_id == cls]
        cls_dets = [d for d in dets if d.class_id == cls]
        labels, _ = match_detections(cls_dets, cls_gts, iou_thresh)
        aps.append(average_precision(labels, len(cls_gts)))
    orphan = sorted({d.class_id for d in dets} - set(classes))
    if orphan:
        warnings.warn(f"classes {orphan} have detections but no ground truth; skipped")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Normalized contrast (NoCo) and its AP sweep
# ---------------------------------------------------------------------------


@dataclass
class ContrastRegion:
    """Target pixel set and surrounding background annulus with gray stats."""

    target_rows: np.ndarray
    target_cols: np.ndarray
    background_rows: np.ndarray
    background_cols: np.ndarray
    mu_t: float
    mu_b: float
    sigma_b: float


def build_contrast_region(image: np.ndarray, box: Box) -> ContrastRegion:
    """Discretize a box onto the pixel grid; the background annulus is the
    box dilated by its own larger dimension on each side, minus the target."""
    h, w = image.shape
    ix1 = max(int(np.floor(box.x1)), 0)
    iy1 = max(int(np.floor(box.y1)), 0)
    ix2 = min(int(np.ceil(box.x2)), w)
    iy2 = min(int(np.ceil(box.y2)), h)
    if ix2 <= ix1 or iy2 <= iy1:
        raise DataError(f"empty target region for box {box}")
    d = int(np.ceil(max(box.w, box.h)))
    ox1, oy1 = max(ix1 - d, 0), max(iy1 - d, 0)
    ox2, oy2 = min(ix2 + d, w), min(iy2 + d, h)

    mask = np.zeros((h, w), dtype=bool)
    mask[oy1:oy2, ox1:ox2] = True
    tmask = np.zeros((h, w), dtype=bool)
    tmask[iy1:iy2, ix1:ix2] = True
    bmask = mask & ~tmask
    if not bmask.any():
        raise DataError(f"empty background annulus for box {box}")

    trows, tcols = np.nonzero(tmask)
    brows, bcols = np.nonzero(bmask)
    tvals = image[trows, tcols]
    bvals = image[brows, bcols]
    return ContrastRegion(trows, tcols, brows, bcols,
                          float(tvals.mean()), float(bvals.mean()), float(bvals.std()))


def noco(image: np.ndarray, region: ContrastRegion) -> float:
    """Normalized contrast (mu_T - mu_B) / sigma_B with sigma guarded at 1e-6."""
    if region.target_rows.size == 0:
        raise DataError("empty target region")
    mu_t = float(image[region.target_rows, region.target_cols].mean())
    bvals = image[region.background_rows, region.background_cols]
    mu_b = float(bvals.mean())
    sigma = max(float(bvals.std()), 1e-6)
    return (mu_t - mu_b) / sigma


DEFAULT_DELTAS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def mnocoap(dets: list[Detection], gts: list[GTBox],
            images: dict, deltas=DEFAULT_DELTAS) -> tuple[float, dict[float, float]]:
    """Contrast-thresholded AP averaged over the delta sweep.

    For each threshold, a detection is a true positive when (a) its
    centroid lies inside a not-yet-matched ground-truth box of the same
    image and (b) its region contrast, normalized by the ground-truth
    region's contrast and clamped to [0, 1], reaches the threshold.
    Matching is greedy in descending score; the result is the mean of the
    per-threshold APs.
    """
    if not gts:
        raise DataError("mNoCoAP undefined: no ground truth")
    for g in gts:
        if g.image_id not in images:
            raise DataError(f"missing image {g.image_id!r} for ground truth")

    gt_noco = []
    for g in gts:
        img = images[g.image_id]
        gt_noco.append(noco(img, build_contrast_region(img, g.box)))

    # candidates per detection: (gt index, normalized contrast score)
    candidates: list[list[tuple[int, float]]] = []
    for det in dets:
        if det.image_id not in images:
            raise DataError(f"missing image {det.image_id!r} for detection")
        img = images[det.image_id]
        cands = []
        det_noco = None
        for j, g in enumerate(gts):
            if g.image_id != det.image_id or not g.box.contains(det.box.cx, det.box.cy):
                continue
            if det_noco is None:
                det_noco = noco(img, build_contrast_region(img, det.box))
            denom = gt_noco[j] if abs(gt_noco[j]) > 1e-6 else 1e-6
            score = float(np.clip(det_noco / denom, 0.0, 1.0))
            cands.append((j, score))
        cands.sort(key=lambda t: (-t[1], t[0]))
        candidates.append(cands)

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    per_delta: dict[float, float] = {}
    for delta in deltas:
        matched: set[int] = set()
        scored = []
        for i in order:
            hit = False
            for j, nscore in candidates[i]:
                if j in matched:
                    continue
                if nscore >= delta:
                    matched.add(j)
                    hit = True
                break  # only the best unmatched candidate is considered
            scored.append((dets[i].score, hit))
        per_delta[delta] = average_precision(scored, len(gts)) if scored else 0.0
    value = float(np.mean(list(per_delta.values())))
    return value, per_delta


# ---------------------------------------------------------------------------
# Report bundle
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    map50: float
    mnocoap: float | None
    per_delta: dict[float, float] | None
    counts: ConfusionCounts
    curve: PRCurve

    def to_text(self) -> str:
        lines = [
            f"precision {self.precision:.6f}",
            f"recall {self.recall:.6f}",
            f"f1 {self.f1:.6f}",
            f"map50 {self.map50:.6f}",
            f"tp {self.counts.tp}",
            f"fp {self.counts.fp}",
            f"fn {self.counts.fn}",
        ]
        if self.mnocoap is not None:
            lines.append(f"mnocoap {self.mnocoap:.6f}")
            for delta, ap in sorted(self.per_delta.items()):
                lines.append(f"ap_delta_{delta:.1f} {ap:.6f}")
        return "\n".join(lines) + "\n"

    def pr_csv(self) -> str:
        lines = ["recall,precision"]
        lines += [f"{r:.9f},{p:.9f}" for r, p in self.curve.points]
        return "\n".join(lines) + "\n"

    def delta_csv(self) -> str:
        lines = ["delta,ap"]
        if self.per_delta:
            lines += [f"{d:.1f},{a:.9f}" for d, a in sorted(self.per_delta.items())]
        return "\n".join(lines) + "\n"


def evaluate_detections(dets: list[Detection], gts: list[GTBox],
                        images: dict | None = None,
                        iou_thresh: float = 0.5) -> MetricReport:
    """Full metric bundle at the detections' operating point."""
    labels, n_matched = match_detections(dets, gts, iou_thresh)
    counts = ConfusionCounts(tp=n_matched, fp=len(dets) - n_matched,
                             fn=len(gts) - n_matched)
    p, r, f1 = prf1(counts)
    m = map50(dets, gts, iou_thresh)
    curve = pr_curve(labels, max(len(gts), 1))
    if images is not None:
        value, per_delta = mnocoap(dets, gts, images)
    else:
        value, per_delta = None, None
    return MetricReport(precision=p, recall=r, f1=f1, map50=m,
                        mnocoap=value, per_delta=per_delta,
                        counts=counts, curve=curve)
