"""Scaled-down anchor-free detector: backbone, fused neck, three heads,
composite loss, target assignment, decoding, and the training loop.

The backbone stacks inverted-bottleneck blocks in the shallow stages and
partial-convolution bottlenecks in the deep stages; the neck fuses
top-down and bottom-up paths where downsampling is done by shuffle convs
and fusion nodes are attention-gated stems.  Each head emits, per cell,
``num_classes`` logits plus ``4 * reg_bins`` regression-bin logits; box
sides are decoded as bin-distribution expectations times the stride.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .blocks import (
    AVCStem,
    AVCStemConfig,
    BSBlock,
    BSConfig,
    Conv2dLayer,
    ConvBnSilu,
    GSConvBlock,
    GSConvConfig,
    MBConvBlock,
    MBConvConfig,
    Module,
)
from .errors import ConfigError, NumericError
from .metrics import Box, Detection
from .tensor import Tensor4

LOG_EPS = 1e-7  # probability clamp in all log terms


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

ALLOWED_DEPTHS = ((1, 2), (3, 6))


@dataclass
class ModelConfig:
    input_size: int = 96
    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    depths: tuple[int, int] = (1, 2)
    expansion: int = 6
    kernel: int = 3
    strides: tuple[int, int, int] = (8, 16, 32)
    reg_bins: int = 8
    num_classes: int = 1
    in_channels: int = 1

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.depths = tuple(self.depths)
        self.strides = tuple(self.strides)
        if len(self.strides) != 3:
            raise ConfigError(f"exactly three head scales required, got {self.strides}")
        if any(w < 1 for w in self.widths) or len(self.widths) != 4:
            raise ConfigError(f"widths must be four positive ints, got {self.widths}")
        if any(w % 2 for w in self.widths[1:]):
            raise ConfigError(f"stage widths beyond the stem must be even, got {self.widths}")
        if self.depths not in ALLOWED_DEPTHS:
            raise ConfigError(f"depths must be one of {ALLOWED_DEPTHS}, got {self.depths}")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.reg_bins < 2:
            raise ConfigError(f"reg_bins must be >= 2, got {self.reg_bins}")

    @property
    def head_channels(self) -> int:
        return self.num_classes + 4 * self.reg_bins

    def head_grid(self, scale: int) -> int:
        return self.input_size // self.strides[scale]


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale default: 96x96 input, widths 8/16/32/64."""
    return ModelConfig(**overrides)


def paper_scale_config() -> ModelConfig:
    """640x640 configuration with full-scale stage widths, used by the
    complexity accounting to bracket production-size cost totals."""
    return ModelConfig(input_size=640, widths=(16, 32, 64, 144), depths=(1, 2))


@dataclass
class LossWeights:
    lam_bce: float = 0.02
    lam_ciou: float = 0.49
    lam_dfl: float = 0.49

    def __post_init__(self):
        vals = (self.lam_bce, self.lam_ciou, self.lam_dfl)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConfigError(f"loss weights must be finite and >= 0, got {vals}")


@dataclass
class TrainConfig:
    batch: int = 16
    epochs: int = 1
    lr0: float = 0.001
    lr_final_fraction: float = 0.5
    momentum: float = 0.937
    beta2: float = 0.999
    weight_decay: float = 0.0005
    warmup_epochs: int = 3
    warmup_momentum: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Head(Module):
    def __init__(self, name: str, c_in: int, c_out: int, rng, dtype):
        super().__init__(name)
        self.stem = self._child(ConvBnSilu(f"{name}.stem", c_in, c_in, 3, rng=rng, dtype=dtype))
        self.out = self._child(Conv2dLayer(f"{name}.out", c_in, c_out, 1, bias=True,
                                           rng=rng, dtype=dtype))

    def forward(self, x, training=False, seed=0):
        return self.out(self.stem(x, training=training))


class Detector(Module):
    """Backbone -> fused neck -> three detection heads."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 7, dtype=np.float64):
        super().__init__("model")
        self.cfg = cfg
        rng = np.random.default_rng(init_seed)
        w0, w1, w2, w3 = cfg.widths
        mb = dict(expansion=cfg.expansion, kernel=cfg.kernel)

        self.stem = self._child(ConvBnSilu("model.stem", cfg.in_channels, w0, 3,
                                           stride=2, rng=rng, dtype=dtype))
        # shallow stages: inverted bottlenecks, repeated per the depth axis
        stage_a = [MBConvBlock("model.a0", MBConvConfig(w0, w1, stride=2, **mb),
                               rng=rng, dtype=dtype)]
        stage_a += [MBConvBlock(f"model.a{i}", MBConvConfig(w1, w1, **mb), rng=rng, dtype=dtype)
                    for i in range(1, cfg.depths[0])]
        self.stage_a = [self._child(b) for b in stage_a]
        stage_b = [MBConvBlock("model.b0", MBConvConfig(w1, w2, stride=2, **mb),
                               rng=rng, dtype=dtype)]
        stage_b += [MBConvBlock(f"model.b{i}", MBConvConfig(w2, w2, **mb), rng=rng, dtype=dtype)
                    for i in range(1, cfg.depths[1])]
        self.stage_b = [self._child(b) for b in stage_b]
        # deep stages: strided conv then partial-conv bottleneck
        self.down_c = self._child(ConvBnSilu("model.down_c", w2, w3, 3, stride=2,
                                             rng=rng, dtype=dtype))
        self.bs_c = self._child(BSBlock("model.bs_c", BSConfig(w3), rng=rng, dtype=dtype))
        self.down_d = self._child(ConvBnSilu("model.down_d", w3, w3, 3, stride=2,
                                             rng=rng, dtype=dtype))
        self.bs_d = self._child(BSBlock("model.bs_d", BSConfig(w3), rng=rng, dtype=dtype))
        # neck: top-down fusion then bottom-up re-aggregation
        self.fuse_t4 = self._child(AVCStem("model.fuse_t4", AVCStemConfig(2 * w3, w3),
                                           rng=rng, dtype=dtype))
        self.fuse_t3 = self._child(AVCStem("model.fuse_t3", AVCStemConfig(w3 + w2, w2),
                                           rng=rng, dtype=dtype))
        self.down_34 = self._child(GSConvBlock("model.down_34",
                                               GSConvConfig(w2, w2 // 2, stride=2),
                                               rng=rng, dtype=dtype))
        self.fuse_m4 = self._child(AVCStem("model.fuse_m4", AVCStemConfig(w2 + w3, w3),
                                           rng=rng, dtype=dtype))
        self.down_45 = self._child(GSConvBlock("model.down_45",
                                               GSConvConfig(w3, w3 // 2, stride=2),
                                               rng=rng, dtype=dtype))
        self.fuse_m5 = self._child(AVCStem("model.fuse_m5", AVCStemConfig(2 * w3, w3),
                                           rng=rng, dtype=dtype))
        self.heads = [self._child(Head(f"model.head{i}", c, cfg.head_channels, rng, dtype))
                      for i, c in enumerate((w2, w3, w3))]
        self.dtype = dtype

    def forward(self, x: Tensor4, training: bool = False, seed: int = 0) -> list[Tensor4]:
        kw = dict(training=training, seed=seed)
        out = self.stem(x, **kw)
        for b in self.stage_a:
            out = b(out, **kw)
        for b in self.stage_b:
            out = b(out, **kw)
        c3 = out
        c4 = self.bs_c(self.down_c(c3, **kw), **kw)
        c5 = self.bs_d(self.down_d(c4, **kw), **kw)

        t4 = self.fuse_t4(T.concat_channels([T.upsample2x(c5), c4]), **kw)
        t3 = self.fuse_t3(T.concat_channels([T.upsample2x(t4), c3]), **kw)
        m4 = self.fuse_m4(T.concat_channels([self.down_34(t3, **kw), t4]), **kw)
        m5 = self.fuse_m5(T.concat_channels([self.down_45(m4, **kw), c5]), **kw)
        return [self.heads[0](t3, **kw), self.heads[1](m4, **kw), self.heads[2](m5, **kw)]


def build_model(cfg: ModelConfig, init_seed: int = 7, dtype=np.float64) -> Detector:
    return Detector(cfg, init_seed=init_seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    """Per-scale map from positive head cell (batch, row, col) to the index
    of the matched ground truth within that batch element."""

    per_scale: list[dict[tuple[int, int, int], int]] = field(default_factory=list)

    def num_positives(self) -> int:
        return sum(len(d) for d in self.per_scale)


def gt_to_box(gt, size: int) -> Box:
    """Normalized center-format ground truth to a pixel-space Box."""
    return Box(
        max((gt.cx - gt.w / 2.0) * size, 0.0),
        max((gt.cy - gt.h / 2.0) * size, 0.0),
        min((gt.cx + gt.w / 2.0) * size, float(size)),
        min((gt.cy + gt.h / 2.0) * size, float(size)),
    )


def _pick_scale(extent: float, strides) -> int:
    # first scale whose [2s, 8s) range holds the box extent; below-all maps
    # to the finest scale, above-all to the coarsest
    for i, s in enumerate(strides):
        if 2 * s <= extent < 8 * s:
            return i
        if extent < 2 * s:
            return i
    return len(strides) - 1


def assign_targets(batch_gts, cfg: ModelConfig) -> Assignment:
    """Map each ground truth to the center cell of one scale.

    The scale is chosen by the box's larger side; the positive cell is the
    cell containing the box center.  When two ground truths land on the
    same cell, the larger area wins.
    """
    per_scale: list[dict[tuple[int, int, int], int]] = [dict() for _ in cfg.strides]
    areas: list[dict[tuple[int, int, int], float]] = [dict() for _ in cfg.strides]
    for b, gts in enumerate(batch_gts):
        for gi, gt in enumerate(gts):
            box = gt_to_box(gt, cfg.input_size)
            scale = _pick_scale(max(box.w, box.h), cfg.strides)
            stride = cfg.strides[scale]
            grid = cfg.head_grid(scale)
            gy = min(int(box.cy // stride), grid - 1)
            gx = min(int(box.cx // stride), grid - 1)
            key = (b, gy, gx)
            if key in per_scale[scale] and areas[scale][key] >= box.area:
                continue
            per_scale[scale][key] = gi
            areas[scale][key] = box.area
    return Assignment(per_scale=per_scale)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_loss(p, y) -> Tensor4:
    """Mean binary cross-entropy over all elements; probabilities are
    clamped to [1e-7, 1 - 1e-7] before the logs."""
    p = p if isinstance(p, Tensor4) else Tensor4.const(np.asarray(p, dtype=np.float64).reshape(1, 1, 1, -1))
    y = y if isinstance(y, Tensor4) else Tensor4.const(np.asarray(y, dtype=np.float64).reshape(1, 1, 1, -1))
    pc = T.clamp(p, LOG_EPS, 1.0 - LOG_EPS)
    term = T.add(T.mul(y, T.log(pc)), T.mul(T.sub(1.0, y), T.log(T.sub(1.0, pc))))
    return T.mul(T.mean_all(term), -1.0)


def _ciou_terms(px1, py1, px2, py2, gx1, gy1, gx2, gy2) -> Tensor4:
    """Per-row complete-IoU loss: 1 - IoU + center-distance and aspect terms."""
    ix = T.clamp(T.sub(T.minimum(px2, gx2), T.maximum(px1, gx1)), 0.0, None)
    iy = T.clamp(T.sub(T.minimum(py2, gy2), T.maximum(py1, gy1)), 0.0, None)
    inter = T.mul(ix, iy)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_g = T.mul(T.sub(gx2, gx1), T.sub(gy2, gy1))
    union = T.sub(T.add(area_p, area_g), inter)
    iou = T.div(inter, union)

    d2 = T.add(
        T.power(T.mul(T.sub(T.add(px1, px2), T.add(gx1, gx2)), 0.5), 2.0),
        T.power(T.mul(T.sub(T.add(py1, py2), T.add(gy1, gy2)), 0.5), 2.0),
    )
    c2 = T.add(
        T.power(T.sub(T.maximum(px2, gx2), T.minimum(px1, gx1)), 2.0),
        T.power(T.sub(T.maximum(py2, gy2), T.minimum(py1, gy1)), 2.0),
    )

    v = T.mul(
        T.power(T.sub(T.arctan2(T.sub(gx2, gx1), T.sub(gy2, gy1)),
                      T.arctan2(T.sub(px2, px1), T.sub(py2, py1))), 2.0),
        4.0 / math.pi ** 2,
    )
    alpha = T.div(v, T.maximum(T.add(T.sub(1.0, iou), v), 1e-9))
    return T.add(T.add(T.sub(1.0, iou), T.div(d2, c2)), T.mul(alpha, v))


def ciou_loss(pred: Box, gt: Box) -> float:
    """Complete-IoU loss between two boxes (scalar convenience form)."""
    if gt.area <= 0.0:
        raise NumericError(f"degenerate zero-area ground-truth box {gt}")

    def c(v):
        return Tensor4.const(np.full((1, 1, 1, 1), v, dtype=np.float64))

    out = _ciou_terms(c(pred.x1), c(pred.y1), c(pred.x2), c(pred.y2),
                      c(gt.x1), c(gt.y1), c(gt.x2), c(gt.y2))
    return out.item()


def dfl_loss(bin_probs: np.ndarray, target, alpha_f: float = 0.25,
             gamma: float = 2.0) -> float:
    """Focal-form penalty on the discretized box-side distribution.

    The floor and ceil bins of each continuous target coordinate receive
    -alpha * (1 - p)^gamma * log(p), linearly weighted by the fractional
    position; the result is averaged over all leading dimensions.  Targets
    outside [0, bins - 1] are clamped (with a warning).
    """
    probs = np.asarray(bin_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    bins = probs.shape[-1]
    flat = probs.reshape(-1, bins)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if t.size == 1 and flat.shape[0] > 1:
        t = np.full(flat.shape[0], t[0])
    n_clamped = int(np.count_nonzero((t < 0) | (t > bins - 1)))
    if n_clamped:
        warnings.warn(f"{n_clamped} regression targets clamped into [0, {bins - 1}]")
    t = np.clip(t, 0.0, bins - 1.0)
    lo = np.floor(t).astype(int)
    frac = t - lo
    total = 0.0
    for i in range(flat.shape[0]):
        p_lo = np.clip(flat[i, lo[i]], LOG_EPS, 1.0)
        total += (1.0 - frac[i]) * (-alpha_f * (1.0 - p_lo) ** gamma * np.log(p_lo))
        if frac[i] > 0.0:
            p_hi = np.clip(flat[i, lo[i] + 1], LOG_EPS, 1.0)
            total += frac[i] * (-alpha_f * (1.0 - p_hi) ** gamma * np.log(p_hi))
    return total / flat.shape[0]


def _focal_term(p: Tensor4, log_p: Tensor4, alpha_f: float, gamma: float) -> Tensor4:
    # log-probabilities come from a stable log-softmax so the penalty keeps
    # its gradient even when p underflows
    return T.mul(T.mul(T.power(T.sub(1.0, p), gamma), log_p), -alpha_f)


DFL_ALPHA = 0.25
DFL_GAMMA = 2.0


def total_loss(head_outs: list[Tensor4], assignment: Assignment, batch_gts,
               cfg: ModelConfig, weights: LossWeights = LossWeights()):
    """Composite objective: weighted sum of classification BCE over all
    cells and box losses (complete-IoU + focal bin regression) over the
    positive cells.  Returns (scalar loss tensor, breakdown dict)."""
    ncls, bins = cfg.num_classes, cfg.reg_bins
    dtype = head_outs[0].dtype

    # classification over every cell of every scale; the logit-stable
    # softplus form keeps the gradient (sigmoid(z) - y) alive even when a
    # cell saturates past the probability clamp
    bce_sum = None
    n_elems = 0
    for scale, out in enumerate(head_outs):
        n, _, gh, gw = out.shape
        logits = T.slice_channels(out, 0, ncls)
        y = np.zeros((n, ncls, gh, gw), dtype=dtype)
        for (b, gy, gx), gi in assignment.per_scale[scale].items():
            y[b, batch_gts[b][gi].class_id, gy, gx] = 1.0
        yc = Tensor4.const(y)
        term = T.add(T.mul(yc, T.softplus(T.mul(logits, -1.0))),
                     T.mul(T.sub(1.0, yc), T.softplus(logits)))
        s = T.sum_all(term)
        bce_sum = s if bce_sum is None else T.add(bce_sum, s)
        n_elems += y.size
    bce = T.mul(bce_sum, 1.0 / n_elems)

    # regression over positive cells, per scale
    ciou_sum = None
    dfl_sum = None
    n_pos = 0
    n_clamped = 0
    bin_idx = Tensor4.const(np.arange(bins, dtype=dtype).reshape(1, bins, 1, 1))
    for scale, out in enumerate(head_outs):
        cells = assignment.per_scale[scale]
        if not cells:
            continue
        stride = cfg.strides[scale]
        keys = sorted(cells.keys())
        gt_boxes = [gt_to_box(batch_gts[b][cells[(b, gy, gx)]], cfg.input_size)
                    for (b, gy, gx) in keys]
        p = len(keys)
        n_pos += p

        reg = T.slice_channels(out, ncls, ncls + 4 * bins)
        cols = T.gather_cells(reg, np.array(keys))  # (p, 4*bins, 1, 1)

        centers_x = np.array([(gx + 0.5) * stride for (_, _, gx) in keys])
        centers_y = np.array([(gy + 0.5) * stride for (_, gy, _) in keys])
        cx = Tensor4.const((centers_x.reshape(p, 1, 1, 1)).astype(dtype))
        cy = Tensor4.const((centers_y.reshape(p, 1, 1, 1)).astype(dtype))

        dists = []
        side_probs = []
        for side in range(4):
            logits = T.slice_channels(cols, side * bins, (side + 1) * bins)
            probs = T.softmax_channels(logits)
            side_probs.append(probs)
            expect = T.sum_channels(T.mul(probs, bin_idx))
            dists.append(T.mul(expect, float(stride)))
        left, top, right, bottom = dists

        gx1 = Tensor4.const((np.array([g.x1 for g in gt_boxes]).reshape(p, 1, 1, 1)).astype(dtype))
        gy1 = Tensor4.const((np.array([g.y1 for g in gt_boxes]).reshape(p, 1, 1, 1)).astype(dtype))
        gx2 = Tensor4.const((np.array([g.x2 for g in gt_boxes]).reshape(p, 1, 1, 1)).astype(dtype))
        gy2 = Tensor4.const((np.array([g.y2 for g in gt_boxes]).reshape(p, 1, 1, 1)).astype(dtype))
        losses = _ciou_terms(T.sub(cx, left), T.sub(cy, top),
                             T.add(cx, right), T.add(cy, bottom),
                             gx1, gy1, gx2, gy2)
        s = T.sum_all(losses)
        ciou_sum = s if ciou_sum is None else T.add(ciou_sum, s)

        # focal penalty on the floor/ceil bins of each side's target
        raw_targets = np.stack([
            (centers_x - np.array([g.x1 for g in gt_boxes])) / stride,
            (centers_y - np.array([g.y1 for g in gt_boxes])) / stride,
            (np.array([g.x2 for g in gt_boxes]) - centers_x) / stride,
            (np.array([g.y2 for g in gt_boxes]) - centers_y) / stride,
        ])  # (4, p)
        n_clamped += int(np.count_nonzero((raw_targets < 0) | (raw_targets > bins - 1)))
        targets = np.clip(raw_targets, 0.0, bins - 1.0)
        for side in range(4):
            t = targets[side]
            lo = np.floor(t).astype(int)
            frac = t - lo
            w_lo = Tensor4.const(((1.0 - frac).reshape(p, 1, 1, 1)).astype(dtype))
            p_lo = T.gather_channel(side_probs[side], lo)
            term = T.mul(_focal_term(p_lo, DFL_ALPHA, DFL_GAMMA), w_lo)
            if np.any(frac > 0):
                hi = np.minimum(lo + 1, bins - 1)
                w_hi = Tensor4.const((frac.reshape(p, 1, 1, 1)).astype(dtype))
                p_hi = T.gather_channel(side_probs[side], hi)
                term = T.add(term, T.mul(_focal_term(p_hi, DFL_ALPHA, DFL_GAMMA), w_hi))
            s = T.sum_all(term)
            dfl_sum = s if dfl_sum is None else T.add(dfl_sum, s)

    zero = Tensor4.const(np.zeros((1, 1, 1, 1), dtype=dtype))
    ciou = T.mul(ciou_sum, 1.0 / n_pos) if ciou_sum is not None else zero
    dfl = T.mul(dfl_sum, 1.0 / (4 * n_pos)) if dfl_sum is not None else zero

    total = T.add(T.add(T.mul(bce, weights.lam_bce), T.mul(ciou, weights.lam_ciou)),
                  T.mul(dfl, weights.lam_dfl))
    breakdown = {
        "bce": bce.item(),
        "ciou": ciou.item(),
        "dfl": dfl.item(),
        "total": total.item(),
        "n_pos": n_pos,
        "clamped_targets": n_clamped,
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _nms(dets: list[Detection], nms_iou: float) -> list[Detection]:
    keep: list[Detection] = []
    for det in sorted(dets, key=lambda d: -d.score):
        if all(metrics.iou(det.box, k.box) < nms_iou for k in keep):
            keep.append(det)
    return keep


def decode(head_outs, cfg: ModelConfig, score_thresh: float = 0.25,
           nms_iou: float = 0.45) -> list[list[Detection]]:
    """Head outputs to per-image detections: sigmoid class scores, bin
    expectations to box sides, score threshold, then greedy per-class NMS.
    Detections come back sorted by descending score."""
    if not (0.0 < score_thresh < 1.0) or not (0.0 < nms_iou < 1.0):
        raise ConfigError("score_thresh and nms_iou must lie in (0, 1)")
    ncls, bins = cfg.num_classes, cfg.reg_bins
    arange = np.arange(bins)
    outs = [o.data if isinstance(o, Tensor4) else np.asarray(o) for o in head_outs]
    n = outs[0].shape[0]
    raw: list[list[Detection]] = [[] for _ in range(n)]
    for scale, out in enumerate(outs):
        stride = cfg.strides[scale]
        _, _, gh, gw = out.shape
        scores = 1.0 / (1.0 + np.exp(-out[:, :ncls]))
        reg = out[:, ncls:].reshape(n, 4, bins, gh, gw)
        shifted = reg - reg.max(axis=2, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=2, keepdims=True)
        dist = np.einsum("nsbhw,b->nshw", probs, arange) * stride
        for b in range(n):
            for cls in range(ncls):
                ys, xs = np.nonzero(scores[b, cls] >= score_thresh)
                for gy, gx in zip(ys, xs):
                    cx = (gx + 0.5) * stride
                    cy = (gy + 0.5) * stride
                    l, t, r, d = dist[b, :, gy, gx]
                    box = Box(cx - l, cy - t, cx + r, cy + d)
                    raw[b].append(Detection(class_id=cls, score=float(scores[b, cls, gy, gx]),
                                            box=box, image_id=b))
    result = []
    for b in range(n):
        kept: list[Detection] = []
        for cls in sorted({d.class_id for d in raw[b]}):
            kept.extend(_nms([d for d in raw[b] if d.class_id == cls], nms_iou))
        result.append(sorted(kept, key=lambda d: -d.score))
    return result


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay and bias
    correction; the momentum coefficient is supplied per step so it can
    ramp during warm-up."""

    def __init__(self, params, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta2 = beta2
        self.eps = eps

    def step(self, lr: float, beta1: float, weight_decay: float) -> None:
        for p in self.params:
            g = p.value.grad
            if g is None:
                continue
            g = g.astype(np.float64)
            p.step_count += 1
            t = p.step_count
            p.moment1 = beta1 * p.moment1 + (1.0 - beta1) * g
            p.moment2 = self.beta2 * p.moment2 + (1.0 - self.beta2) * g * g
            m_hat = p.moment1 / (1.0 - beta1 ** t)
            v_hat = p.moment2 / (1.0 - self.beta2 ** t)
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if weight_decay:
                update = update + lr * weight_decay * p.value.data
            p.value.data = p.value.data - update.astype(p.value.data.dtype)


def lr_schedule(step: int, total_steps: int, steps_per_epoch: int,
                cfg: TrainConfig) -> tuple[float, float]:
    """(learning rate, momentum) at a step: linear warm-up for the first
    warm-up epochs (momentum ramps from its warm-up value), then cosine
    decay from lr0 to lr0 * lr_final_fraction at the final step."""
    warm = cfg.warmup_epochs * steps_per_epoch
    lr_final = cfg.lr0 * cfg.lr_final_fraction
    if step < warm:
        frac = (step + 1) / warm
        return cfg.lr0 * frac, cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * frac
    span = max(total_steps - 1 - warm, 1)
    t = min(max((step - warm) / span, 0.0), 1.0)
    lr = lr_final + 0.5 * (cfg.lr0 - lr_final) * (1.0 + math.cos(math.pi * t))
    return lr, cfg.momentum


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_step(model: Detector, optimizer: AdamW, images: np.ndarray, batch_gts,
               step: int, total_steps: int, steps_per_epoch: int,
               tcfg: TrainConfig, weights: LossWeights) -> dict:
    """One optimization step; returns the loss record.  Aborts with a
    diagnostic on a non-finite loss."""
    lr, beta1 = lr_schedule(step, total_steps, steps_per_epoch, tcfg)
    x = Tensor4(images.astype(model.dtype))
    step_seed = tcfg.seed * 1_000_003 + step
    outs = model.forward(x, training=True, seed=step_seed)
    assignment = assign_targets(batch_gts, model.cfg)
    loss, breakdown = total_loss(outs, assignment, batch_gts, model.cfg, weights)
    if not math.isfinite(breakdown["total"]):
        raise NumericError(f"non-finite loss at step {step}: {breakdown}")
    model.zero_grads()
    T.backward(loss)
    optimizer.step(lr, beta1, tcfg.weight_decay)
    record = {"step": step, "lr": lr}
    record.update(breakdown)
    return record


def predict(model: Detector, images: np.ndarray, score_thresh: float = 0.25,
            nms_iou: float = 0.45, batch: int = 16) -> list[list[Detection]]:
    """Inference-mode detections for a stack of images (n, c, h, w)."""
    dets: list[list[Detection]] = []
    with T.no_grad():
        for lo in range(0, images.shape[0], batch):
            x = Tensor4(images[lo:lo + batch].astype(model.dtype))
            outs = model.forward(x, training=False)
            for per_image in decode(outs, model.cfg, score_thresh, nms_iou):
                for d in per_image:
                    d.image_id = lo + d.image_id if isinstance(d.image_id, int) else d.image_id
                dets.append(per_image)
    # re-stamp image ids to dataset indices
    for i, per_image in enumerate(dets):
        for d in per_image:
            d.image_id = i
    return dets


def train_loop(model: Detector, images: np.ndarray, gts, tcfg: TrainConfig,
               weights: LossWeights = LossWeights(),
               max_steps: int | None = None,
               stop_map: float | None = None,
               stop_loss_ratio: float | None = None,
               eval_every: int = 50,
               log_fn=None) -> list[dict]:
    """Seeded full training loop over an in-memory dataset.

    Batches follow a per-epoch seeded shuffle.  When ``stop_map`` is set
    the loop evaluates the training set every ``eval_every`` steps and
    stops once the mAP target and the loss-drop ratio (if given) are both
    met.  Identical configs and data give identical loss records.
    """
    n = images.shape[0]
    steps_per_epoch = max(1, math.ceil(n / tcfg.batch))
    total_steps = tcfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    optimizer = AdamW(model.parameters(), beta2=tcfg.beta2)
    records: list[dict] = []
    rng = np.random.default_rng(tcfg.seed)
    first_total = None
    step = 0
    for _epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, tcfg.batch):
            if step >= total_steps:
                return records
            idx = order[lo:lo + tcfg.batch]
            rec = train_step(model, optimizer, images[idx], [gts[i] for i in idx],
                             step, total_steps, steps_per_epoch, tcfg, weights)
            records.append(rec)
            if log_fn:
                log_fn(rec)
            if first_total is None:
                first_total = rec["total"]
            step += 1
            if stop_map is not None and step % eval_every == 0:
                ratio_ok = (stop_loss_ratio is None
                            or rec["total"] <= first_total / stop_loss_ratio)
                if ratio_ok and _train_set_map(model, images, gts) >= stop_map:
                    return records
    return records


def _train_set_map(model: Detector, images: np.ndarray, gts) -> float:
    dets = predict(model, images)
    flat = [d for per in dets for d in per]
    gt_boxes = [metrics.GTBox(i, g.class_id, gt_to_box(g, model.cfg.input_size))
                for i, per in enumerate(gts) for g in per]
    if not gt_boxes:
        return 0.0
    return metrics.map50(flat, gt_boxes)
