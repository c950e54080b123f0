"""3D region-proposal measurement network.

Pipeline: four conv+bn+ReLU backbone blocks with 2x2x2 max pooling between
them (feature stride 8), 1x1x1 heads for anchor objectness, box deltas and
organ class scores, greedy NMS, ROI max pooling onto a fixed grid, and one
two-layer regression head per organ that predicts the organ's measurement
quantities in normalized units.

Boxes are handled as float arrays [x0, y0, z0, x1, y1, z1] in voxel
coordinates (half-open); :class:`~ctabd.grid.Box3D` is converted at the
boundary. Targets are normalized by fixed reference scales so MSE values
land in a comparable magnitude range across quantities.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diff import (
    AdamConfig,
    AdamOptimizer,
    BatchNorm3d,
    Conv3d,
    Dropout,
    FixedLr,
    Linear,
    MaxPool3d,
    PointwiseConv3d,
    ReLU,
    StepDecay,
    component_rng,
    load_checkpoint,
    schedule_lr,
)
from .errors import ConfigError, FormatError, ParameterError, ShapeError
from .grid import Box3D, OrganId

# measurement quantities per organ, in fixed order
ORGAN_QUANTITIES: dict[OrganId, tuple[str, ...]] = {
    OrganId.LIVER: ("volume_cc", "lobe_right_cc", "lobe_left_cc"),
    OrganId.RIGHT_KIDNEY: ("volume_cc", "length_mm", "cortical_thickness_mm"),
    OrganId.LEFT_KIDNEY: ("volume_cc", "length_mm", "cortical_thickness_mm"),
    OrganId.SPLEEN: ("volume_cc", "surface_area_cm2"),
    OrganId.PROSTATE: ("volume_cc", "ap_diameter_mm"),
}

#: Fixed normalization scales per quantity (volumes in cc, lengths in mm,
#: areas in cm^2); normalized targets land around 1e-2..1e0.
QUANTITY_SCALES = {
    "volume_cc": 1000.0,
    "lobe_right_cc": 1000.0,
    "lobe_left_cc": 1000.0,
    "length_mm": 200.0,
    "cortical_thickness_mm": 200.0,
    "ap_diameter_mm": 200.0,
    "surface_area_cm2": 500.0,
}


def normalize_quantities(organ: OrganId, values: dict) -> np.ndarray:
    return np.array(
        [values[q] / QUANTITY_SCALES[q] for q in ORGAN_QUANTITIES[organ]], dtype=np.float64
    )


def denormalize_quantities(organ: OrganId, vec: np.ndarray) -> dict:
    return {
        q: float(v) * QUANTITY_SCALES[q] for q, v in zip(ORGAN_QUANTITIES[organ], vec)
    }


# -- box primitives ----------------------------------------------------------

def box_to_array(box: Box3D) -> np.ndarray:
    return np.array(box.lo + box.hi, dtype=np.float64)


def box_from_array(a, dims=None) -> Box3D:
    lo = [int(np.floor(v + 0.5)) for v in a[:3]]
    hi = [int(np.floor(v + 0.5)) for v in a[3:]]
    if dims is not None:
        lo = [min(max(v, 0), d - 1) for v, d in zip(lo, dims)]
        hi = [min(max(h, l + 1), d) for h, l, d in zip(hi, lo, dims)]
    else:
        hi = [max(h, l + 1) for h, l in zip(hi, lo)]
    return Box3D(tuple(lo), tuple(hi))


def box_volume(boxes: np.ndarray) -> np.ndarray:
    boxes = np.atleast_2d(boxes)
    ext = np.maximum(boxes[:, 3:] - boxes[:, :3], 0.0)
    return ext[:, 0] * ext[:, 1] * ext[:, 2]


def box_iou_3d(a, b):
    """IoU between two boxes, or between two equal-length box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    single = a.ndim == 1 and b.ndim == 1
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    lo = np.maximum(a[:, :3], b[:, :3])
    hi = np.minimum(a[:, 3:], b[:, 3:])
    inter = np.prod(np.maximum(hi - lo, 0.0), axis=1)
    union = box_volume(a) + box_volume(b) - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    return float(iou[0]) if single else iou


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU between every box in a and every box in b."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    inter = np.prod(np.maximum(hi - lo, 0.0), axis=2)
    union = box_volume(a)[:, None] + box_volume(b)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def bbox_encode(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Center offsets normalized by anchor extent, log-ratio sizes."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    sa = anchors[:, 3:] - anchors[:, :3]
    st = targets[:, 3:] - targets[:, :3]
    if np.any(st <= 0):
        raise ParameterError("encode requires positive target extents")
    ca = (anchors[:, :3] + anchors[:, 3:]) / 2.0
    ct = (targets[:, :3] + targets[:, 3:]) / 2.0
    return np.concatenate([(ct - ca) / sa, np.log(st / sa)], axis=1)


def bbox_decode(anchors: np.ndarray, deltas: np.ndarray, dims=None) -> np.ndarray:
    """Exact inverse of :func:`bbox_encode`, then optional clip to dims."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    sa = anchors[:, 3:] - anchors[:, :3]
    ca = (anchors[:, :3] + anchors[:, 3:]) / 2.0
    c = ca + deltas[:, :3] * sa
    s = sa * np.exp(deltas[:, 3:])
    out = np.concatenate([c - s / 2.0, c + s / 2.0], axis=1)
    if dims is not None:
        d = np.asarray(dims, dtype=np.float64)
        out[:, :3] = np.clip(out[:, :3], 0.0, d - 1.0)
        out[:, 3:] = np.clip(out[:, 3:], out[:, :3] + 1e-3, d)
    return out


def nms_3d(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list[int]:
    """Greedy descending-score suppression; ties keep the lower index."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    alive = np.ones(len(scores), dtype=bool)
    for idx in order:
        if not alive[idx]:
            continue
        keep.append(int(idx))
        ious = box_iou_3d(np.broadcast_to(boxes[idx], boxes.shape), boxes)
        alive &= ious <= iou_threshold
        alive[idx] = False
    return keep


def generate_anchors(feat_dims, scales, stride: float) -> np.ndarray:
    """Cubic anchors centered on feature cells, mapped to input voxels.

    Ordering matches a head reshape of (A, FX, FY, FZ): scale varies
    slowest, then cell x, y, z.
    """
    fx, fy, fz = feat_dims
    cx = (np.arange(fx) + 0.5) * stride
    cy = (np.arange(fy) + 0.5) * stride
    cz = (np.arange(fz) + 0.5) * stride
    gx, gy, gz = np.meshgrid(cx, cy, cz, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    out = []
    for s in scales:
        half = float(s) / 2.0
        out.append(np.concatenate([centers - half, centers + half], axis=1))
    return np.concatenate(out, axis=0)


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class MeasureNetConfig:
    patch: tuple[int, int, int] = (64, 64, 32)
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    anchor_scales: tuple[float, ...] = (12.0, 18.0, 26.0)
    roi_grid: tuple[int, int, int] = (4, 4, 2)
    hidden: int = 128
    dropout_rates: dict = field(
        default_factory=lambda: {OrganId.LIVER: 0.2, OrganId.PROSTATE: 0.3}
    )
    iou_positive: float = 0.5
    iou_negative: float = 0.2
    nms_iou: float = 0.5
    score_threshold: float = 0.5
    infer_stride: tuple[int, int, int] = (64, 64, 16)
    total_steps: int = 400
    steps_per_epoch: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ConfigError("the backbone uses exactly four convolutional blocks")
        for p in self.patch:
            if p % 8:
                raise ConfigError(f"patch dims must be divisible by 8 (three poolings): {self.patch}")
        if self.total_steps < 1 or self.steps_per_epoch < 1:
            raise ConfigError("step counts must be >= 1")

    @property
    def feature_stride(self) -> int:
        return 8

    @property
    def feat_dims(self) -> tuple[int, int, int]:
        return tuple(p // self.feature_stride for p in self.patch)

    @property
    def num_anchors_per_cell(self) -> int:
        return len(self.anchor_scales)


#: Per-head learning-rate schedules; the shared trunk follows the kidney one.
HEAD_SCHEDULES = {
    "trunk": StepDecay(0.002, 0.8, 15),
    OrganId.RIGHT_KIDNEY: StepDecay(0.002, 0.8, 15),
    OrganId.LEFT_KIDNEY: StepDecay(0.002, 0.8, 15),
    OrganId.SPLEEN: StepDecay(0.001, 0.8, 15),
    OrganId.LIVER: FixedLr(0.001),
    OrganId.PROSTATE: FixedLr(0.001),
}

NUM_ORGAN_CLASSES = 5  # organ labels 1..5 map to class indices 0..4


@dataclass(frozen=True)
class Proposal:
    box: np.ndarray          # (6,) float voxel coordinates, clipped to the patch
    objectness: float
    class_scores: np.ndarray  # (5,) softmax over organ classes

    def organ_score(self, organ: OrganId) -> float:
        return self.objectness * float(self.class_scores[int(organ) - 1])


@dataclass(frozen=True)
class MeasurementOutput:
    organ: OrganId
    quantities: dict
    score: float
    box: Box3D
    provenance: str = "learned"

    def to_dict(self) -> dict:
        return {
            "quantities": {q: self.quantities[q] for q in ORGAN_QUANTITIES[self.organ]},
            "score": self.score,
            "box": [list(self.box.lo), list(self.box.hi)],
            "provenance": self.provenance,
        }


# -- ROI pooling ---------------------------------------------------------------

def _roi_bins(lo: float, hi: float, n_cells: int, limit: int):
    """Integer bin ranges per cell; empty cells fall back to the nearest voxel."""
    i0 = int(np.floor(lo))
    i1 = int(np.ceil(hi))
    i0 = min(max(i0, 0), limit - 1)
    i1 = min(max(i1, i0 + 1), limit)
    length = i1 - i0
    bins = []
    for k in range(n_cells):
        a = i0 + (k * length) // n_cells
        b = i0 + ((k + 1) * length) // n_cells
        if b <= a:
            a = min(a, i1 - 1)
            b = a + 1
        bins.append((a, b))
    return bins


class RoiPool:
    """Max pooling of one feature map region onto a fixed cell grid."""

    def __init__(self, grid: tuple[int, int, int]):
        self.grid = grid
        self._cache = None

    def forward(self, feat: np.ndarray, box: np.ndarray) -> np.ndarray:
        c, fx, fy, fz = feat.shape
        gx, gy, gz = self.grid
        xb = _roi_bins(box[0], box[3], gx, fx)
        yb = _roi_bins(box[1], box[4], gy, fy)
        zb = _roi_bins(box[2], box[5], gz, fz)
        out = np.empty((c, gx, gy, gz), feat.dtype)
        argmax = np.empty((c, gx, gy, gz, 3), np.int32)
        for ix, (xa, xe) in enumerate(xb):
            for iy, (ya, ye) in enumerate(yb):
                for iz, (za, ze) in enumerate(zb):
                    cell = feat[:, xa:xe, ya:ye, za:ze].reshape(c, -1)
                    flat = np.argmax(cell, axis=1)
                    out[:, ix, iy, iz] = cell[np.arange(c), flat]
                    sx, sy, sz = np.unravel_index(flat, (xe - xa, ye - ya, ze - za))
                    argmax[:, ix, iy, iz, 0] = sx + xa
                    argmax[:, ix, iy, iz, 1] = sy + ya
                    argmax[:, ix, iy, iz, 2] = sz + za
        self._cache = (feat.shape, argmax)
        return out

    def backward(self, gout: np.ndarray, gfeat: np.ndarray) -> None:
        shape, argmax = self._cache
        c = shape[0]
        am = argmax.reshape(c, -1, 3)
        go = gout.reshape(c, -1)
        for ch in range(c):
            np.add.at(gfeat[ch], (am[ch, :, 0], am[ch, :, 1], am[ch, :, 2]), go[ch])


# -- the network ---------------------------------------------------------------

class MeasureNet:
    """Backbone + RPN heads + per-organ measurement heads."""

    def __init__(self, config: MeasureNetConfig, seed: int, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = component_rng(seed, "measure", "init")
        chans = config.channels
        self.blocks = []
        in_ch = 1
        for ch in chans:
            self.blocks.append(
                {
                    "conv": Conv3d(in_ch, ch, rng, dtype),
                    "bn": BatchNorm3d(ch, dtype=dtype),
                    "relu": ReLU(),
                }
            )
            in_ch = ch
        self.pools = [MaxPool3d() for _ in range(3)]
        a = config.num_anchors_per_cell
        self.head_obj = PointwiseConv3d(chans[-1], a, rng, dtype)
        self.head_delta = PointwiseConv3d(chans[-1], 6 * a, rng, dtype)
        self.head_cls = PointwiseConv3d(chans[-1], NUM_ORGAN_CLASSES * a, rng, dtype)
        gx, gy, gz = config.roi_grid
        feat_in = chans[-1] * gx * gy * gz + 4  # pooled features + box geometry
        self.measure_heads = {}
        for organ in OrganId:
            nq = len(ORGAN_QUANTITIES[organ])
            rate = config.dropout_rates.get(organ, 0.0)
            self.measure_heads[organ] = {
                "fc1": Linear(feat_in, config.hidden, rng, dtype),
                "relu": ReLU(),
                "dropout": Dropout(rate, component_rng(seed, "measure", "dropout", organ.name)),
                "fc2": Linear(config.hidden, nq, rng, dtype),
            }
        self.anchors = generate_anchors(config.feat_dims, config.anchor_scales, config.feature_stride)

    # parameter groups ------------------------------------------------------

    def trunk_params(self):
        for i, blk in enumerate(self.blocks):
            for lname in ("conv", "bn"):
                for pname, p in blk[lname].params():
                    yield f"block{i}.{lname}.{pname}", p
        for hname, head in (("obj", self.head_obj), ("delta", self.head_delta), ("cls", self.head_cls)):
            for pname, p in head.params():
                yield f"rpn.{hname}.{pname}", p

    def head_params(self, organ: OrganId):
        head = self.measure_heads[organ]
        for lname in ("fc1", "fc2"):
            for pname, p in head[lname].params():
                yield f"head.{organ.name}.{lname}.{pname}", p

    def named_params(self):
        yield from self.trunk_params()
        for organ in OrganId:
            yield from self.head_params(organ)

    def named_buffers(self):
        for i, blk in enumerate(self.blocks):
            for bname, _ in blk["bn"].buffers():
                yield f"block{i}.bn.{bname}", blk["bn"], bname

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def checkpoint_entries(self):
        entries = [(name, p.data) for name, p in self.named_params()]
        entries += [(name, getattr(layer, bname)) for name, layer, bname in self.named_buffers()]
        return entries

    def load_entries(self, arrays: dict):
        for name, p in self.named_params():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing parameter {name!r}")
            if tuple(arrays[name].shape) != p.data.shape:
                raise FormatError(f"checkpoint parameter {name!r} has the wrong shape")
            p.data = arrays[name].astype(self.dtype)
        for name, layer, bname in self.named_buffers():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing buffer {name!r}")
            setattr(layer, bname, arrays[name].astype(self.dtype))

    # forward/backward ------------------------------------------------------

    def backbone_forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        h = x
        for i, blk in enumerate(self.blocks):
            h = blk["conv"].forward(h, train)
            h = blk["bn"].forward(h, train)
            h = blk["relu"].forward(h, train)
            if i < 3:
                h = self.pools[i].forward(h, train)
        return h

    def backbone_backward(self, gfeat: np.ndarray) -> None:
        g = gfeat
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            if i < 3:
                g = self.pools[i].backward(g)
            g = blk["relu"].backward(g)
            g = blk["bn"].backward(g)
            g = blk["conv"].backward(g)

    def rpn_heads_forward(self, feat: np.ndarray, train: bool):
        """Returns flat (n_anchor,) objectness logits, (n_anchor, 6) deltas,
        (n_anchor, 5) class logits for batch size 1."""
        a = self.config.num_anchors_per_cell
        obj = self.head_obj.forward(feat, train)[0].reshape(-1)
        delta = self.head_delta.forward(feat, train)[0].reshape(a, 6, -1)
        delta = np.moveaxis(delta, 1, 2).reshape(-1, 6)
        cls = self.head_cls.forward(feat, train)[0].reshape(a, NUM_ORGAN_CLASSES, -1)
        cls = np.moveaxis(cls, 1, 2).reshape(-1, NUM_ORGAN_CLASSES)
        return obj, delta, cls

    def rpn_heads_backward(self, gobj: np.ndarray, gdelta: np.ndarray, gcls: np.ndarray) -> np.ndarray:
        a = self.config.num_anchors_per_cell
        fx, fy, fz = self.config.feat_dims
        n_cell = fx * fy * fz
        gobj5 = gobj.reshape(1, a, fx, fy, fz).astype(self.dtype)
        gd = np.moveaxis(gdelta.reshape(a, n_cell, 6), 2, 1).reshape(1, 6 * a, fx, fy, fz)
        gc = np.moveaxis(gcls.reshape(a, n_cell, NUM_ORGAN_CLASSES), 2, 1)
        gc = gc.reshape(1, NUM_ORGAN_CLASSES * a, fx, fy, fz)
        gfeat = self.head_obj.backward(np.ascontiguousarray(gobj5))
        gfeat = gfeat + self.head_delta.backward(np.ascontiguousarray(gd.astype(self.dtype)))
        gfeat = gfeat + self.head_cls.backward(np.ascontiguousarray(gc.astype(self.dtype)))
        return gfeat

    def measure_head_forward(self, organ: OrganId, pooled: np.ndarray, box: np.ndarray, train: bool):
        """pooled: (C, gx, gy, gz); box: (6,) in feature coordinates."""
        px, py, pz = self.config.feat_dims
        ext = np.maximum(np.asarray(box[3:]) - np.asarray(box[:3]), 1e-3)
        prior = float(np.prod(ext)) / float(px * py * pz)
        geom = np.array([ext[0] / px, ext[1] / py, ext[2] / pz, prior], dtype=self.dtype)
        vec = np.concatenate([pooled.reshape(-1).astype(self.dtype), geom])[None, :]
        head = self.measure_heads[organ]
        h = head["fc1"].forward(vec, train)
        h = head["relu"].forward(h, train)
        h = head["dropout"].forward(h, train)
        out = head["fc2"].forward(h, train)
        return out[0]

    def measure_head_backward(self, organ: OrganId, gout: np.ndarray) -> np.ndarray:
        """Returns the gradient w.r.t. the pooled feature block."""
        head = self.measure_heads[organ]
        g = head["fc2"].backward(gout[None, :])
        g = head["dropout"].backward(g)
        g = head["relu"].backward(g)
        g = head["fc1"].backward(g)
        gx, gy, gz = self.config.roi_grid
        c = self.config.channels[-1]
        return g[0, : c * gx * gy * gz].reshape(c, gx, gy, gz)


# -- losses -------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, iou_pos: float, iou_neg: float,
                  ignore_boxes: np.ndarray | None = None):
    """Anchor labels: +1 positive, 0 negative, -1 ignored; plus target index.

    Anchors at IoU >= iou_pos to any ground-truth box are positive and
    anchors below iou_neg negative; additionally the best-IoU anchor of
    every ground-truth box is positive so each box always trains the
    regressor. Anchors overlapping an ignore box above iou_neg are dropped
    from the negatives.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    target_idx = np.full(n, -1, dtype=np.int64)
    if gt_boxes is None or len(gt_boxes) == 0:
        labels[:] = 0
    else:
        m = iou_matrix(anchors, gt_boxes)
        best_gt = m.argmax(axis=1)
        best_iou = m[np.arange(n), best_gt]
        labels[best_iou < iou_neg] = 0
        labels[(best_iou >= iou_neg) & (best_iou < iou_pos)] = -1
        labels[best_iou >= iou_pos] = 1
        for g in range(m.shape[1]):
            a = int(m[:, g].argmax())
            labels[a] = 1
            best_gt[a] = g
        target_idx[labels == 1] = best_gt[labels == 1]
    if ignore_boxes is not None and len(ignore_boxes):
        mi = iou_matrix(anchors, ignore_boxes).max(axis=1)
        labels[(labels == 0) & (mi >= iou_neg)] = -1
    return labels, target_idx


def smooth_l1(x: np.ndarray):
    """Elementwise smooth-L1 value and derivative."""
    ax = np.abs(x)
    val = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    grad = np.where(ax < 1.0, x, np.sign(x))
    return val, grad


def rpn_loss_grad(obj_logits, deltas, cls_logits, anchors, gt_boxes, gt_organs,
                  iou_pos=0.5, iou_neg=0.2, ignore_boxes=None):
    """Objectness BCE + positive smooth-L1 on deltas + positive class CE.

    The BCE balances positives and negatives (0.5 weight each side) so the
    anchor imbalance does not drown the objectness signal. Returns
    (loss, gobj, gdeltas, gcls, labels).
    """
    labels, tidx = match_anchors(anchors, gt_boxes, iou_pos, iou_neg, ignore_boxes)
    pos = np.where(labels == 1)[0]
    neg = np.where(labels == 0)[0]
    p = _sigmoid(obj_logits.astype(np.float64))
    gobj = np.zeros_like(obj_logits, dtype=np.float64)
    loss = 0.0
    eps = 1e-12
    for idx, target, weight in ((pos, 1.0, 0.5), (neg, 0.0, 0.5)):
        if idx.size == 0:
            continue
        pi = p[idx]
        loss += -weight * np.mean(
            target * np.log(pi + eps) + (1.0 - target) * np.log(1.0 - pi + eps)
        )
        gobj[idx] = weight * (pi - target) / idx.size
    gdeltas = np.zeros_like(deltas, dtype=np.float64)
    gcls = np.zeros_like(cls_logits, dtype=np.float64)
    if pos.size and gt_boxes is not None and len(gt_boxes):
        t = bbox_encode(anchors[pos], gt_boxes[tidx[pos]])
        diff = deltas[pos].astype(np.float64) - t
        val, grad = smooth_l1(diff)
        loss += val.sum() / (pos.size * 6)
        gdeltas[pos] = grad / (pos.size * 6)
        # class cross-entropy over organ classes
        logits = cls_logits[pos].astype(np.float64)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        cls_t = np.array([int(o) - 1 for o in np.asarray(gt_organs)[tidx[pos]]])
        loss += -np.mean(np.log(probs[np.arange(pos.size), cls_t] + eps))
        gp = probs.copy()
        gp[np.arange(pos.size), cls_t] -= 1.0
        gcls[pos] = gp / pos.size
    return float(loss), gobj, gdeltas, gcls, labels


def measurement_loss_grad(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over one head's normalized quantity vector."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return loss, grad


# -- training samples ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeasureSample:
    """One training patch with ground truth in patch coordinates."""

    patch: np.ndarray                     # (X, Y, Z) float32, preprocessed
    gt_boxes: np.ndarray                  # (K, 6) float
    gt_organs: tuple[OrganId, ...]        # len K
    gt_quantities: tuple[np.ndarray, ...]  # len K, normalized target vectors
    ignore_boxes: np.ndarray              # (J, 6) float


def build_measure_samples(image: np.ndarray, organ_boxes: dict, organ_quantities: dict,
                          patch_dims, rng, per_organ: int = 2) -> list[MeasureSample]:
    """Cut organ-centered training patches from one volume.

    ``organ_boxes`` maps OrganId -> Box3D in volume coordinates;
    ``organ_quantities`` maps OrganId -> normalized target vector. Patches
    are jittered so each fully contains its anchor organ; other organs are
    kept as ground truth when fully visible and ignored otherwise.
    """
    dims = image.shape
    out = []
    for organ in sorted(organ_boxes):
        box = organ_boxes[organ]
        for _ in range(per_organ):
            corner = []
            for ax in range(3):
                lo = max(0, box.hi[ax] - patch_dims[ax])
                hi = min(box.lo[ax], dims[ax] - patch_dims[ax])
                if hi < lo:  # organ larger than the patch on this axis
                    c = min(max(box.lo[ax], 0), dims[ax] - patch_dims[ax])
                else:
                    c = int(rng.integers(lo, hi + 1))
                corner.append(c)
            sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_dims))
            patch = np.ascontiguousarray(image[sl], dtype=np.float32)
            gt_b, gt_o, gt_q, ign = [], [], [], []
            for o2, b2 in organ_boxes.items():
                arr = box_to_array(b2) - np.array(corner + corner, dtype=np.float64)
                inside = np.all(arr[:3] >= 0) and np.all(arr[3:] <= np.array(patch_dims))
                overlaps = np.all(arr[3:] > 0) and np.all(arr[:3] < np.array(patch_dims))
                if inside:
                    gt_b.append(arr)
                    gt_o.append(o2)
                    gt_q.append(organ_quantities[o2])
                elif overlaps:
                    clipped = arr.copy()
                    clipped[:3] = np.maximum(clipped[:3], 0)
                    clipped[3:] = np.minimum(clipped[3:], np.array(patch_dims, dtype=np.float64))
                    ign.append(clipped)
            out.append(
                MeasureSample(
                    patch=patch,
                    gt_boxes=np.array(gt_b) if gt_b else np.zeros((0, 6)),
                    gt_organs=tuple(gt_o),
                    gt_quantities=tuple(gt_q),
                    ignore_boxes=np.array(ign) if ign else np.zeros((0, 6)),
                )
            )
    return out


# -- training -------------------------------------------------------------------

def train_measurement(samples: list[MeasureSample], config: MeasureNetConfig, seed: int):
    """Deterministic training; returns (net, log rows).

    One patch per step. The trunk and each organ head follow their own
    learning-rate schedules, all through Adam.
    """
    if not samples:
        raise ParameterError("empty measurement training dataset")
    net = MeasureNet(config, seed)
    opt_trunk = AdamOptimizer(net.trunk_params(), config.adam)
    opt_heads = {o: AdamOptimizer(net.head_params(o), config.adam) for o in OrganId}
    rng = component_rng(seed, "measure", "batches")
    roi = RoiPool(config.roi_grid)
    log = []
    for step in range(config.total_steps):
        epoch = step / config.steps_per_epoch
        sample = samples[int(rng.integers(0, len(samples)))]
        x = sample.patch[None, None].astype(net.dtype)
        feat = net.backbone_forward(x, train=True)
        obj, deltas, cls = net.rpn_heads_forward(feat, train=True)
        loss, gobj, gdeltas, gcls, _ = rpn_loss_grad(
            obj, deltas, cls, net.anchors, sample.gt_boxes, sample.gt_organs,
            config.iou_positive, config.iou_negative, sample.ignore_boxes,
        )
        gfeat = net.rpn_heads_backward(gobj, gdeltas, gcls)
        gfeat = np.ascontiguousarray(gfeat)
        # measurement heads train on ground-truth boxes with light jitter
        stride = config.feature_stride
        for k, organ in enumerate(sample.gt_organs):
            box = sample.gt_boxes[k].copy()
            box[:3] = box[:3] + rng.uniform(-1.0, 1.0, 3)
            box[3:] = box[3:] + rng.uniform(-1.0, 1.0, 3)
            fbox = box / stride
            pooled = roi.forward(feat[0], fbox)
            pred = net.measure_head_forward(organ, pooled, fbox, train=True)
            mloss, gpred = measurement_loss_grad(pred, sample.gt_quantities[k].astype(pred.dtype))
            loss += mloss
            gpool = net.measure_head_backward(organ, gpred.astype(net.dtype))
            roi.backward(gpool.astype(np.float64), gfeat[0])
        opt_trunk.zero_grad()
        for o in OrganId:
            opt_heads[o].zero_grad()
        net.backbone_backward(gfeat.astype(net.dtype))
        opt_trunk.step(schedule_lr(HEAD_SCHEDULES["trunk"], epoch))
        for o in OrganId:
            opt_heads[o].step(schedule_lr(HEAD_SCHEDULES[o], epoch))
        log.append((step, float(loss)))
    return net, log


# -- inference -------------------------------------------------------------------

def rpn_forward(net: MeasureNet, patch: np.ndarray, nms_iou: float | None = None) -> tuple[list[Proposal], np.ndarray]:
    """Proposals for one patch after NMS, plus the backbone feature map."""
    cfg = net.config
    x = patch[None, None].astype(net.dtype)
    feat = net.backbone_forward(x, train=False)
    obj, deltas, cls = net.rpn_heads_forward(feat, train=False)
    scores = _sigmoid(obj.astype(np.float64))
    boxes = bbox_decode(net.anchors, deltas.astype(np.float64), dims=cfg.patch)
    e = np.exp(cls.astype(np.float64) - cls.astype(np.float64).max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    keep = nms_3d(boxes, scores, cfg.nms_iou if nms_iou is None else nms_iou)
    proposals = [Proposal(boxes[i], float(scores[i]), probs[i]) for i in keep]
    return proposals, feat


def run_measurement(grid_data: np.ndarray, net: MeasureNet) -> dict:
    """Slide patches over a volume; returns {organ: MeasurementOutput}.

    Organs whose best proposal scores below the threshold are absent from
    the result (reported as missing, not an error).
    """
    cfg = net.config
    dims = grid_data.shape
    from .preprocess import patch_corners, PatchSpec

    spec = PatchSpec(cfg.patch, tuple(min(s, p) for s, p in zip(cfg.infer_stride, cfg.patch)))
    corners = patch_corners(dims, spec)
    roi = RoiPool(cfg.roi_grid)
    candidates: dict[OrganId, list] = {o: [] for o in OrganId}
    for corner in corners:
        sl = tuple(slice(c, c + p) for c, p in zip(corner, cfg.patch))
        patch = np.ascontiguousarray(grid_data[sl], dtype=np.float32)
        if patch.shape != tuple(cfg.patch):
            pad = [(0, p - s) for s, p in zip(patch.shape, cfg.patch)]
            patch = np.pad(patch, pad, mode="edge")
        proposals, feat = rpn_forward(net, patch)
        for prop in proposals:
            for organ in OrganId:
                s = prop.organ_score(organ)
                if s >= cfg.score_threshold:
                    candidates[organ].append((s, corner, prop, feat))
    out = {}
    for organ in OrganId:
        if not candidates[organ]:
            continue
        s, corner, prop, feat = max(candidates[organ], key=lambda t: t[0])
        fbox = prop.box / cfg.feature_stride
        pooled = roi.forward(feat[0], fbox)
        vec = net.measure_head_forward(organ, pooled, fbox, train=False)
        quantities = denormalize_quantities(organ, vec.astype(np.float64))
        vol_box = prop.box + np.array(corner + corner, dtype=np.float64)
        out[organ] = MeasurementOutput(
            organ=organ,
            quantities=quantities,
            score=float(s),
            box=box_from_array(vol_box, dims=dims),
        )
    return out
