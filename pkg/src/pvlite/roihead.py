"""Proposal refinement: keypoint-to-grid RoI feature pooling, IoU-guided
confidence targets, proposal sampling, the refinement head and the final
NMS, plus the average-pooling ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, nn, rpn
from .geom import Box3D, Detection
from .vsa import _aggregate_branch, radius_query

GRID_RESOLUTION = 6
GRID_POINTS = GRID_RESOLUTION**3


@dataclass(frozen=True)
class RoiGrid:
    """A proposal's 6x6x6 grid points with aggregated and pooled features."""

    roi: Box3D
    grid_points: np.ndarray  # (216, 3)
    grid_features: np.ndarray  # (216, width)
    roi_feature: np.ndarray  # (roi_feature_width,)

    def __post_init__(self):
        if self.grid_points.shape[0] != GRID_POINTS:
            raise ValueError(f"expected {GRID_POINTS} grid points")
        if self.grid_features.shape[0] != GRID_POINTS:
            raise ValueError("grid feature rows must match grid points")


def roi_grid_pool(
    roi: Box3D,
    keypoint_positions: np.ndarray,
    keypoint_features: np.ndarray,
    radii: tuple[float, float],
    cap: int,
    branch_mlps: list[nn.MlpParams],
    pool_mlp: nn.MlpParams,
    seed: int = 0,
) -> RoiGrid:
    """Aggregate weighted keypoint features onto a proposal's grid points.

    Each grid point runs set abstraction over the keypoints inside each of
    the two radii (receptive fields extend beyond the RoI boundary); the two
    branch outputs are concatenated per grid point, all 216 grid features
    are vectorized, and a two-layer MLP maps them to the pooled RoI feature.
    """
    kp = np.asarray(keypoint_positions, dtype=float).reshape(-1, 3)
    feats = np.asarray(keypoint_features, dtype=float)
    grid = geom.roi_grid_points(roi, GRID_RESOLUTION)
    blocks = []
    for r, radius in enumerate(radii):
        neigh = radius_query(grid, kp, radius, cap, seed=seed + r)
        blocks.append(_aggregate_branch(grid, neigh, kp, feats, branch_mlps[r]))
    grid_features = np.concatenate(blocks, axis=1)
    roi_feature = nn.mlp_forward(pool_mlp, grid_features.reshape(-1))
    return RoiGrid(roi, grid, grid_features, roi_feature)


def average_pool_roi(
    roi: Box3D, keypoint_positions: np.ndarray, keypoint_features: np.ndarray
) -> np.ndarray:
    """Baseline pooling: mean of the keypoint features inside the proposal
    box (zero vector when it contains no keypoint). Output width equals the
    keypoint feature width."""
    kp = np.asarray(keypoint_positions, dtype=float).reshape(-1, 3)
    feats = np.asarray(keypoint_features, dtype=float)
    if kp.shape[0] == 0:
        return np.zeros(feats.shape[1] if feats.ndim == 2 else 0)
    inside = geom.points_in_box(kp, roi)
    if not inside.any():
        return np.zeros(feats.shape[1])
    return feats[inside].mean(axis=0)


def confidence_target(iou):
    """Quality-aware confidence target: min(1, max(0, 2*iou - 0.5))."""
    return np.minimum(1.0, np.maximum(0.0, 2.0 * np.asarray(iou, dtype=float) - 0.5))


def iou_bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Binary cross-entropy against soft confidence targets, averaged over
    the sampled RoIs. Predictions are clamped away from {0, 1}."""
    p = np.clip(np.asarray(pred, dtype=float), rpn.PROB_EPS, 1.0 - rpn.PROB_EPS)
    y = np.asarray(target, dtype=float)
    if p.size == 0:
        return 0.0
    per = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return float(per.mean())


def iou_bce_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d iou_bce_loss / d pred (zero where the clamp is active)."""
    raw = np.asarray(pred, dtype=float)
    p = np.clip(raw, rpn.PROB_EPS, 1.0 - rpn.PROB_EPS)
    y = np.asarray(target, dtype=float)
    if p.size == 0:
        return np.zeros_like(p)
    g = (-y / p + (1.0 - y) / (1.0 - p)) / p.size
    return np.where((raw > rpn.PROB_EPS) & (raw < 1.0 - rpn.PROB_EPS), g, 0.0)


@dataclass(frozen=True)
class RefineTargets:
    """Per-sampled-RoI training targets."""

    y: np.ndarray  # (S,) confidence targets in [0, 1]
    residuals: np.ndarray  # (S, 7), valid rows only where positive
    positive: np.ndarray  # (S,) bool
    matched_gt: np.ndarray  # (S,) gt index, -1 where no overlap


def sample_proposals(
    proposals: list[Detection],
    gt: list[Box3D],
    seed: int,
    n_sample: int = 128,
    pos_iou: float = 0.55,
):
    """Sample RoIs for refinement training at a 1:1 positive:negative ratio.

    A proposal is positive when its best 3D IoU with the ground truth
    reaches pos_iou; positives carry residuals of their best gt encoded
    against the proposal box. Confidence targets follow the piecewise
    linear IoU mapping for every sampled RoI. When one side has fewer than
    n_sample/2 candidates the other side fills the remainder.

    Returns:
        (sampled_proposals, RefineTargets); empty when there are no proposals.
    """
    if not proposals:
        return [], RefineTargets(
            np.empty(0), np.empty((0, 7)), np.empty(0, dtype=bool),
            np.empty(0, dtype=np.int64),
        )
    n_prop = len(proposals)
    best_iou = np.zeros(n_prop)
    best_gt = np.full(n_prop, -1, dtype=np.int64)
    centers = np.array([(d.box.cx, d.box.cy) for d in proposals])
    reach = np.array([0.5 * np.hypot(d.box.l, d.box.w) for d in proposals])
    for g, box in enumerate(gt):
        r = reach + 0.5 * np.hypot(box.l, box.w)
        near = ((centers[:, 0] - box.cx) ** 2
                + (centers[:, 1] - box.cy) ** 2) <= r * r
        for i in np.flatnonzero(near):
            iou = geom.iou_3d(proposals[i].box, box)
            if iou > best_iou[i]:
                best_iou[i] = iou
                best_gt[i] = g

    pos_idx = np.flatnonzero(best_iou >= pos_iou)
    neg_idx = np.flatnonzero(best_iou < pos_iou)
    rng = np.random.default_rng(seed)
    half = n_sample // 2
    take_pos = min(half, pos_idx.size)
    take_neg = min(n_sample - take_pos, neg_idx.size)
    take_pos = min(n_sample - take_neg, pos_idx.size)  # short side fills over
    chosen_pos = rng.choice(pos_idx, size=take_pos, replace=False) if take_pos else np.empty(0, np.int64)
    chosen_neg = rng.choice(neg_idx, size=take_neg, replace=False) if take_neg else np.empty(0, np.int64)
    chosen = np.concatenate([np.sort(chosen_pos), np.sort(chosen_neg)]).astype(np.int64)

    sampled = [proposals[i] for i in chosen]
    y = confidence_target(best_iou[chosen])
    positive = best_iou[chosen] >= pos_iou
    matched = best_gt[chosen]
    residuals = np.zeros((len(chosen), 7))
    for s, i in enumerate(chosen):
        if positive[s]:
            residuals[s] = rpn.encode_residual(gt[best_gt[i]], proposals[i].box)
    return sampled, RefineTargets(y, residuals, positive, matched)


@dataclass
class RefineHead:
    """Shared trunk plus confidence and box-refinement branches."""

    shared: nn.MlpParams  # identity output
    confidence: nn.MlpParams  # sigmoid output, width 1
    regression: nn.MlpParams  # identity output, width 7

    def __post_init__(self):
        if self.confidence.out_width != 1 or self.confidence.out_activation != "sigmoid":
            raise nn.ShapeError("confidence branch must be sigmoid with width 1")
        if self.regression.out_width != 7:
            raise nn.ShapeError("regression branch must output 7 residuals")

    def copy(self) -> "RefineHead":
        return RefineHead(self.shared.copy(), self.confidence.copy(),
                          self.regression.copy())


def refine(roi_feature: np.ndarray, roi: Box3D, head: RefineHead):
    """Predict a confidence and a box residual for one RoI.

    Returns:
        (confidence, residual_7, refined_box) where the refined box is the
        residual decoded against the RoI.
    """
    trunk = nn.mlp_forward(head.shared, np.asarray(roi_feature, dtype=float))
    conf = float(nn.mlp_forward(head.confidence, trunk)[0])
    residual = nn.mlp_forward(head.regression, trunk)
    return conf, residual, rpn.decode_residual(residual, roi)


def rcnn_loss(
    confidences: np.ndarray, residual_preds: np.ndarray, targets: RefineTargets
):
    """Confidence BCE plus smooth-L1 box loss over positives, equal weight.

    Returns:
        (total, components) with 'iou' and 'reg' entries.
    """
    iou_term = iou_bce_loss(confidences, targets.y)
    pos = targets.positive
    reg_term = rpn.smooth_l1(
        np.asarray(residual_preds, dtype=float)[pos], targets.residuals[pos]
    )
    return iou_term + reg_term, {"iou": iou_term, "reg": reg_term}


def final_select(
    detections: list[Detection], nms_iou: float = 0.01, iou_kind: str = "3d"
) -> list[Detection]:
    """Greedy NMS over refined detections to drop near-duplicates."""
    keep = geom.nms(detections, nms_iou, iou_kind=iou_kind)
    return [detections[i] for i in keep]
