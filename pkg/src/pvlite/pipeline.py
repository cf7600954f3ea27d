"""End-to-end glue: model parameter bundles, the per-scene forward pass,
head-only training loops, and the pooling benchmark.

Backbone and aggregation weights are fixed random (seed-derived) and never
trained; only the keypoint-weighting and refinement heads have training
loops. Every stage is deterministic given (scene, config, seed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geom, nn, roihead, rpn, vsa
from .config import Config
from .geom import Box3D, Detection
from .roihead import RefineHead, RefineTargets
from .rpn import AnchorSet, BevGrid
from .sparsegrid import (
    BackboneParams, BevMap, SparseTensor, bev_collapse, grid_shape_for,
    init_backbone, run_backbone, voxelize,
)
from .synth import SceneSample
from .vsa import KeypointSet, RadiiConfig

POINT_FEATURES = 4  # x, y, z, intensity


def level_grid_shapes(cfg: Config) -> list[tuple[int, int, int]]:
    """Grid shapes of the four backbone levels (each level halves, rounding up)."""
    shape = grid_shape_for(cfg.range_min, cfg.range_max, cfg.voxel_size)
    shapes = [shape]
    for _ in range(3):
        shape = tuple(-(-s // 2) for s in shape)
        shapes.append(shape)
    return shapes


def bev_channels(cfg: Config) -> int:
    return level_grid_shapes(cfg)[3][2] * cfg.backbone_widths[3]


def keypoint_feature_width(cfg: Config) -> int:
    pv = 2 * len(cfg.vsa_radii) * cfg.vsa_branch_width
    raw = 2 * cfg.raw_branch_width
    return pv + raw + bev_channels(cfg)


def radii_config(cfg: Config) -> RadiiConfig:
    return RadiiConfig(
        level_radii=cfg.vsa_radii,
        level_caps=cfg.vsa_caps,
        raw_radii=cfg.raw_radii,
        raw_cap=cfg.raw_cap,
        grid_radii=cfg.grid_radii,
        grid_cap=cfg.grid_cap,
    )


def bev_grid(cfg: Config) -> BevGrid:
    nx, ny, _ = level_grid_shapes(cfg)[3]
    return BevGrid(
        origin=(cfg.range_min[0], cfg.range_min[1]),
        cell_size=(cfg.voxel_size[0] * 8, cfg.voxel_size[1] * 8),
        nx=nx,
        ny=ny,
    )


@dataclass
class ModelParams:
    """All network parameters of the pipeline."""

    backbone: BackboneParams
    rpn_head: nn.MlpParams
    vsa_mlps: list[list[nn.MlpParams]]
    raw_mlps: list[nn.MlpParams]
    pkw: nn.MlpParams
    grid_mlps: list[nn.MlpParams]
    pool_mlp: nn.MlpParams
    refine: RefineHead


# Final-layer damping for the proposal head: keeps untrained residual
# predictions near zero so initial proposals stay close to their anchors.
RPN_HEAD_OUT_SCALE = 0.01


def build_model(cfg: Config, seed: int) -> ModelParams:
    """Deterministic seed-derived parameters sized from the config."""
    widths = cfg.backbone_widths
    backbone = init_backbone(POINT_FEATURES, widths, seed=[seed, 0])
    per_cell = 2 * len(cfg.classes)
    rpn_head = nn.init_params(
        (bev_channels(cfg), cfg.rpn_hidden, per_cell * 8), seed=[seed, 1]
    )
    rpn_head.weights[-1] *= RPN_HEAD_OUT_SCALE
    rpn_head.biases[-1] *= RPN_HEAD_OUT_SCALE
    vsa_mlps = [
        [
            nn.init_params(
                (widths[k] + 3, cfg.vsa_branch_width, cfg.vsa_branch_width),
                seed=[seed, 2, k, r],
            )
            for r in range(2)
        ]
        for k in range(4)
    ]
    raw_mlps = [
        nn.init_params((1 + 3, cfg.raw_branch_width, cfg.raw_branch_width),
                       seed=[seed, 3, r])
        for r in range(2)
    ]
    d = keypoint_feature_width(cfg)
    pkw = nn.init_params((d, *cfg.pkw_hidden, 1), seed=[seed, 4],
                         out_activation="sigmoid")
    grid_mlps = [
        nn.init_params((d + 3, cfg.grid_branch_width, cfg.grid_branch_width),
                       seed=[seed, 5, r])
        for r in range(2)
    ]
    pool_in = roihead.GRID_POINTS * 2 * cfg.grid_branch_width
    pool_mlp = nn.init_params(
        (pool_in, cfg.roi_feature_width, cfg.roi_feature_width), seed=[seed, 6]
    )
    refine = RefineHead(
        shared=nn.init_params(
            (cfg.roi_feature_width, cfg.refine_hidden, cfg.refine_hidden),
            seed=[seed, 7],
        ),
        confidence=nn.init_params((cfg.refine_hidden, 1), seed=[seed, 8],
                                  out_activation="sigmoid"),
        regression=nn.init_params((cfg.refine_hidden, 7), seed=[seed, 9]),
    )
    return ModelParams(backbone, rpn_head, vsa_mlps, raw_mlps, pkw, grid_mlps,
                       pool_mlp, refine)


# Parameter-file section names understood by apply_param_sections.
PARAM_ROLES = ("pkw", "refine_shared", "refine_confidence", "refine_regression")


def apply_param_sections(model: ModelParams, sections: dict[str, nn.MlpParams]) -> None:
    """Replace trainable heads with loaded sections (dims must match)."""
    for name, params in sections.items():
        if name == "pkw":
            if params.layer_dims != model.pkw.layer_dims:
                raise nn.ShapeError(
                    f"pkw dims {params.layer_dims} != model {model.pkw.layer_dims}"
                )
            model.pkw = params
        elif name == "refine_shared":
            model.refine.shared = params
        elif name == "refine_confidence":
            model.refine.confidence = params
        elif name == "refine_regression":
            model.refine.regression = params
        else:
            raise nn.ParamFileError(f"unknown parameter section {name!r}")
    # Re-validate branch contracts after replacement.
    RefineHead(model.refine.shared, model.refine.confidence, model.refine.regression)


def rpn_head_outputs(model: ModelParams, bev: BevMap, num_classes: int):
    """Per-anchor classification probabilities and residual predictions."""
    cells = bev.values.reshape(-1, bev.channels)
    out = nn.mlp_forward(model.rpn_head, cells)
    per_cell = 2 * num_classes
    logits = out[:, :per_cell]
    res = out[:, per_cell:].reshape(-1, per_cell, 7)
    cls_probs = nn.sigmoid(logits).reshape(-1)
    reg = res.reshape(-1, 7)
    return cls_probs, reg


def build_keypoints(
    scene: SceneSample,
    tensors: list[SparseTensor],
    bev: BevMap,
    cfg: Config,
    model: ModelParams,
    seed: int,
) -> KeypointSet:
    """Sample keypoints by FPS and attach multi-source features plus
    foreground weighting."""
    pts = scene.points_f64()
    rc = radii_config(cfg)
    idx = vsa.fps(pts[:, :3], cfg.num_keypoints)
    positions = pts[idx, :3]
    f_pv = vsa.vsa_multi_level(positions, tensors, rc, model.vsa_mlps, seed=seed)
    f_p = vsa.extended_vsa(positions, f_pv, pts, bev, rc, model.raw_mlps, seed=seed)
    weighted, scores, labels = vsa.pkw(positions, f_p, list(scene.gt_boxes),
                                       model.pkw)
    return KeypointSet(positions, idx, f_pv, f_p, weighted, scores, labels)


@dataclass
class PipelineResult:
    """Everything a command might need from one scene's forward pass."""

    detections: list[Detection]
    proposals: list[Detection]
    keypoints: KeypointSet | None
    tensors: list[SparseTensor]
    bev: BevMap | None
    timings: dict[str, float] = field(default_factory=dict)


def run_scene(
    scene: SceneSample, model: ModelParams, cfg: Config, anchors: AnchorSet,
    seed: int,
) -> PipelineResult:
    """Full forward pipeline on one scene.

    A scene with no in-range points yields empty outputs at every stage.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    level1 = voxelize(scene.points_f64(), cfg.range_min, cfg.range_max,
                      cfg.voxel_size)
    timings["voxelize"] = time.perf_counter() - t0
    if level1.num_voxels == 0:
        return PipelineResult([], [], None, [], None, timings)

    t0 = time.perf_counter()
    tensors = run_backbone(level1, model.backbone)
    timings["backbone"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bev = bev_collapse(tensors[3])
    cls_probs, reg = rpn_head_outputs(model, bev, len(cfg.classes))
    proposals = rpn.extract_proposals(
        cls_probs, reg, anchors, top_k=cfg.top_proposals,
        nms_iou=cfg.proposal_nms_iou,
    )
    timings["rpn"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    keypoints = build_keypoints(scene, tensors, bev, cfg, model, seed)
    timings["keypoints"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    detections = []
    for p_idx, prop in enumerate(proposals):
        grid = roihead.roi_grid_pool(
            prop.box, keypoints.positions, keypoints.weighted,
            cfg.grid_radii, cfg.grid_cap, model.grid_mlps, model.pool_mlp,
            seed=seed + 31 * p_idx,
        )
        conf, _res, refined = roihead.refine(grid.roi_feature, prop.box,
                                             model.refine)
        detections.append(Detection(refined, conf, prop.class_id))
    detections = roihead.final_select(detections, nms_iou=cfg.final_nms_iou)
    timings["refine"] = time.perf_counter() - t0
    return PipelineResult(detections, proposals, keypoints, tensors, bev, timings)


# ---------------------------------------------------------------------------
# Head-only training
# ---------------------------------------------------------------------------

def _sgd_step(params: nn.MlpParams, w_grads, b_grads, lr: float) -> None:
    for w, b, gw, gb in zip(params.weights, params.biases, w_grads, b_grads):
        w -= lr * gw
        b -= lr * gb


@dataclass
class PkwBatch:
    """Cached keypoint features and segmentation labels."""

    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,)


def build_pkw_batch(cfg: Config, model: ModelParams, scenes: list[SceneSample],
                    seed: int) -> PkwBatch:
    feats, labels = [], []
    for s_idx, scene in enumerate(scenes):
        level1 = voxelize(scene.points_f64(), cfg.range_min, cfg.range_max,
                          cfg.voxel_size)
        tensors = run_backbone(level1, model.backbone)
        bev = bev_collapse(tensors[3])
        kp = build_keypoints(scene, tensors, bev, cfg, model, seed + 101 * s_idx)
        feats.append(kp.f_p)
        labels.append(kp.labels)
    return PkwBatch(np.concatenate(feats, axis=0), np.concatenate(labels))


def train_pkw(
    head: nn.MlpParams, batch: PkwBatch, iters: int, lr: float
):
    """Full-batch SGD on the focal segmentation loss.

    Returns:
        (trained_params, per-iteration losses, final accuracy at 0.5).
    """
    params = head.copy()
    losses = []
    for _ in range(iters):
        scores = nn.mlp_forward(params, batch.features)[:, 0]
        losses.append(vsa.seg_loss(scores, batch.labels))
        up = rpn.focal_loss_grad(scores, batch.labels)[:, None]
        w_g, b_g, _ = nn.mlp_backward(params, batch.features, up)
        _sgd_step(params, w_g, b_g, lr)
    scores = nn.mlp_forward(params, batch.features)[:, 0]
    acc = float(((scores > 0.5).astype(int) == batch.labels).mean())
    return params, losses, acc


@dataclass
class RefineBatch:
    """Cached pooled RoI features with refinement targets."""

    features: np.ndarray  # (S, roi_feature_width)
    rois: list[Box3D]
    targets: RefineTargets
    matched_boxes: list[Box3D | None]


def training_proposals(
    model: ModelParams, cfg: Config, anchors: AnchorSet, bev: BevMap
) -> list[Detection]:
    """Every anchor decoded through the regression head, scored by the
    classification head (no NMS / truncation: the score ranking is untrained
    at desk scale, so refinement training samples from the full decoded set)."""
    cls_probs, reg = rpn_head_outputs(model, bev, len(cfg.classes))
    decoded = rpn.decode_residuals(reg, anchors.boxes)
    return [
        Detection(geom.box_from_array(decoded[i]), float(cls_probs[i]),
                  int(anchors.class_ids[i]))
        for i in range(len(anchors))
    ]


def build_refine_batch(
    cfg: Config, model: ModelParams, scenes: list[SceneSample],
    anchors: AnchorSet, seed: int,
) -> RefineBatch:
    feats, rois, matched = [], [], []
    ys, residuals, positives, matched_idx = [], [], [], []
    for s_idx, scene in enumerate(scenes):
        level1 = voxelize(scene.points_f64(), cfg.range_min, cfg.range_max,
                          cfg.voxel_size)
        tensors = run_backbone(level1, model.backbone)
        bev = bev_collapse(tensors[3])
        kp = build_keypoints(scene, tensors, bev, cfg, model, seed + 101 * s_idx)
        props = training_proposals(model, cfg, anchors, bev)
        sampled, targets = roihead.sample_proposals(
            props, list(scene.gt_boxes), seed + 977 * s_idx,
            n_sample=cfg.roi_samples, pos_iou=cfg.roi_pos_iou,
        )
        for k, det in enumerate(sampled):
            grid = roihead.roi_grid_pool(
                det.box, kp.positions, kp.weighted, cfg.grid_radii,
                cfg.grid_cap, model.grid_mlps, model.pool_mlp,
                seed=seed + 31 * k + 7919 * s_idx,
            )
            feats.append(grid.roi_feature)
            rois.append(det.box)
            g = targets.matched_gt[k]
            matched.append(scene.gt_boxes[g] if g >= 0 else None)
        ys.append(targets.y)
        residuals.append(targets.residuals)
        positives.append(targets.positive)
        matched_idx.append(targets.matched_gt)
    combined = RefineTargets(
        np.concatenate(ys) if ys else np.empty(0),
        np.concatenate(residuals) if residuals else np.empty((0, 7)),
        np.concatenate(positives) if positives else np.empty(0, dtype=bool),
        np.concatenate(matched_idx) if matched_idx else np.empty(0, dtype=np.int64),
    )
    features = np.stack(feats) if feats else np.empty((0, cfg.roi_feature_width))
    return RefineBatch(features, rois, combined, matched)


def refine_forward(head: RefineHead, features: np.ndarray):
    """Batched head forward: (confidences (S,), residuals (S, 7), trunk)."""
    trunk = nn.mlp_forward(head.shared, features)
    conf = nn.mlp_forward(head.confidence, trunk)[:, 0]
    res = nn.mlp_forward(head.regression, trunk)
    return conf, res, trunk


def train_refine(head: RefineHead, batch: RefineBatch, iters: int, lr: float):
    """Full-batch SGD on the confidence + box refinement loss.

    Returns:
        (trained_head, per-iteration losses).
    """
    h = head.copy()
    losses = []
    pos = batch.targets.positive
    for _ in range(iters):
        conf, res, trunk = refine_forward(h, batch.features)
        total, _parts = roihead.rcnn_loss(conf, res, batch.targets)
        losses.append(total)

        up_conf = roihead.iou_bce_grad(conf, batch.targets.y)[:, None]
        cw, cb, d_trunk_conf = nn.mlp_backward(h.confidence, trunk, up_conf)
        up_res = np.zeros_like(res)
        if pos.any():
            up_res[pos] = rpn.smooth_l1_grad(res[pos],
                                             batch.targets.residuals[pos])
        rw, rb, d_trunk_res = nn.mlp_backward(h.regression, trunk, up_res)
        sw, sb, _ = nn.mlp_backward(h.shared, batch.features,
                                    d_trunk_conf + d_trunk_res)
        _sgd_step(h.confidence, cw, cb, lr)
        _sgd_step(h.regression, rw, rb, lr)
        _sgd_step(h.shared, sw, sb, lr)
    return h, losses


def matched_iou_stats(head: RefineHead, batch: RefineBatch):
    """Mean 3D IoU against the matched gt for raw vs refined positive RoIs.

    Returns:
        (mean_raw, mean_refined); (nan, nan) when there are no positives.
    """
    pos = np.flatnonzero(batch.targets.positive)
    if pos.size == 0:
        return float("nan"), float("nan")
    conf, res, _ = refine_forward(head, batch.features)
    raw, refined = [], []
    for i in pos:
        gt = batch.matched_boxes[i]
        roi = batch.rois[i]
        raw.append(geom.iou_3d(roi, gt))
        refined_box = rpn.decode_residual(res[i], roi)
        refined.append(geom.iou_3d(refined_box, gt))
    return float(np.mean(raw)), float(np.mean(refined))


# ---------------------------------------------------------------------------
# Pooling benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    strategy: str
    rois: int
    wall_time: float  # excluded from determinism guarantees
    peak_alloc_bytes: int  # analytic estimate of the largest transient
    nonzero_fraction: float
    feature_width: int


def bench_pooling(
    cfg: Config, model: ModelParams, keypoints: KeypointSet,
    proposals: list[Detection], strategy: str, seed: int,
) -> BenchReport:
    """Run one pooling strategy over all proposals and measure it.

    The roi_grid strategy reports the fraction of (RoI, grid point) rows
    with a nonzero aggregated feature; the averaging baseline reports the
    fraction of RoIs whose pooled vector is nonzero.
    """
    n_kp = keypoints.n
    d = keypoints.feature_width
    t0 = time.perf_counter()
    nonzero = 0
    total = 0
    peak = 0
    if strategy == "roi_grid":
        width = 2 * cfg.grid_branch_width
        for p_idx, prop in enumerate(proposals):
            grid = roihead.roi_grid_pool(
                prop.box, keypoints.positions, keypoints.weighted,
                cfg.grid_radii, cfg.grid_cap, model.grid_mlps, model.pool_mlp,
                seed=seed + 31 * p_idx,
            )
            rows_nonzero = (grid.grid_features != 0.0).any(axis=1)
            nonzero += int(rows_nonzero.sum())
            total += roihead.GRID_POINTS
            neigh = roihead.GRID_POINTS * cfg.grid_cap * len(cfg.grid_radii)
            est = (
                roihead.GRID_POINTS * n_kp * 8 * len(cfg.grid_radii)
                + neigh * (d + 3 + 2 * cfg.grid_branch_width) * 8
                + roihead.GRID_POINTS * width * 8
                + sum(w * 8 for w in model.pool_mlp.layer_dims)
            )
            peak = max(peak, est)
    elif strategy == "average_pool":
        width = d
        for prop in proposals:
            pooled = roihead.average_pool_roi(
                prop.box, keypoints.positions, keypoints.weighted
            )
            nonzero += int((pooled != 0.0).any())
            total += 1
            peak = max(peak, n_kp * 8 + n_kp * d * 8)
    else:
        raise ValueError(f"unknown pooling strategy {strategy!r}")
    wall = time.perf_counter() - t0
    frac = nonzero / total if total else 0.0
    return BenchReport(strategy, len(proposals), wall, peak, frac, width)
