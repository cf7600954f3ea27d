"""Keypoint sampling and voxel set abstraction.

Farthest point sampling picks scene keypoints; set abstraction aggregates
neighboring voxel / point features through a small MLP followed by a
channel-wise max. Multi-level aggregation concatenates per-(level, radius)
branches, then raw-point and BEV features; predicted keypoint weighting
rescales each keypoint row by a learned foreground score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, nn, rpn
from .geom import Box3D
from .sparsegrid import BevMap, SparseTensor, bilinear_sample, voxel_centers


@dataclass(frozen=True)
class RadiiConfig:
    """Neighborhood radii (meters) and per-query neighbor caps."""

    level_radii: tuple[tuple[float, float], ...] = (
        (0.4, 0.8), (0.8, 1.2), (1.2, 2.4), (2.4, 4.8),
    )
    level_caps: tuple[int, ...] = (16, 16, 32, 32)
    raw_radii: tuple[float, float] = (0.4, 0.8)
    raw_cap: int = 16
    grid_radii: tuple[float, float] = (0.8, 1.6)
    grid_cap: int = 32

    def __post_init__(self):
        for pair in (*self.level_radii, self.raw_radii, self.grid_radii):
            if pair[0] <= 0 or pair[1] <= pair[0]:
                raise ValueError(f"radius pair {pair} must be positive, increasing")
        if len(self.level_radii) != len(self.level_caps):
            raise ValueError("level radii / caps length mismatch")


def fps(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Repeatedly selects the point maximizing distance to the selected set,
    starting at start_index, breaking ties by lowest index. When the cloud
    has fewer than n points the selected order repeats cyclically.

    Args:
        points: (N, 3) positions, N >= 1.
        n: number of indices to return.

    Returns:
        (n,) int array of indices into points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    num = pts.shape[0]
    if num == 0:
        raise ValueError("fps requires at least one point")
    distinct = min(n, num)
    sel = np.empty(distinct, dtype=np.int64)
    sel[0] = start_index
    best = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for s in range(1, distinct):
        nxt = int(np.argmax(best))  # argmax takes the lowest index on ties
        sel[s] = nxt
        np.minimum(best, ((pts - pts[nxt]) ** 2).sum(axis=1), out=best)
    if n <= distinct:
        return sel[:n]
    reps = np.arange(n) % distinct
    return sel[reps]


def _query_rng(seed, query_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(query_index)])


def radius_query(
    queries: np.ndarray,
    points: np.ndarray,
    radius: float,
    cap: int,
    seed: int,
    method: str = "auto",
) -> list[np.ndarray]:
    """Neighbors of each query strictly within a radius, capped by subsampling.

    Distances are compared as squared distance < radius**2. Pre-cap results
    are identical between the brute-force and the uniform-grid-accelerated
    path (both return ascending point indices); when a query has more than
    `cap` neighbors a seeded uniform subsample of exactly `cap` is kept.

    Args:
        queries: (M, 3).
        points: (N, 3).
        radius: meters, > 0.
        cap: max neighbors per query.
        seed: base seed; each query uses an independent stream.
        method: 'brute', 'grid' or 'auto'.

    Returns:
        List of M int arrays of neighbor indices (ascending).
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    q = np.asarray(queries, dtype=float).reshape(-1, 3)
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    m, num = q.shape[0], p.shape[0]
    if num == 0 or m == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(m)]
    if method == "auto":
        method = "grid" if m * num > 2_000_000 else "brute"

    r2 = radius * radius
    raw: list[np.ndarray]
    if method == "brute":
        raw = []
        chunk = max(1, 2_000_000 // max(num, 1))
        for s in range(0, m, chunk):
            d2 = ((q[s : s + chunk, None, :] - p[None, :, :]) ** 2).sum(axis=2)
            mask = d2 < r2
            counts = mask.sum(axis=1)
            cols = np.nonzero(mask)[1].astype(np.int64)
            raw.extend(np.split(cols, np.cumsum(counts)[:-1]))
    elif method == "grid":
        cell = np.floor(p / radius).astype(np.int64)
        buckets: dict[tuple, list[int]] = {}
        for i, key in enumerate(map(tuple, cell)):
            buckets.setdefault(key, []).append(i)
        qcell = np.floor(q / radius).astype(np.int64)
        raw = []
        for qi in range(m):
            ci, cj, ck = qcell[qi]
            cand: list[int] = []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    for dk in (-1, 0, 1):
                        cand.extend(buckets.get((ci + di, cj + dj, ck + dk), ()))
            if not cand:
                raw.append(np.empty(0, dtype=np.int64))
                continue
            idx = np.sort(np.asarray(cand, dtype=np.int64))
            d2 = ((p[idx] - q[qi]) ** 2).sum(axis=1)
            raw.append(idx[d2 < r2])
    else:
        raise ValueError(f"unknown method {method!r}")

    out = []
    for qi, idx in enumerate(raw):
        if idx.size > cap:
            pick = _query_rng(seed, qi).choice(idx.size, size=cap, replace=False)
            idx = idx[np.sort(pick)]
        out.append(idx)
    return out


def set_abstraction(
    center: np.ndarray,
    neighbor_feats: np.ndarray,
    neighbor_positions: np.ndarray,
    mlp: nn.MlpParams,
) -> np.ndarray:
    """Channel-wise max of the MLP applied to [feature; position - center]
    per neighbor. An empty neighborhood yields the zero vector."""
    feats = np.asarray(neighbor_feats, dtype=float)
    pos = np.asarray(neighbor_positions, dtype=float).reshape(-1, 3)
    feats = feats.reshape(pos.shape[0], -1) if feats.size else feats.reshape(0, mlp.in_width - 3)
    if feats.shape[0] == 0:
        return np.zeros(mlp.out_width)
    if feats.shape[1] + 3 != mlp.in_width:
        raise nn.ShapeError(
            f"MLP expects width {mlp.in_width}, got features {feats.shape[1]} + 3"
        )
    rows = np.concatenate([feats, pos - np.asarray(center, dtype=float)], axis=1)
    return nn.mlp_forward(mlp, rows).max(axis=0)


def _aggregate_branch(
    queries: np.ndarray,
    neighbor_lists: list[np.ndarray],
    positions: np.ndarray,
    features: np.ndarray,
    mlp: nn.MlpParams,
) -> np.ndarray:
    """set_abstraction for every query at once (one MLP pass, segment max)."""
    m = queries.shape[0]
    out = np.zeros((m, mlp.out_width))
    lens = np.array([len(nl) for nl in neighbor_lists])
    total = int(lens.sum())
    if total == 0:
        return out
    flat = np.concatenate([nl for nl in neighbor_lists if len(nl)])
    rep = np.repeat(np.arange(m), lens)
    rows = np.concatenate(
        [features[flat].reshape(total, -1), positions[flat] - queries[rep]], axis=1
    )
    vals = nn.mlp_forward(mlp, rows)
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    nonempty = lens > 0
    seg = np.maximum.reduceat(vals, starts[nonempty], axis=0)
    out[nonempty] = seg
    return out


def vsa_multi_level(
    keypoints: np.ndarray,
    level_tensors: list[SparseTensor],
    cfg: RadiiConfig,
    mlps: list[list[nn.MlpParams]],
    seed: int = 0,
) -> np.ndarray:
    """Multi-scale keypoint features from the backbone levels.

    For each level and each of its two radii: query the level's voxel
    centers, aggregate with that branch's MLP, and concatenate everything.

    Args:
        keypoints: (n, 3) positions.
        level_tensors: the four backbone outputs.
        cfg: radii and caps.
        mlps: mlps[k][r] for level k, radius index r.
        seed: base seed for neighbor-cap subsampling.

    Returns:
        (n, sum of branch widths) feature matrix.
    """
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    blocks = []
    for k, tensor in enumerate(level_tensors):
        centers = voxel_centers(tensor)
        for r, radius in enumerate(cfg.level_radii[k]):
            neigh = radius_query(
                kp, centers, radius, cfg.level_caps[k], seed=seed + 1000 * k + r
            )
            blocks.append(
                _aggregate_branch(kp, neigh, centers, tensor.features, mlps[k][r])
            )
    return np.concatenate(blocks, axis=1)


def extended_vsa(
    keypoints: np.ndarray,
    f_pv: np.ndarray,
    raw_points: np.ndarray,
    bev: BevMap,
    cfg: RadiiConfig,
    raw_mlps: list[nn.MlpParams],
    seed: int = 0,
) -> np.ndarray:
    """Concatenate [f_pv, f_raw, f_bev] per keypoint.

    f_raw aggregates raw points (intensity as the single feature channel)
    at the raw radius pair; f_bev bilinearly samples the BEV map at the
    keypoint's ground-plane position.
    """
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    raw = np.asarray(raw_points, dtype=float).reshape(-1, 4)
    blocks = [np.asarray(f_pv, dtype=float)]
    for r, radius in enumerate(cfg.raw_radii):
        neigh = radius_query(kp, raw[:, :3], radius, cfg.raw_cap, seed=seed + 7000 + r)
        blocks.append(
            _aggregate_branch(kp, neigh, raw[:, :3], raw[:, 3:4], raw_mlps[r])
        )
    blocks.append(bilinear_sample(bev, kp[:, :2]))
    return np.concatenate(blocks, axis=1)


def keypoint_labels(positions: np.ndarray, gt_boxes: list[Box3D]) -> np.ndarray:
    """1 where a keypoint lies inside any ground-truth box, else 0."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    labels = np.zeros(pos.shape[0], dtype=np.int64)
    for box in gt_boxes:
        labels |= geom.points_in_box(pos, box).astype(np.int64)
    return labels


def pkw(
    positions: np.ndarray,
    f_p: np.ndarray,
    gt_boxes: list[Box3D],
    mlp: nn.MlpParams,
):
    """Predicted keypoint weighting.

    Scores each keypoint's foreground confidence with a sigmoid MLP and
    multiplies its feature row by the score. Labels come from containment
    in any ground-truth box (used for the segmentation loss).

    Returns:
        (weighted_features, scores, labels).
    """
    if mlp.out_width != 1 or mlp.out_activation != "sigmoid":
        raise nn.ShapeError("weighting MLP must have sigmoid output of width 1")
    feats = np.asarray(f_p, dtype=float)
    scores = nn.mlp_forward(mlp, feats)[:, 0]
    weighted = scores[:, None] * feats
    return weighted, scores, keypoint_labels(positions, gt_boxes)


def seg_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Focal segmentation loss over keypoints, normalized by positive count."""
    return rpn.focal_loss(scores, labels)


@dataclass
class KeypointSet:
    """Sampled keypoints with their per-source and combined features."""

    positions: np.ndarray  # (n, 3)
    indices: np.ndarray  # (n,) into the raw cloud
    f_pv: np.ndarray  # multi-level voxel features
    f_p: np.ndarray  # [f_pv, f_raw, f_bev]
    weighted: np.ndarray  # scores[:, None] * f_p
    scores: np.ndarray  # (n,) in (0, 1)
    labels: np.ndarray  # (n,) in {0, 1}

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_width(self) -> int:
        return self.f_p.shape[1]
