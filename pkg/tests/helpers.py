"""Independent oracles shared by the test suite.

Each oracle recomputes a result by a different algorithm than the library
path it checks (sampling for areas, dense convolution for sparse, full
recomputation for incremental FPS).
"""

from __future__ import annotations

import math

import numpy as np

from pvlite.geom import Box3D


def mc_bev_iou(a: Box3D, b: Box3D, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo BEV IoU: one jittered uniform sample per cell of a grid
    laid over the bounding region of both footprints.

    The union area uses the exact rectangle areas, so only the intersection
    is estimated.
    """
    corners = np.concatenate([a.corners_bev(), b.corners_bev()], axis=0)
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    span = hi - lo
    side = int(round(math.sqrt(n_samples)))
    rng = np.random.default_rng(seed)
    jitter = rng.random((side * side, 2))
    cell = span / side
    gx, gy = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    base = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts = lo + (base + jitter) * cell

    def inside(box: Box3D) -> np.ndarray:
        dx = pts[:, 0] - box.cx
        dy = pts[:, 1] - box.cy
        c, s = math.cos(box.theta), math.sin(box.theta)
        qx = c * dx + s * dy
        qy = -s * dx + c * dy
        return (np.abs(qx) <= box.l / 2) & (np.abs(qy) <= box.w / 2)

    frac = (inside(a) & inside(b)).mean()
    inter = frac * span[0] * span[1]
    union = a.bev_area + b.bev_area - inter
    return float(inter / union) if union > 0 else 0.0


def mc_volume_iou(a: Box3D, b: Box3D, n_samples: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo 3D IoU over the joint bounding volume."""
    def bounds(box):
        c2 = box.corners_bev()
        return (
            np.array([c2[:, 0].min(), c2[:, 1].min(), box.z_min]),
            np.array([c2[:, 0].max(), c2[:, 1].max(), box.z_max]),
        )

    lo_a, hi_a = bounds(a)
    lo_b, hi_b = bounds(b)
    lo = np.minimum(lo_a, lo_b)
    hi = np.maximum(hi_a, hi_b)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))

    def inside(box):
        dx = pts[:, 0] - box.cx
        dy = pts[:, 1] - box.cy
        dz = pts[:, 2] - box.cz
        c, s = math.cos(box.theta), math.sin(box.theta)
        qx = c * dx + s * dy
        qy = -s * dx + c * dy
        return (
            (np.abs(qx) <= box.l / 2)
            & (np.abs(qy) <= box.w / 2)
            & (np.abs(dz) <= box.h / 2)
        )

    vol = float(np.prod(hi - lo))
    inter = (inside(a) & inside(b)).mean() * vol
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0


def dense_conv3d(
    grid: np.ndarray, weights: np.ndarray, stride: int = 1
) -> np.ndarray:
    """Dense 3D convolution with a 3x3x3 kernel and zero padding of one.

    Args:
        grid: (nx, ny, nz, cin) dense input.
        weights: (3, 3, 3, cin, cout).
        stride: 1 or 2.

    Returns:
        (ox, oy, oz, cout) with o = ceil(n / stride).
    """
    nx, ny, nz, cin = grid.shape
    cout = weights.shape[4]
    padded = np.zeros((nx + 2, ny + 2, nz + 2, cin))
    padded[1:-1, 1:-1, 1:-1] = grid
    ox, oy, oz = (-(-n // stride) for n in (nx, ny, nz))
    out = np.zeros((ox, oy, oz, cout))
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                sl = padded[
                    kx : kx + stride * (ox - 1) + 1 : stride,
                    ky : ky + stride * (oy - 1) + 1 : stride,
                    kz : kz + stride * (oz - 1) + 1 : stride,
                ]
                out += sl @ weights[kx, ky, kz]
    return out


def sparse_to_dense(t) -> np.ndarray:
    """Expand a SparseTensor into its dense zero-filled grid."""
    dense = np.zeros((*t.grid_shape, t.feature_width))
    if t.num_voxels:
        c = t.coords
        dense[c[:, 0], c[:, 1], c[:, 2]] = t.features
    return dense


def fps_bruteforce(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling recomputing all distances each step."""
    pts = np.asarray(points, dtype=float)
    num = pts.shape[0]
    distinct = min(n, num)
    sel = [start_index]
    for _ in range(1, distinct):
        best_d = np.full(num, np.inf)
        for s in sel:
            best_d = np.minimum(best_d, ((pts - pts[s]) ** 2).sum(axis=1))
        sel.append(int(np.argmax(best_d)))
    return np.array([sel[i % distinct] for i in range(n)], dtype=np.int64)


def random_box(rng: np.random.Generator, center_span: float = 10.0) -> Box3D:
    """A random well-formed box for property tests."""
    return Box3D(
        cx=float(rng.uniform(-center_span, center_span)),
        cy=float(rng.uniform(-center_span, center_span)),
        cz=float(rng.uniform(-2.0, 2.0)),
        l=float(rng.uniform(0.5, 6.0)),
        w=float(rng.uniform(0.5, 4.0)),
        h=float(rng.uniform(0.5, 3.0)),
        theta=float(rng.uniform(-math.pi, math.pi)),
    )


def overlapping_box_pair(rng: np.random.Generator):
    """Two random boxes with nearby centers (usually overlapping)."""
    a = random_box(rng, center_span=3.0)
    b = Box3D(
        cx=a.cx + float(rng.uniform(-2.5, 2.5)),
        cy=a.cy + float(rng.uniform(-2.5, 2.5)),
        cz=a.cz + float(rng.uniform(-1.0, 1.0)),
        l=float(rng.uniform(0.5, 6.0)),
        w=float(rng.uniform(0.5, 4.0)),
        h=float(rng.uniform(0.5, 3.0)),
        theta=float(rng.uniform(-math.pi, math.pi)),
    )
    return a, b
