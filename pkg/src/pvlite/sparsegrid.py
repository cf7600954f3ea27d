"""Voxelization, sparse 3x3x3 convolution, a four-level backbone, BEV
collapse and bilinear BEV sampling.

Sparse tensors store active (i, j, k) coordinates plus one feature row per
coordinate, iterated in sorted-coordinate order for determinism. Convolution
is numerically equal to a dense zero-padded convolution restricted to the
active output set; there are no bias terms or normalization layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridConfigError(ValueError):
    """Raised on inconsistent grid / weight configuration."""


@dataclass(frozen=True)
class SparseTensor:
    """Coordinates-plus-features voxel volume at one backbone level."""

    level_index: int
    voxel_size: np.ndarray  # (3,) meters per axis
    origin: np.ndarray  # (3,) meters, range minimum
    grid_shape: tuple[int, int, int]
    coords: np.ndarray  # (N, 3) int64, unique, sorted lexicographically
    features: np.ndarray  # (N, C) float64

    def __post_init__(self):
        vs = np.asarray(self.voxel_size, dtype=float).copy()
        org = np.asarray(self.origin, dtype=float).copy()
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3).copy()
        feats = np.asarray(self.features, dtype=float).copy()
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise GridConfigError(
                f"features rows {feats.shape} must match coords count {coords.shape[0]}"
            )
        shape = tuple(int(s) for s in self.grid_shape)
        if len(shape) != 3 or any(s <= 0 for s in shape):
            raise GridConfigError(f"bad grid shape {shape}")
        if coords.size:
            if coords.min() < 0 or (coords >= np.array(shape)).any():
                raise GridConfigError("coords out of grid bounds")
            order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
            coords = coords[order]
            feats = feats[order]
            if (np.diff(_pack(coords, shape)) == 0).any():
                raise GridConfigError("duplicate coordinates")
        for arr in (vs, org, coords, feats):
            arr.flags.writeable = False
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "grid_shape", shape)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same active set with replaced features (rows aligned with coords)."""
        return SparseTensor(
            self.level_index, self.voxel_size, self.origin, self.grid_shape,
            self.coords, features,
        )


def _pack(coords: np.ndarray, shape) -> np.ndarray:
    """Flatten (i, j, k) into row-major scalar keys (ascending == lexicographic)."""
    if coords.size == 0:
        return np.empty(0, dtype=np.int64)
    return np.ravel_multi_index((coords[:, 0], coords[:, 1], coords[:, 2]), shape)


def grid_shape_for(range_min, range_max, voxel_size) -> tuple[int, int, int]:
    """Number of voxels per axis; the extent must be an integer multiple of
    the voxel size (within 1e-6 of a cell)."""
    shape = []
    for lo, hi, vs in zip(range_min, range_max, voxel_size):
        if vs <= 0:
            raise GridConfigError(f"voxel size must be positive, got {vs}")
        n_exact = (hi - lo) / vs
        n = round(n_exact)
        if n <= 0 or abs(n_exact - n) > 1e-6:
            raise GridConfigError(
                f"range [{lo}, {hi}] is not an integer number of {vs} m voxels"
            )
        shape.append(int(n))
    return tuple(shape)


def voxelize(points, range_min, range_max, voxel_size) -> SparseTensor:
    """Average points into level-1 voxels.

    Points outside the half-open range [min, max) are dropped. Each
    non-empty voxel's feature is the mean of the (x, y, z, intensity)
    rows of its points. Accumulation runs in a canonical sorted order so
    the result is bit-identical under input permutation.

    Args:
        points: (N, 4) array of x, y, z, intensity.
        range_min / range_max: per-axis bounds, meters.
        voxel_size: per-axis voxel edge lengths, meters.

    Returns:
        A level-1 SparseTensor with 4-wide features (possibly empty).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 4)
    lo = np.asarray(range_min, dtype=float)
    hi = np.asarray(range_max, dtype=float)
    vs = np.asarray(voxel_size, dtype=float)
    shape = grid_shape_for(lo, hi, vs)
    inside = ((pts[:, :3] >= lo) & (pts[:, :3] < hi)).all(axis=1)
    pts = pts[inside]
    if pts.shape[0] == 0:
        return SparseTensor(1, vs, lo, shape, np.empty((0, 3), np.int64),
                            np.empty((0, 4)))
    idx = np.floor((pts[:, :3] - lo) / vs).astype(np.int64)
    np.clip(idx, 0, np.array(shape) - 1, out=idx)  # fp guard at cell edges
    flat = _pack(idx, shape)
    # Canonical order: voxel key, then point values, for bit-reproducibility.
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
    flat = flat[order]
    pts = pts[order]
    keys, starts, counts = np.unique(flat, return_index=True, return_counts=True)
    sums = np.add.reduceat(pts, starts, axis=0)
    feats = sums / counts[:, None]
    coords = np.stack(np.unravel_index(keys, shape), axis=1).astype(np.int64)
    return SparseTensor(1, vs, lo, shape, coords, feats)


def _lookup(sorted_keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Row indices of queries in sorted_keys, or -1 where absent."""
    if sorted_keys.size == 0 or queries.size == 0:
        return np.full(queries.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, queries)
    pos_c = np.minimum(pos, sorted_keys.size - 1)
    found = sorted_keys[pos_c] == queries
    return np.where(found, pos_c, -1)


_OFFSETS = np.stack(
    np.meshgrid(np.arange(3), np.arange(3), np.arange(3), indexing="ij"), axis=-1
).reshape(-1, 3)


def sparse_conv(
    inp: SparseTensor, weights: np.ndarray, stride: int = 1, mode: str = "submanifold"
) -> SparseTensor:
    """3x3x3 sparse convolution with zero padding of one voxel.

    Submanifold mode emits outputs only at input-active sites and requires
    stride 1. Strided mode emits outputs at every site whose 3x3x3 input
    window contains at least one active voxel. Either way the values equal
    a dense zero-padded convolution restricted to the active output set.

    Args:
        inp: input tensor.
        weights: (3, 3, 3, Cin, Cout) kernel.
        stride: 1, or 2 in strided mode.
        mode: 'submanifold' or 'strided'.

    Returns:
        Output SparseTensor (level_index bumped when stride is 2).
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 5 or w.shape[:3] != (3, 3, 3):
        raise GridConfigError(f"weights must be (3,3,3,Cin,Cout), got {w.shape}")
    if w.shape[3] != inp.feature_width:
        raise GridConfigError(
            f"kernel Cin {w.shape[3]} != input feature width {inp.feature_width}"
        )
    if mode not in ("submanifold", "strided"):
        raise GridConfigError(f"unknown mode {mode!r}")
    if stride not in (1, 2):
        raise GridConfigError(f"stride must be 1 or 2, got {stride}")
    if mode == "submanifold" and stride != 1:
        raise GridConfigError("submanifold convolution requires stride 1")

    c_out = w.shape[4]
    in_shape = np.array(inp.grid_shape)
    if stride == 1:
        out_shape = tuple(int(s) for s in in_shape)
    else:
        out_shape = tuple(int(-(-s // 2)) for s in in_shape)
    out_level = inp.level_index + (1 if stride == 2 else 0)
    out_vsize = inp.voxel_size * stride
    if inp.num_voxels == 0:
        return SparseTensor(out_level, out_vsize, inp.origin, out_shape,
                            np.empty((0, 3), np.int64), np.empty((0, c_out)))

    coords = inp.coords
    if mode == "submanifold":
        out_coords = coords
    else:
        cands = []
        for off in _OFFSETS:
            oc = coords - (off - 1)
            if stride == 2:
                div = (oc % 2 == 0).all(axis=1)
                oc = oc[div] // 2
            ok = ((oc >= 0) & (oc < np.array(out_shape))).all(axis=1)
            cands.append(oc[ok])
        all_c = np.concatenate(cands, axis=0)
        keys = np.unique(_pack(all_c, out_shape))
        out_coords = np.stack(np.unravel_index(keys, out_shape), axis=1).astype(np.int64)

    in_keys = _pack(coords, inp.grid_shape)
    out_feats = np.zeros((out_coords.shape[0], c_out))
    for n, off in enumerate(_OFFSETS):
        in_c = out_coords * stride + (off - 1)
        ok = ((in_c >= 0) & (in_c < in_shape)).all(axis=1)
        if not ok.any():
            continue
        rows = _lookup(in_keys, _pack(in_c[ok], inp.grid_shape))
        hit = rows >= 0
        if not hit.any():
            continue
        out_rows = np.flatnonzero(ok)[hit]
        tap = w.reshape(27, w.shape[3], c_out)[n]
        out_feats[out_rows] += inp.features[rows[hit]] @ tap
    return SparseTensor(out_level, out_vsize, inp.origin, out_shape,
                        out_coords, out_feats)


def relu_features(t: SparseTensor) -> SparseTensor:
    """max(0, x) applied to every feature entry."""
    return t.with_features(np.maximum(t.features, 0.0))


@dataclass(frozen=True)
class BackboneParams:
    """Per-level kernel pairs (one downsampling conv, one submanifold conv)."""

    widths: tuple[int, int, int, int]
    level_weights: tuple  # 4 pairs of (3,3,3,Cin,Cout) arrays

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.level_weights) != 4:
            raise GridConfigError("backbone needs exactly four levels")


# Effective active taps per 3x3x3 window on sparse surface-like scenes;
# using the dense 27 here makes activations vanish by the deep levels.
SPARSE_FAN_TAPS = 2


def init_backbone(
    in_width: int, widths, seed
) -> BackboneParams:
    """Deterministic uniform kernels scaled for sparse occupancy."""
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in widths)
    level_weights = []
    prev = in_width
    for wd in widths:
        pair = []
        for cin, cout in ((prev, wd), (wd, wd)):
            s = np.sqrt(6.0 / (SPARSE_FAN_TAPS * (cin + cout)))
            pair.append(rng.uniform(-s, s, size=(3, 3, 3, cin, cout)))
        level_weights.append(tuple(pair))
        prev = wd
    return BackboneParams(widths, tuple(level_weights))


def run_backbone(level1: SparseTensor, params: BackboneParams) -> list[SparseTensor]:
    """Four-level encoder producing 1x, 2x, 4x, 8x downsampled volumes.

    Each level applies one downsampling conv (stride 2, except level 1 which
    is a stride-1 submanifold conv) then one submanifold conv, each followed
    by the rectifier.
    """
    outs = []
    x = level1
    for k in range(4):
        w_down, w_sub = params.level_weights[k]
        if k == 0:
            x = relu_features(sparse_conv(x, w_down, stride=1, mode="submanifold"))
        else:
            x = relu_features(sparse_conv(x, w_down, stride=2, mode="strided"))
        x = relu_features(sparse_conv(x, w_sub, stride=1, mode="submanifold"))
        outs.append(x)
    return outs


def voxel_centers(t: SparseTensor) -> np.ndarray:
    """World-space centers of the active voxels, shape (N, 3)."""
    return t.origin + (t.coords + 0.5) * t.voxel_size


@dataclass(frozen=True)
class BevMap:
    """Dense bird's-eye-view feature grid collapsed from a voxel level.

    values[i, j] holds the stacked per-z-bin features of BEV cell (i, j);
    cell (i, j) covers origin + [i, i+1) * cell_size in x and likewise in y.
    """

    values: np.ndarray  # (nx, ny, channels)
    origin: np.ndarray  # (2,) meters
    cell_size: np.ndarray  # (2,) meters

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        org = np.asarray(self.origin, dtype=float).copy()
        cs = np.asarray(self.cell_size, dtype=float).copy()
        if vals.ndim != 3:
            raise GridConfigError(f"values must be (nx, ny, C), got {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("non-finite BEV values")
        for arr in (vals, org, cs):
            arr.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", org)
        object.__setattr__(self, "cell_size", cs)

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def bev_collapse(t8: SparseTensor, expected_level: int = 4) -> BevMap:
    """Stack a voxel level along Z into a dense BEV map.

    Channel block b (width = feature width) of cell (i, j) holds the feature
    of voxel (i, j, b), or zeros where that voxel is empty.
    """
    if t8.level_index != expected_level:
        raise GridConfigError(
            f"bev_collapse expects the {expected_level}x-level tensor, "
            f"got level {t8.level_index}"
        )
    nx, ny, nz = t8.grid_shape
    width = t8.feature_width
    dense = np.zeros((nx, ny, nz, width))
    if t8.num_voxels:
        c = t8.coords
        dense[c[:, 0], c[:, 1], c[:, 2]] = t8.features
    return BevMap(dense.reshape(nx, ny, nz * width), t8.origin[:2], t8.voxel_size[:2])


def bilinear_sample(bev: BevMap, xy: np.ndarray) -> np.ndarray:
    """Zero-padded bilinear interpolation at metric xy positions.

    The blend uses the four surrounding cell centers; cells outside the map
    contribute zeros, so queries far outside the extent return zero vectors
    and the field is continuous everywhere.

    Args:
        bev: the map.
        xy: (2,) or (M, 2) query positions in meters.

    Returns:
        (channels,) or (M, channels) feature rows.
    """
    q = np.asarray(xy, dtype=float)
    single = q.ndim == 1
    q = q.reshape(-1, 2)
    u = (q[:, 0] - bev.origin[0]) / bev.cell_size[0] - 0.5
    v = (q[:, 1] - bev.origin[1]) / bev.cell_size[1] - 0.5
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    tu = u - i0
    tv = v - j0
    out = np.zeros((q.shape[0], bev.channels))
    for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ii = i0 + di
        jj = j0 + dj
        wgt = (tu if di else 1.0 - tu) * (tv if dj else 1.0 - tv)
        ok = (ii >= 0) & (ii < bev.nx) & (jj >= 0) & (jj < bev.ny)
        if ok.any():
            out[ok] += wgt[ok, None] * bev.values[ii[ok], jj[ok]]
    return out[0] if single else out
