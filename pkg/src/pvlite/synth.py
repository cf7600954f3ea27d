"""Deterministic synthetic LiDAR-like scenes: a noisy ground plane plus
boxes with surface-sampled points, global augmentations, object pasting
between scenes, and a binary scene file format.

Scenes are intentionally minimal (no occlusion ray-casting): they exist to
exercise the pipeline's operators, not to model a sensor. Points and box
parameters are stored in float32 so scene files round-trip byte-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .config import Config
from .geom import Box3D

MAGIC = "PVSCN1"


class PlacementError(RuntimeError):
    """Raised when an object cannot be placed after bounded retries."""


class SceneFileError(ValueError):
    """Raised on malformed scene files."""


def _f32(x: float) -> float:
    return float(np.float32(x))


# Largest float32 strictly below pi, for yaw boundary safety.
_MAX_F32_YAW = float(np.nextafter(np.float32(math.pi), np.float32(0.0)))


def _f32_box(cx, cy, cz, l, w, h, theta) -> Box3D:
    """Box with float32-representable fields (yaw nudged off the +/-pi edge)."""
    t = _f32(geom.wrap_angle(float(theta)))
    if t >= math.pi:
        t = _MAX_F32_YAW
    elif t < -math.pi:
        t = -_MAX_F32_YAW
    return Box3D(_f32(cx), _f32(cy), _f32(cz), _f32(l), _f32(w), _f32(h), t)


@dataclass(frozen=True)
class SceneSample:
    """A synthetic point cloud with ground-truth boxes.

    Invariants: every point lies inside the (half-open) range, every box
    contains at least one point, and boxes are pairwise BEV-disjoint.
    """

    points: np.ndarray  # (N, 4) float32: x, y, z, intensity
    gt_boxes: tuple[Box3D, ...]
    gt_classes: tuple[int, ...]
    seed: int
    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))
        object.__setattr__(self, "gt_classes", tuple(int(c) for c in self.gt_classes))
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("gt_boxes and gt_classes must align")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def points_f64(self) -> np.ndarray:
        return self.points.astype(float)

    def equals(self, other: "SceneSample") -> bool:
        return (
            self.points.shape == other.points.shape
            and (self.points == other.points).all()
            and self.gt_boxes == other.gt_boxes
            and self.gt_classes == other.gt_classes
            and self.seed == other.seed
            and self.range_min == other.range_min
            and self.range_max == other.range_max
        )


def _sample_box_surface(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted samples over the six box faces, world frame."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    local = np.empty((count, 3))
    for f in range(6):
        m = face == f
        if not m.any():
            continue
        axis, sign = divmod(f, 2)
        s = 0.5 if sign == 0 else -0.5
        if axis == 0:
            local[m] = np.stack([np.full(m.sum(), s * l), u[m] * w, v[m] * h], axis=1)
        elif axis == 1:
            local[m] = np.stack([u[m] * l, np.full(m.sum(), s * w), v[m] * h], axis=1)
        else:
            local[m] = np.stack([u[m] * l, v[m] * w, np.full(m.sum(), s * h)], axis=1)
    c, s = math.cos(box.theta), math.sin(box.theta)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    world[:, 2] = local[:, 2] + box.cz
    return world


def _in_range(xyz: np.ndarray, lo, hi) -> np.ndarray:
    return ((xyz >= np.asarray(lo)) & (xyz < np.asarray(hi))).all(axis=1)


def gen_scene(cfg: Config, seed: int) -> SceneSample:
    """Generate one deterministic scene.

    Ground-plane points cover the ranged area; each object is a class-sized
    box with face-sampled points whose density decays with distance from
    the sensor origin and whose positions carry Gaussian noise. Object
    placements are rejected until BEV-disjoint; boxes whose inside-point
    count falls below the configured minimum are resampled. Bounded retries
    exhausted raise PlacementError.
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(cfg.range_min, dtype=float)
    hi = np.asarray(cfg.range_max, dtype=float)

    gx = rng.uniform(lo[0], hi[0], size=cfg.synth_ground_points)
    gy = rng.uniform(lo[1], hi[1], size=cfg.synth_ground_points)
    gz = cfg.synth_ground_z + rng.normal(0.0, cfg.synth_ground_noise,
                                         size=cfg.synth_ground_points)
    gi = rng.uniform(0.0, 1.0, size=cfg.synth_ground_points)
    ground = np.stack([gx, gy, gz, gi], axis=1).astype(np.float32)
    ground = ground[_in_range(ground[:, :3].astype(float), lo, hi)]

    boxes: list[Box3D] = []
    classes: list[int] = []
    chunks = [ground]
    for _ in range(cfg.synth_objects):
        cls = int(rng.integers(len(cfg.classes)))
        spec = cfg.classes[cls]
        box = None
        for _attempt in range(100):
            dims = np.asarray(spec.size) * np.exp(
                rng.normal(0.0, cfg.synth_size_std, size=3)
            )
            yaw = (rng.integers(2) * math.pi / 2
                   + rng.normal(0.0, cfg.synth_yaw_jitter))
            margin = 0.5 * math.hypot(dims[0], dims[1]) + cfg.synth_margin
            cx = rng.uniform(lo[0] + margin, hi[0] - margin)
            cy = rng.uniform(lo[1] + margin, hi[1] - margin)
            cz = cfg.synth_ground_z + 0.5 * dims[2]
            cand = _f32_box(cx, cy, cz, dims[0], dims[1], dims[2], yaw)
            if all(geom.bev_iou(cand, b) == 0.0 for b in boxes):
                box = cand
                break
        if box is None:
            raise PlacementError(
                f"could not place object {len(boxes)} after 100 attempts"
            )
        dist = math.hypot(box.cx, box.cy)
        count = max(
            cfg.synth_min_points * 2,
            int(cfg.synth_points_per_object / (1.0 + dist / cfg.synth_range_decay)),
        )
        pts = None
        for _attempt in range(20):
            xyz = _sample_box_surface(box, count, rng)
            xyz += rng.normal(0.0, cfg.synth_surface_noise, size=xyz.shape)
            inten = rng.uniform(0.0, 1.0, size=xyz.shape[0])
            cand_pts = np.concatenate([xyz, inten[:, None]], axis=1).astype(np.float32)
            cand_pts = cand_pts[_in_range(cand_pts[:, :3].astype(float), lo, hi)]
            inside = geom.points_in_box(cand_pts[:, :3].astype(float), box)
            if inside.sum() >= cfg.synth_min_points:
                pts = cand_pts
                break
        if pts is None:
            raise PlacementError(
                f"object {len(boxes)} kept fewer than {cfg.synth_min_points} points"
            )
        boxes.append(box)
        classes.append(cls)
        chunks.append(pts)

    points = np.concatenate(chunks, axis=0).astype(np.float32)
    return SceneSample(points, tuple(boxes), tuple(classes), seed,
                       tuple(cfg.range_min), tuple(cfg.range_max))


@dataclass(frozen=True)
class AugmentParams:
    """Ranges the augmentation draws from (collapse them for identity)."""

    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    rot_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)


def _rot_bounds(lo, hi, angle):
    """Axis-aligned envelope of a rotated xy rectangle (z untouched)."""
    corners = np.array([(lo[0], lo[1]), (lo[0], hi[1]), (hi[0], lo[1]), (hi[0], hi[1])])
    c, s = math.cos(angle), math.sin(angle)
    rx = c * corners[:, 0] - s * corners[:, 1]
    ry = s * corners[:, 0] + c * corners[:, 1]
    return (
        (min(rx), min(ry), lo[2]),
        (max(rx), max(ry), hi[2]),
    )


def augment(scene: SceneSample, params: AugmentParams, seed: int) -> SceneSample:
    """Global flip / scale / rotate applied identically to points and boxes.

    The flip negates y and yaw; scaling multiplies positions and dims;
    rotation about Z rotates centers and adds to yaw. The stored range is
    replaced by the transformed envelope so no point is dropped and per-box
    membership is preserved.
    """
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < params.flip_prob)
    scale = float(rng.uniform(*params.scale_range))
    angle = float(rng.uniform(*params.rot_range))

    pts = scene.points_f64()
    xyz = pts[:, :3].copy()
    lo = np.asarray(scene.range_min, dtype=float)
    hi = np.asarray(scene.range_max, dtype=float)
    box_rows = np.array([b.to_array() for b in scene.gt_boxes]).reshape(-1, 7)

    if flip:
        xyz[:, 1] = -xyz[:, 1]
        box_rows[:, 1] = -box_rows[:, 1]
        box_rows[:, 6] = -box_rows[:, 6]
        lo, hi = (lo[0], -hi[1], lo[2]), (hi[0], -lo[1], hi[2])
        lo, hi = np.asarray(lo), np.asarray(hi)
    if scale != 1.0:
        xyz *= scale
        box_rows[:, :6] *= scale
        lo = lo * scale
        hi = hi * scale
    if angle != 0.0:
        c, s = math.cos(angle), math.sin(angle)
        x, y = xyz[:, 0].copy(), xyz[:, 1].copy()
        xyz[:, 0] = c * x - s * y
        xyz[:, 1] = s * x + c * y
        bx, by = box_rows[:, 0].copy(), box_rows[:, 1].copy()
        box_rows[:, 0] = c * bx - s * by
        box_rows[:, 1] = s * bx + c * by
        box_rows[:, 6] += angle
        lo, hi = _rot_bounds(lo, hi, angle)
        lo, hi = np.asarray(lo), np.asarray(hi)

    new_pts = np.concatenate([xyz, pts[:, 3:4]], axis=1).astype(np.float32)
    # float32 rounding can place a point exactly on the new envelope edge.
    eps = 1e-3
    new_lo = tuple(float(np.nextafter(np.float32(v - eps), np.float32(-np.inf)))
                   for v in lo)
    new_hi = tuple(float(np.nextafter(np.float32(v + eps), np.float32(np.inf)))
                   for v in hi)
    boxes = tuple(_f32_box(*row) for row in box_rows)
    return SceneSample(new_pts, boxes, scene.gt_classes, scene.seed,
                       new_lo, new_hi)


def gt_paste(
    scene: SceneSample,
    donor_scenes: list[SceneSample],
    count: int,
    seed: int,
    max_attempts: int = 100,
) -> SceneSample:
    """Paste ground-truth objects (box plus inside points) from donor scenes
    into BEV-collision-free spots of this scene.

    Placements overlapping an existing or previously pasted box are
    rejected and retried; exhausting retries raises PlacementError.
    Pre-existing points under a pasted box (ground hits) are removed, so
    each pasted box contains exactly its donor's inside points.
    """
    if count == 0:
        return scene
    pool = []
    for donor in donor_scenes:
        dpts = donor.points_f64()
        for box, cls in zip(donor.gt_boxes, donor.gt_classes):
            inside = geom.points_in_box(dpts[:, :3], box)
            if inside.any():
                pool.append((box, cls, dpts[inside]))
    if not pool:
        raise PlacementError("donor scenes contain no objects to paste")

    rng = np.random.default_rng(seed)
    lo = np.asarray(scene.range_min, dtype=float)
    hi = np.asarray(scene.range_max, dtype=float)
    boxes = list(scene.gt_boxes)
    classes = list(scene.gt_classes)
    current = scene.points_f64()
    for _ in range(count):
        box, cls, pts = pool[int(rng.integers(len(pool)))]
        donor_count = pts.shape[0]
        spread = float(np.abs(pts[:, :3] - [box.cx, box.cy, box.cz]).max())
        margin = spread + 0.05
        placed = moved = None
        for _attempt in range(max_attempts):
            cx = rng.uniform(lo[0] + margin, hi[0] - margin)
            cy = rng.uniform(lo[1] + margin, hi[1] - margin)
            cand = _f32_box(cx, cy, box.cz, box.l, box.w, box.h, box.theta)
            if not all(geom.bev_iou(cand, b) == 0.0 for b in boxes):
                continue
            shifted = pts.copy()
            shifted[:, 0] += cand.cx - box.cx
            shifted[:, 1] += cand.cy - box.cy
            shifted = shifted.astype(np.float32)
            # float32 rounding can flip membership of near-boundary points;
            # accept only placements that keep the donor's inside count.
            inside = geom.points_in_box(shifted[:, :3].astype(float), cand)
            if int(inside.sum()) == donor_count:
                placed, moved = cand, shifted.astype(float)
                break
        if placed is None:
            raise PlacementError(f"could not paste object after {max_attempts} tries")
        occluded = geom.points_in_box(current[:, :3], placed)
        current = np.concatenate([current[~occluded], moved], axis=0)
        boxes.append(placed)
        classes.append(cls)
    points = current.astype(np.float32)
    if not _in_range(points[:, :3].astype(float), lo, hi).all():
        raise PlacementError("pasted points escaped the scene range")
    return SceneSample(points, tuple(boxes), tuple(classes), scene.seed,
                       scene.range_min, scene.range_max)


# ---------------------------------------------------------------------------
# Scene files: one ascii header line, then little-endian float32 point
# records (x, y, z, intensity), then box records (cx, cy, cz, l, w, h,
# theta as float32, class as int32).
# ---------------------------------------------------------------------------

def save_scene(scene: SceneSample, path) -> None:
    rng_txt = ",".join(repr(v) for v in (*scene.range_min, *scene.range_max))
    header = (
        f"{MAGIC} points={scene.num_points} boxes={len(scene.gt_boxes)} "
        f"seed={scene.seed} range={rng_txt}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(scene.points, dtype="<f4").tobytes())
        for box, cls in zip(scene.gt_boxes, scene.gt_classes):
            fh.write(np.asarray(box.to_array(), dtype="<f4").tobytes())
            fh.write(np.asarray([cls], dtype="<i4").tobytes())


def load_scene(path) -> SceneSample:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            text = line.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise SceneFileError("scene header is not ascii") from exc
        fields = text.split()
        if not fields or fields[0] != MAGIC:
            if fields and fields[0].startswith("PVSCN"):
                raise SceneFileError(
                    f"unsupported scene format version {fields[0]!r} "
                    f"(expected {MAGIC})"
                )
            raise SceneFileError(f"bad scene magic: {text[:30]!r}")
        kv = dict(tok.split("=", 1) for tok in fields[1:] if "=" in tok)
        try:
            n_points = int(kv["points"])
            n_boxes = int(kv["boxes"])
            seed = int(kv["seed"])
            rng_vals = [float(v) for v in kv["range"].split(",")]
            if len(rng_vals) != 6:
                raise ValueError("range must have six values")
        except (KeyError, ValueError) as exc:
            raise SceneFileError(f"malformed scene header: {text!r}") from exc

        blob = fh.read(n_points * 16)
        if len(blob) != n_points * 16:
            raise SceneFileError("truncated point records")
        points = np.frombuffer(blob, dtype="<f4").reshape(n_points, 4)
        boxes, classes = [], []
        for _ in range(n_boxes):
            rec = fh.read(7 * 4 + 4)
            if len(rec) != 32:
                raise SceneFileError("truncated box record")
            vals = np.frombuffer(rec[:28], dtype="<f4")
            cls = int(np.frombuffer(rec[28:], dtype="<i4")[0])
            boxes.append(geom.box_from_array(vals))
            classes.append(cls)
        if fh.read(1):
            raise SceneFileError("trailing bytes after box records")
    return SceneSample(
        points, tuple(boxes), tuple(classes), seed,
        tuple(rng_vals[:3]), tuple(rng_vals[3:]),
    )
