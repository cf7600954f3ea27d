"""Named invariant checks behind the `check` command.

Each check is a fast, seeded self-test of one library invariant. The
optional fault injection replaces a kernel with a perturbed version so the
suite's failure reporting can be exercised end to end.
"""

from __future__ import annotations

import math

import numpy as np

from . import evalkit, geom, nn, roihead, rpn, sparsegrid, synth, vsa
from .config import desk_config
from .geom import Box3D, Detection

FAULTS = ("bev-iou",)


def _random_box(rng, span=3.0):
    return Box3D(
        float(rng.uniform(-span, span)), float(rng.uniform(-span, span)),
        float(rng.uniform(-1, 1)), float(rng.uniform(0.8, 5.0)),
        float(rng.uniform(0.8, 3.0)), float(rng.uniform(0.8, 2.5)),
        float(rng.uniform(-math.pi, math.pi)),
    )


def _near_pair(rng):
    a = _random_box(rng)
    b = Box3D(a.cx + float(rng.uniform(-2, 2)), a.cy + float(rng.uniform(-2, 2)),
              a.cz, float(rng.uniform(0.8, 5.0)), float(rng.uniform(0.8, 3.0)),
              a.h, float(rng.uniform(-math.pi, math.pi)))
    return a, b


def _mc_bev_iou(a, b, side, seed):
    """Stratified sampling estimate of the footprint IoU."""
    corners = np.concatenate([a.corners_bev(), b.corners_bev()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    pts = lo + (np.stack([gx.ravel(), gy.ravel()], 1)
                + rng.random((side * side, 2))) * (hi - lo) / side

    def inside(box):
        dx, dy = pts[:, 0] - box.cx, pts[:, 1] - box.cy
        c, s = math.cos(box.theta), math.sin(box.theta)
        return (np.abs(c * dx + s * dy) <= box.l / 2) & (
            np.abs(-s * dx + c * dy) <= box.w / 2
        )

    inter = (inside(a) & inside(b)).mean() * (hi - lo).prod()
    union = a.bev_area + b.bev_area - inter
    return float(inter / union) if union > 0 else 0.0


def check_bev_iou_mc(env):
    bev_iou = env["bev_iou"]
    rng = np.random.default_rng(1000)
    worst = 0.0
    for i in range(12):
        a, b = _near_pair(rng)
        worst = max(worst, abs(bev_iou(a, b) - _mc_bev_iou(a, b, 400, seed=i)))
    return worst <= 2e-3, f"max |exact - sampled| = {worst:.2e} (tol 2e-3)"


def check_bev_iou_symmetry(env):
    bev_iou = env["bev_iou"]
    rng = np.random.default_rng(1001)
    for _ in range(50):
        a, b = _near_pair(rng)
        ab, ba = bev_iou(a, b), bev_iou(b, a)
        if not (0.0 <= ab <= 1.0) or abs(ab - ba) > 1e-12:
            return False, f"asymmetry {ab} vs {ba}"
        if bev_iou(a, a) != 1.0:
            return False, "identity is not exactly 1"
    return True, "symmetric, bounded, identity exact on 50 pairs"


def check_nms_permutation(env):
    # Distinct scores; greedy order under ties is input-index defined.
    rng = np.random.default_rng(1002)
    dets = [Detection(_random_box(rng), float(s))
            for s in np.linspace(0.05, 0.95, 24)]
    base = {id(dets[i]) for i in geom.nms(dets, 0.3)}
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(len(dets))
        shuffled = [dets[i] for i in perm]
        kept = {id(shuffled[i]) for i in geom.nms(shuffled, 0.3)}
        if kept != base:
            return False, f"kept set changed under permutation seed {seed}"
    return True, "kept set stable under 3 permutations"


def check_roi_grid_points(env):
    rng = np.random.default_rng(1003)
    for _ in range(5):
        b = _random_box(rng)
        pts = geom.roi_grid_points(b)
        if not geom.points_in_box(pts, b).all():
            return False, "grid point escaped its box"
        if np.abs(pts.mean(axis=0) - b.center).max() > 1e-9:
            return False, "grid centroid off the box center"
    return True, "216 points inside with centered mean on 5 boxes"


def check_sparse_conv_dense(env):
    for seed in range(4):
        rng = np.random.default_rng(seed)
        shape = (12, 12, 12)
        flat = rng.choice(12**3, size=200, replace=False)
        coords = np.stack(np.unravel_index(flat, shape), 1)
        t = sparsegrid.SparseTensor(1, (0.1,) * 3, (0.0,) * 3, shape, coords,
                                    rng.normal(size=(200, 4)))
        dense = np.zeros((*shape, 4))
        dense[t.coords[:, 0], t.coords[:, 1], t.coords[:, 2]] = t.features
        w = rng.normal(size=(3, 3, 3, 4, 3))
        for mode, stride in (("submanifold", 1), ("strided", 1), ("strided", 2)):
            out = sparsegrid.sparse_conv(t, w, stride=stride, mode=mode)
            ref = _dense_conv(dense, w, stride)
            c = out.coords
            err = np.abs(out.features - ref[c[:, 0], c[:, 1], c[:, 2]]).max()
            if err > 1e-6:
                return False, f"{mode}/s{stride} differs from dense by {err:.1e}"
    return True, "all modes within 1e-6 of the dense oracle on 4 seeds"


def _dense_conv(grid, w, stride):
    nx, ny, nz, cin = grid.shape
    padded = np.zeros((nx + 2, ny + 2, nz + 2, cin))
    padded[1:-1, 1:-1, 1:-1] = grid
    ox, oy, oz = (-(-n // stride) for n in (nx, ny, nz))
    out = np.zeros((ox, oy, oz, w.shape[4]))
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                sl = padded[kx : kx + stride * (ox - 1) + 1 : stride,
                            ky : ky + stride * (oy - 1) + 1 : stride,
                            kz : kz + stride * (oz - 1) + 1 : stride]
                out += sl @ w[kx, ky, kz]
    return out


def check_voxelize_permutation(env):
    rng = np.random.default_rng(1004)
    pts = np.concatenate([rng.uniform(0, 1.6, (400, 3)), rng.random((400, 1))], 1)
    base = sparsegrid.voxelize(pts, (0, 0, 0), (1.6, 1.6, 1.6), (0.1, 0.1, 0.1))
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(400)
        t = sparsegrid.voxelize(pts[perm], (0, 0, 0), (1.6, 1.6, 1.6),
                                (0.1, 0.1, 0.1))
        if not (np.array_equal(base.coords, t.coords)
                and np.array_equal(base.features, t.features)):
            return False, f"voxelization changed under permutation seed {seed}"
    return True, "bit-identical under 3 permutations"


def check_mlp_gradients(env):
    template = nn.init_params((5, 7, 4, 1), seed=1005)
    rng = np.random.default_rng(1006)
    x = rng.normal(size=5)

    def f(vec):
        p = nn.params_from_vector(template, vec)
        y = nn.mlp_forward(p, x)
        val = 0.5 * float(y @ y)
        w_g, b_g, _ = nn.mlp_backward(p, x, y)
        return val, nn.params_to_vector(nn.MlpParams(p.layer_dims, w_g, b_g,
                                                     p.out_activation))

    err = nn.grad_check(f, nn.params_to_vector(template))
    return err < 1e-4, f"max relative error {err:.2e} (tol 1e-4)"


def check_codec_roundtrip(env):
    rng = np.random.default_rng(1007)
    gt = np.stack([_random_box(rng).to_array() for _ in range(2000)])
    an = np.stack([_random_box(rng).to_array() for _ in range(2000)])
    back = rpn.decode_residuals(rpn.encode_residuals(gt, an), an)
    err = np.abs(back - gt).max()
    return err < 1e-9, f"max round-trip error {err:.1e} (tol 1e-9)"


def check_loss_gradients(env):
    rng = np.random.default_rng(1008)
    p = rng.uniform(0.15, 0.85, size=10)
    t = (rng.random(10) < 0.4).astype(int)

    def f_focal(x):
        return rpn.focal_loss(x, t), rpn.focal_loss_grad(x, t)

    e1 = nn.grad_check(f_focal, p)
    pred = rng.normal(size=(4, 7)) * 1.5
    target = rng.normal(size=(4, 7))

    def f_sl1(v):
        q = v.reshape(4, 7)
        return rpn.smooth_l1(q, target), rpn.smooth_l1_grad(q, target).ravel()

    e2 = nn.grad_check(f_sl1, pred.ravel())
    y = np.linspace(0, 1, 10)
    pb = np.clip(y + np.where(y < 0.5, 0.3, -0.3), 0.02, 0.98)

    def f_bce(x):
        return roihead.iou_bce_loss(x, y), roihead.iou_bce_grad(x, y)

    e3 = nn.grad_check(f_bce, pb)
    worst = max(e1, e2, e3)
    return worst < 1e-4, f"focal {e1:.1e}, smooth-L1 {e2:.1e}, bce {e3:.1e}"


def check_fps_oracle(env):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-5, 5, size=(96, 3))
        got = vsa.fps(pts, 12)
        sel = [0]
        for _ in range(11):
            d = np.full(96, np.inf)
            for s in sel:
                d = np.minimum(d, ((pts - pts[s]) ** 2).sum(axis=1))
            sel.append(int(np.argmax(d)))
        if not np.array_equal(got, np.array(sel)):
            return False, f"fps deviates from greedy oracle at seed {seed}"
    return True, "matches the brute-force greedy oracle on 20 clouds"


def check_set_abstraction(env):
    rng = np.random.default_rng(1009)
    mlp = nn.init_params((4 + 3, 8, 6), seed=1010)
    feats = rng.normal(size=(16, 4))
    pos = rng.normal(size=(16, 3))
    center = rng.normal(size=3)
    base = vsa.set_abstraction(center, feats, pos, mlp)
    for seed in range(20):
        perm = np.random.default_rng(seed).permutation(16)
        if not np.array_equal(
            vsa.set_abstraction(center, feats[perm], pos[perm], mlp), base
        ):
            return False, "output changed under neighbor permutation"
    empty = vsa.set_abstraction(center, np.empty((0, 4)), np.empty((0, 3)), mlp)
    if empty.any():
        return False, "empty neighborhood is not the zero vector"
    return True, "bitwise permutation-invariant; empty set maps to zero"


def check_confidence_mapping(env):
    for iou in np.linspace(0, 1, 11):
        expect = min(1.0, max(0.0, 2.0 * iou - 0.5))
        if abs(roihead.confidence_target(float(iou)) - expect) > 1e-15:
            return False, f"mapping wrong at IoU {iou}"
    return True, "exact on the 11-point grid incl. 0.25/0.5/0.75 anchors"


def check_ap_hand_cases(env):
    perfect = evalkit.average_precision(np.array([True] * 3),
                                        np.array([0.9, 0.8, 0.7]), 3, "R40")
    empty = evalkit.average_precision(np.empty(0, bool), np.empty(0), 3, "R40")
    r11 = evalkit.average_precision(np.array([True, False]),
                                    np.array([0.9, 0.8]), 2, "R11")
    r40 = evalkit.average_precision(np.array([True, False]),
                                    np.array([0.9, 0.8]), 2, "R40")
    ok = (perfect == 1.0 and empty == 0.0
          and abs(r11 - 6 / 11) < 1e-12 and abs(r40 - 0.5) < 1e-12)
    return ok, f"perfect {perfect}, empty {empty}, mixed R11 {r11:.4f} R40 {r40:.4f}"


def check_scene_roundtrip(env):
    cfg = desk_config().replace(synth_ground_points=300, synth_objects=2,
                                synth_points_per_object=150)
    a = synth.gen_scene(cfg, seed=99)
    b = synth.gen_scene(cfg, seed=99)
    if not a.equals(b):
        return False, "same seed produced different scenes"
    import tempfile, os

    with tempfile.TemporaryDirectory() as d:
        p1 = os.path.join(d, "a.pvscn")
        p2 = os.path.join(d, "b.pvscn")
        synth.save_scene(a, p1)
        synth.save_scene(synth.load_scene(p1), p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            if f1.read() != f2.read():
                return False, "save/load/save is not byte-identical"
    return True, "deterministic generation and byte-exact file round trip"


CHECKS = [
    ("geom.bev_iou_vs_sampling", check_bev_iou_mc),
    ("geom.bev_iou_symmetry", check_bev_iou_symmetry),
    ("geom.nms_permutation", check_nms_permutation),
    ("geom.roi_grid_points", check_roi_grid_points),
    ("sparse.conv_vs_dense", check_sparse_conv_dense),
    ("sparse.voxelize_permutation", check_voxelize_permutation),
    ("nn.gradients_vs_fd", check_mlp_gradients),
    ("rpn.codec_roundtrip", check_codec_roundtrip),
    ("losses.gradients_vs_fd", check_loss_gradients),
    ("vsa.fps_vs_oracle", check_fps_oracle),
    ("vsa.set_abstraction_invariance", check_set_abstraction),
    ("roihead.confidence_mapping", check_confidence_mapping),
    ("evalkit.ap_hand_cases", check_ap_hand_cases),
    ("synth.determinism_roundtrip", check_scene_roundtrip),
]


def run_checks(inject_fault: str | None = None):
    """Run every named check; returns a list of (name, ok, detail)."""
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; options: {FAULTS}")
    env = {"bev_iou": geom.bev_iou}
    if inject_fault == "bev-iou":
        env["bev_iou"] = lambda a, b: min(1.0, geom.bev_iou(a, b) + 0.004)
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(env)
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
