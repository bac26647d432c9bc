"""Deterministic synthetic RGBD scenes with exact geometry ground truth.

Scenes are corridors on the z=0 ground plane built from axis-aligned wall
cuboids, with optional side branches (for turning trajectories) and obstacle
boxes. Every pixel is ray-cast against the analytic primitive set, so depth
is exact and every geometric quantity used in tests has a closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace as dc_replace
from pathlib import Path

import numpy as np

from .proxemic import ground_frame_from_motion, world_to_proxemic
from .scene_io import (CameraModel, CorpusManifest, SceneBundle, save_bundle,
                       save_manifest)
from .tunnel import Trajectory

UP = np.array([0.0, 0.0, 1.0])

CLASSES = ("straight", "left", "right")


@dataclass(frozen=True)
class SceneSpec:
    """Layout + texture + camera-path recipe; ``seed`` fixes all randomness."""

    half_width: float = 2.0
    length: float = 30.0
    wall_height: float = 3.0
    # branch: None or (side, y_position, width, length) with side in {-1, +1}
    # (+1 = +x = wearer's right... the path turns there for turn classes)
    branch: tuple | None = None
    boxes: tuple = ()            # ((x0,y0,z0),(x1,y1,z1)) obstacle cuboids
    backdrop_boxes: tuple = ()   # building slabs behind the walls: finite
                                 # textured content above the horizon
    checker: float = 0.5         # checker tile size, meters
    checker_amp: float = 0.12
    floor_checker_amp: float | None = None  # None: same as checker_amp
    ramp_amp: float = 0.22
    noise_tex_amp: float = 0.0   # smooth value-noise amplitude (decorrelates
    noise_tex_cell: float = 1.5  # misplaced copies); lattice cell, meters
    palette_seed: int = 0
    # The observed height-map band limits the usable trajectory: ground cells
    # nearer than ~2.5 m fall outside the camera FOV laterally, and beyond
    # ~8 m consecutive pixel rows skip radial grid cells, leaving UNKNOWN
    # gaps. Defaults keep every future foot point inside [2.5, 8] m.
    start_y: float = 0.8
    step: float = 0.5            # walking step per frame, meters
    n_frames: int = 26
    traj_skip: int = 5           # future trajectory starts this many steps out
    traj_max_dist: float = 8.0   # drop foot points farther than this
    wearer_height: float = 1.6
    pitch_deg: float = 10.0
    roll_deg: float = 0.0
    jitter_deg: float = 0.0      # per-frame random attitude jitter amplitude
    roll_jitter_deg: float = 0.0  # extra roll-only jitter (zero flow at center)
    noise_sigma: float = 0.0     # depth noise, meters
    fov_deg: float = 70.0
    img_w: int = 256
    img_h: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.half_width <= 0 or self.length <= 0:
            raise ValueError("corridor dimensions must be positive")
        for lo, hi in self.boxes:
            if min(hi[i] - lo[i] for i in range(3)) <= 0 or lo[2] < 0:
                raise ValueError("obstacle boxes must be proper and above ground")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        d = dict(data)
        if d.get("branch") is not None:
            d["branch"] = tuple(d["branch"])
        for key in ("boxes", "backdrop_boxes"):
            d[key] = tuple((tuple(lo), tuple(hi)) for lo, hi in d.get(key, ()))
        return cls(**d)


def _wall_boxes(spec: SceneSpec):
    """Corridor walls (plus branch walls / far caps) as cuboids."""
    hw, L, wh, th = spec.half_width, spec.length, spec.wall_height, 0.3
    boxes = []
    for side in (-1, 1):
        x0 = side * hw if side > 0 else -hw - th
        x1 = side * hw + th if side > 0 else -hw
        if spec.branch is not None and spec.branch[0] == side:
            _, by, bw, bl = spec.branch
            y_lo, y_hi = by - bw / 2.0, by + bw / 2.0
            boxes.append(((x0, 0.0, 0.0), (x1, y_lo, wh)))
            boxes.append(((x0, y_hi, 0.0), (x1, L, wh)))
            # branch corridor walls and end cap
            bx0 = hw if side > 0 else -hw - bl
            bx1 = hw + bl if side > 0 else -hw
            boxes.append(((bx0, y_lo - th, 0.0), (bx1, y_lo, wh)))
            boxes.append(((bx0, y_hi, 0.0), (bx1, y_hi + th, wh)))
            cap0 = hw + bl if side > 0 else -hw - bl - th
            boxes.append(((cap0, y_lo, 0.0), (cap0 + th, y_hi, wh)))
        else:
            boxes.append(((x0, 0.0, 0.0), (x1, L, wh)))
    boxes.append(((-hw - th, L, 0.0), (hw + th, L + th, wh)))  # far cap
    boxes.extend(tuple(map(tuple, b)) for b in spec.boxes)
    boxes.extend(tuple(map(tuple, b)) for b in spec.backdrop_boxes)
    return [(np.array(lo), np.array(hi)) for lo, hi in boxes]


def _camera_path(spec: SceneSpec) -> np.ndarray:
    """(n_frames, 2) ground positions marched at fixed step along the path
    polyline (straight corridor, or corridor then branch for turn specs)."""
    verts = [np.array([0.0, spec.start_y])]
    if spec.branch is None:
        verts.append(np.array([0.0, spec.start_y + spec.n_frames * spec.step + 5.0]))
    else:
        side, by, _bw, bl = spec.branch
        verts.append(np.array([0.0, by]))
        verts.append(np.array([side * (spec.half_width + bl - 0.5), by]))
    pts = [verts[0]]
    vi = 0
    pos = verts[0].astype(np.float64)
    for _ in range(spec.n_frames - 1):
        remaining = spec.step
        while remaining > 1e-12 and vi < len(verts) - 1:
            leg = verts[vi + 1] - pos
            leg_len = np.linalg.norm(leg)
            if leg_len > remaining:
                pos = pos + leg * (remaining / leg_len)
                remaining = 0.0
            else:
                pos = verts[vi + 1].astype(np.float64)
                remaining -= leg_len
                vi += 1
        if remaining > 1e-12:
            raise ValueError("camera path polyline shorter than n_frames * step")
        pts.append(pos.copy())
    return np.array(pts)


def _heading(path: np.ndarray, i: int) -> np.ndarray:
    j = i if i < len(path) - 1 else len(path) - 2
    d = path[j + 1] - path[j]
    return d / np.linalg.norm(d)


def _camera_pose(spec: SceneSpec, path: np.ndarray, i: int):
    """Returns (R world->camera, C) for frame ``i``.

    Head jitter is a slow seeded sinusoid per axis (gait sway oscillates, it
    is not frame-independent noise), so attitude differences accumulate with
    the frame offset."""
    rng = np.random.default_rng([spec.seed, 7919])
    phases = rng.uniform(0.0, 2 * np.pi, size=4)
    period = 26.0
    sway = np.sin(2 * np.pi * i / period + phases)
    jitter = spec.jitter_deg * sway[:3]
    roll_extra = spec.roll_jitter_deg * sway[3]
    pitch = np.deg2rad(spec.pitch_deg + jitter[0])
    roll = np.deg2rad(spec.roll_deg + jitter[1] + roll_extra)
    yaw_off = np.deg2rad(jitter[2])

    h = _heading(path, i)
    cy, sy = np.cos(yaw_off), np.sin(yaw_off)
    h = np.array([cy * h[0] - sy * h[1], sy * h[0] + cy * h[1]])
    fwd0 = np.array([h[0], h[1], 0.0])
    right0 = np.cross(fwd0, UP)
    fwd = np.cos(pitch) * fwd0 - np.sin(pitch) * UP
    down = np.cross(fwd, right0)
    cr, sr = np.cos(roll), np.sin(roll)
    right = cr * right0 + sr * down
    down = cr * down - sr * right0
    r = np.stack([right, down, fwd])
    c = np.array([path[i, 0], path[i, 1], spec.wearer_height])
    return r, c


def _intrinsics(spec: SceneSpec) -> np.ndarray:
    f = (spec.img_w / 2.0) / np.tan(np.deg2rad(spec.fov_deg) / 2.0)
    return np.array([[f, 0.0, (spec.img_w - 1) / 2.0],
                     [0.0, f, (spec.img_h - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def _palette(spec: SceneSpec, prim: int) -> np.ndarray:
    rng = np.random.default_rng([spec.palette_seed, prim])
    return rng.uniform(0.25, 0.75, size=3)


def _lattice_hash(ix, iy, salt):
    """Deterministic pseudo-random values in [-1, 1] on an integer lattice."""
    h = (ix.astype(np.int64) * np.int64(73856093)
         ^ iy.astype(np.int64) * np.int64(19349663)
         ^ np.int64(salt) * np.int64(83492791))
    h = (h ^ (h >> 13)) * np.int64(1274126177)
    h = h ^ (h >> 16)
    return (h % 100003).astype(np.float64) / 50001.0 - 1.0


def _value_noise(a, b, cell, salt):
    """Smooth value noise: bilinear interpolation of a hashed lattice."""
    xa = a / cell
    xb = b / cell
    ia = np.floor(xa).astype(np.int64)
    ib = np.floor(xb).astype(np.int64)
    fa = xa - ia
    fb = xb - ib
    v00 = _lattice_hash(ia, ib, salt)
    v01 = _lattice_hash(ia, ib + 1, salt)
    v10 = _lattice_hash(ia + 1, ib, salt)
    v11 = _lattice_hash(ia + 1, ib + 1, salt)
    return ((1 - fa) * (1 - fb) * v00 + (1 - fa) * fb * v01
            + fa * (1 - fb) * v10 + fa * fb * v11)


def _parity_integral(x):
    """Antiderivative of the 0/1 unit square wave (0 on [2k, 2k+1))."""
    k = np.floor(x / 2.0)
    return k + np.maximum(x - 2.0 * k - 1.0, 0.0)


def _filtered_parity(x, h):
    """Box-filtered square wave: mean of the unit parity over [x-h, x+h]."""
    h = np.maximum(h, 1e-6)
    return (_parity_integral(x + h) - _parity_integral(x - h)) / (2.0 * h)


def _surface_color(pts, a_axis, b_axis, base, spec: SceneSpec, footprint=None):
    """Procedural texture: checker + smooth per-axis ramps. The checker is
    analytically box-filtered by the pixel footprint so far-field sampling
    stays band-limited (no aliasing noise in any comparison)."""
    a, b = pts[:, a_axis], pts[:, b_axis]
    if footprint is None:
        footprint = np.zeros_like(a)
    h = footprint / (2.0 * spec.checker)
    ma = _filtered_parity(a / spec.checker, h)
    mb = _filtered_parity(b / spec.checker, h)
    checker = ma + mb - 2.0 * ma * mb  # filtered XOR of the axis parities
    col = np.empty((pts.shape[0], 3))
    col[:] = base
    col += spec.checker_amp * (2.0 * checker - 1.0)[:, None]
    col[:, 0] += spec.ramp_amp * np.sin(2 * np.pi * a / 11.0)
    col[:, 1] += spec.ramp_amp * np.sin(2 * np.pi * b / 8.0)
    col[:, 2] += 0.5 * spec.ramp_amp * np.sin(2 * np.pi * (a + b) / 15.0)
    if spec.noise_tex_amp > 0:
        atten = np.clip(1.0 - footprint / spec.noise_tex_cell, 0.0, 1.0)
        amp = spec.noise_tex_amp * atten
        salt = spec.palette_seed * 17 + a_axis * 5 + b_axis
        for ch in range(3):
            col[:, ch] += amp * _value_noise(a, b, spec.noise_tex_cell,
                                             salt * 31 + ch)
    return np.clip(col, 0.0, 1.0)


def max_frame_index(spec: SceneSpec) -> int:
    """Largest frame index with a valid ground frame and an F>=2 trajectory."""
    return spec.n_frames - spec.traj_skip - 2


def render_scene(spec: SceneSpec, frame_index: int, scene_id: str | None = None) -> SceneBundle:
    """Ray-cast one frame; deterministic given (spec, frame_index)."""
    path = _camera_path(spec)
    if not (0 <= frame_index <= max_frame_index(spec)):
        raise ValueError(
            f"frame_index {frame_index} outside [0, {max_frame_index(spec)}]")
    r_cam, c = _camera_pose(spec, path, frame_index)
    k = _intrinsics(spec)
    boxes = _wall_boxes(spec)
    for lo, hi in boxes:
        if np.all(c > lo) and np.all(c < hi):
            raise ValueError("camera is inside a scene primitive")
    if c[2] <= 0:
        raise ValueError("camera below the ground plane")

    w, h = spec.img_w, spec.img_h
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    hom = np.stack([xs.ravel(), ys.ravel(), np.ones(w * h)], axis=-1)
    dirs = (hom @ np.linalg.inv(k).T) @ r_cam  # world dirs, camera-z scale 1
    n_pix = dirs.shape[0]

    depth = np.full(n_pix, np.inf)
    color = np.zeros((n_pix, 3))
    # sky backdrop: gentle gradient, zero depth signal
    sky_t = np.clip(dirs[:, 2], 0.0, 1.0)
    color[:] = np.array([0.55, 0.65, 0.8]) + 0.15 * sky_t[:, None]

    focal = k[0, 0]
    dir_sq = np.sum(dirs * dirs, axis=1)

    def _footprint(t, axis_dot, sq):
        # world-space pixel extent on the surface at ray parameter t
        return t * sq / (focal * np.maximum(np.abs(axis_dot), 0.05))

    # ground plane z=0
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = np.where(dz < -1e-12, -c[2] / dz, np.inf)
    hit = t_g < depth
    if hit.any():
        pts = c + t_g[hit, None] * dirs[hit]
        fp = _footprint(t_g[hit], dz[hit], dir_sq[hit])
        floor_spec = spec
        if spec.floor_checker_amp is not None:
            floor_spec = dc_replace(spec, checker_amp=spec.floor_checker_amp,
                                    floor_checker_amp=None)
        color[hit] = _surface_color(pts, 0, 1, _palette(spec, 0), floor_spec, fp)
        depth[hit] = t_g[hit]

    for bi, (lo, hi) in enumerate(boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - c) / dirs
            t2 = (hi - c) / dirs
        tn_ax = np.minimum(t1, t2)
        tf_ax = np.maximum(t1, t2)
        # 0/0 slabs = ray parallel and exactly on a face plane: treat as inside
        tn_ax = np.where(np.isnan(tn_ax), -np.inf, tn_ax)
        tf_ax = np.where(np.isnan(tf_ax), np.inf, tf_ax)
        tn = tn_ax.max(axis=1)
        tf = tf_ax.min(axis=1)
        hit = (tn <= tf) & (tn > 1e-9) & (tn < depth)
        if not hit.any():
            continue
        face_axis = np.argmax(tn_ax[hit], axis=1)
        pts = c + tn[hit, None] * dirs[hit]
        col = np.empty((int(hit.sum()), 3))
        base = _palette(spec, bi + 1)
        for axis in range(3):
            sel = face_axis == axis
            if sel.any():
                a_axis, b_axis = [i for i in range(3) if i != axis]
                fp = _footprint(tn[hit][sel], dirs[hit][sel, axis],
                                dir_sq[hit][sel])
                col[sel] = _surface_color(pts[sel], a_axis, b_axis, base,
                                          spec, fp)
        color[hit] = col
        depth[hit] = tn[hit]

    depth_img = depth.reshape(h, w).astype(np.float32)
    depth_img[~np.isfinite(depth_img)] = np.nan
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 104729, frame_index])
        noise = rng.normal(0.0, spec.noise_sigma, size=depth_img.shape)
        depth_img = np.where(np.isfinite(depth_img),
                             depth_img + noise.astype(np.float32), np.nan)
    rgb = np.rint(np.clip(color, 0, 1) * 255).astype(np.uint8).reshape(h, w, 3)

    cam_c = c
    cam_next = np.array([path[frame_index + 1, 0], path[frame_index + 1, 1],
                         spec.wearer_height])
    frame = ground_frame_from_motion(cam_c, cam_next, UP, spec.wearer_height)
    camera = CameraModel(K=k, R=r_cam, C=cam_c, width=w, height=h)

    first = frame_index + spec.traj_skip
    future = path[first:]
    dist = np.linalg.norm(future - path[frame_index], axis=1)
    n_keep = max(2, int(np.sum(dist <= spec.traj_max_dist)))
    future = future[:n_keep]
    foot = np.concatenate([future, np.zeros((len(future), 1))], axis=1)
    traj = Trajectory(points=world_to_proxemic(foot, frame))

    scene_id = scene_id or f"frame_{frame_index:03d}"
    return SceneBundle(id=scene_id, rgb=rgb, depth=depth_img, camera=camera,
                       frame=frame, trajectory=traj)


def random_scene_spec(cls: str, seed: int, noise_sigma: float = 0.0,
                      jitter_deg: float = 2.0, roll_jitter_deg: float = 0.0,
                      floor_checker_amp: float | None = None,
                      noise_tex_amp: float = 0.0) -> SceneSpec:
    """Randomized layout for one corpus scene of the given class."""
    if cls not in CLASSES:
        raise ValueError(f"unknown scene class {cls!r}")
    rng = np.random.default_rng([seed, CLASSES.index(cls)])
    hw = float(rng.uniform(1.6, 2.6))
    length = float(rng.uniform(24.0, 36.0))
    branch = None
    if cls != "straight":
        side = 1 if cls == "right" else -1
        by = float(rng.uniform(4.5, 7.5))
        bw = float(rng.uniform(2.2, 3.2))
        # branch long enough that the full camera path fits inside it
        # (path length + margin, minus the straight leg and the crossing)
        need = 26 * 0.5 + 2.5 - (by - 0.8) - hw
        branch = (side, by, bw, float(max(10.0, need)))
    boxes = []
    if cls == "straight" and rng.random() < 0.5:
        # an off-path obstacle against one wall
        side = -1 if rng.random() < 0.5 else 1
        y0 = float(rng.uniform(5.0, 12.0))
        x_in = hw - float(rng.uniform(0.4, 0.9))
        boxes.append(((min(side * hw, side * x_in), y0, 0.0),
                      (max(side * hw, side * x_in), y0 + 1.0, 1.0)))
    # street-canyon backdrop: building slabs flanking the corridor and one
    # closing the view; keeps the upper image at finite textured depth
    backdrop = []
    for side in (-1, 1):
        y = 0.0
        while y < length:
            seg_len = float(rng.uniform(4.0, 9.0))
            h_b = float(rng.uniform(5.0, 12.0))
            x0 = side * (hw + 0.6)
            x1 = side * (hw + 2.2)
            backdrop.append(((min(x0, x1), y, 0.0), (max(x0, x1), y + seg_len, h_b)))
            y += seg_len + float(rng.uniform(0.0, 1.5))
    backdrop.append(((-hw - 4.0, length + 0.8, 0.0),
                     (hw + 4.0, length + 2.4, float(rng.uniform(7.0, 12.0)))))
    return SceneSpec(half_width=hw, length=length, branch=branch,
                     boxes=tuple(boxes), backdrop_boxes=tuple(backdrop),
                     palette_seed=seed,
                     pitch_deg=float(rng.uniform(6.0, 14.0)),
                     jitter_deg=jitter_deg, roll_jitter_deg=roll_jitter_deg,
                     floor_checker_amp=floor_checker_amp,
                     noise_tex_amp=noise_tex_amp,
                     noise_sigma=noise_sigma, seed=seed)


def heading_change_deg(spec: SceneSpec) -> float:
    """Net heading change along the camera path (left positive)."""
    path = _camera_path(spec)
    h0 = _heading(path, 0)
    h1 = _heading(path, len(path) - 1)
    cross_z = h0[0] * h1[1] - h0[1] * h1[0]
    return float(np.rad2deg(np.arctan2(cross_z, h0 @ h1)))


def make_corpus(root, seed: int, n_scenes: int,
                class_mix: dict | None = None, frame_index: int = 0,
                noise_sigma: float = 0.0, jitter_deg: float = 2.0,
                roll_jitter_deg: float = 0.0,
                floor_checker_amp: float | None = None,
                noise_tex_amp: float = 0.0,
                spec_overrides: dict | None = None) -> CorpusManifest:
    """Write ``n_scenes`` bundles + labels.json + specs.json under ``root``.

    ``spec_overrides`` force SceneSpec fields (e.g. pitch_deg) on every scene.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    mix = class_mix or {c: 1 for c in CLASSES}
    classes = [c for c in CLASSES if mix.get(c, 0) > 0]
    weights = np.array([mix[c] for c in classes], dtype=np.float64)
    # deterministic round-robin assignment proportional to weights
    quota = np.floor(weights / weights.sum() * n_scenes).astype(int)
    while quota.sum() < n_scenes:
        quota[int(np.argmax(weights / weights.sum() * n_scenes - quota))] += 1
    assignment = [c for c, q in zip(classes, quota) for _ in range(q)]

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    labels, specs, ids = {}, {}, []
    for i, cls in enumerate(assignment):
        spec = random_scene_spec(cls, seed=seed * 100003 + i,
                                 noise_sigma=noise_sigma, jitter_deg=jitter_deg,
                                 roll_jitter_deg=roll_jitter_deg,
                                 floor_checker_amp=floor_checker_amp,
                                 noise_tex_amp=noise_tex_amp)
        if spec_overrides:
            spec = dc_replace(spec, **spec_overrides)
        scene_id = f"scene_{i:03d}"
        bundle = render_scene(spec, frame_index, scene_id=scene_id)
        save_bundle(bundle, root / scene_id)
        labels[scene_id] = cls
        specs[scene_id] = {"spec": spec.to_json(), "frame_index": frame_index}
        ids.append(scene_id)
    manifest = CorpusManifest(root=root, scene_ids=ids)
    save_manifest(manifest)
    with open(root / "labels.json", "w") as f:
        json.dump(labels, f, indent=1)
    with open(root / "specs.json", "w") as f:
        json.dump(specs, f, indent=1)
    return manifest


def load_specs(root) -> dict:
    """id -> (SceneSpec, frame_index) for corpora written by make_corpus."""
    with open(Path(root) / "specs.json") as f:
        raw = json.load(f)
    return {sid: (SceneSpec.from_json(rec["spec"]), int(rec["frame_index"]))
            for sid, rec in raw.items()}
