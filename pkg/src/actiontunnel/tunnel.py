"""ActionTunnel: cross-sections swept along a future walking trajectory, with
image texture lifted onto four surfaces per segment (floor, ceiling, left and
right walls), plus projection of the textured tunnel into rectified views.

Cross-section extents are found by marching perpendicular to the local
walking direction in metric ground coordinates until the height map reports a
non-walkable cell (first-obstacle semantics). Geometry is stored per segment
as bilinear corner grids in ground-local metric coordinates, so a rigid
ground transform (rotation about the vertical axis + translation) can re-seat
a tunnel into another scene's frame before projection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .egomap import HeightMap, query_height
from .proxemic import (GroundFrame, ProxemicPoint, RectifiedCamera,
                       from_ground_local, local_to_proxemic, proxemic_to_local,
                       rectify_image, _bilinear, _nearest)

SURFACES = ("floor", "ceiling", "left", "right")

# target screen-space spacing of splat samples, in pixels
_SPLAT_SPACING = 0.6
_MAX_SUBDIV = 64


class EmptyTunnelError(ValueError):
    """Operation requires a tunnel with at least one valid texel."""


@dataclass(frozen=True)
class Trajectory:
    """Future foot locations in proxemic coordinates (r, theta, 0)."""

    points: np.ndarray  # (F, 3) float64, h column all zero

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("trajectory must be an (F, 3) array")
        if p.shape[0] < 2:
            raise ValueError(f"trajectory needs F >= 2 points, got {p.shape[0]}")
        if not np.all(np.isfinite(p)):
            raise ValueError("trajectory has non-finite entries")
        if np.max(np.abs(p[:, 2])) > 1e-9:
            raise ValueError("trajectory points must have h = 0 (foot points)")
        steps = np.diff(self.ground_xy_of(p), axis=0)
        if np.any(np.linalg.norm(steps, axis=1) <= 1e-4):
            raise ValueError("consecutive trajectory points closer than 1e-4 m")
        object.__setattr__(self, "points", p)

    @staticmethod
    def ground_xy_of(points):
        rho = np.exp(points[:, 0])
        return np.stack([rho * np.cos(points[:, 1]),
                         rho * np.sin(points[:, 1])], axis=-1)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return self.points[:, 0]

    def ground_xy(self) -> np.ndarray:
        """(F, 2) metric ground positions."""
        return self.ground_xy_of(self.points)

    def resample(self, n: int) -> "Trajectory":
        """Arc-length uniform resampling in metric ground space."""
        if n < 2:
            raise ValueError("resample needs n >= 2")
        xy = self.ground_xy()
        seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        targets = np.linspace(0.0, s[-1], n)
        x = np.interp(targets, s, xy[:, 0])
        y = np.interp(targets, s, xy[:, 1])
        rho = np.hypot(x, y)
        pts = np.stack([np.log(rho), np.arctan2(y, x), np.zeros(n)], axis=-1)
        return Trajectory(points=pts)


@dataclass(frozen=True)
class TunnelParams:
    h_max: float = 0.3        # walkable height ceiling, meters
    alpha: float = 1.5        # tunnel ceiling = alpha * wearer height
    lambda_cap: float = 5.0   # max lateral march, meters
    d_lambda: float = 0.05    # march step, meters
    tex_u: int = 32           # texels along the trajectory, per segment
    tex_v: int = 256          # texels across each surface

    def __post_init__(self):
        if min(self.h_max, self.alpha, self.lambda_cap, self.d_lambda) <= 0:
            raise ValueError("tunnel parameters must be positive")
        if self.d_lambda >= self.lambda_cap:
            raise ValueError("march step must be smaller than the march cap")
        if self.tex_u < 1 or self.tex_v < 1:
            raise ValueError("texture resolution must be at least 1x1")


@dataclass(frozen=True)
class CrossSection:
    """Tunnel slice at one trajectory point: two bottom and two ceiling
    corners. ``degenerate`` marks a zero-width slice (foot point itself is
    not walkable)."""

    b1: ProxemicPoint
    b2: ProxemicPoint
    c1: ProxemicPoint
    c2: ProxemicPoint
    index: int
    t: ProxemicPoint
    degenerate: bool = False


@dataclass(frozen=True)
class SurfaceGeom:
    """One textured bilinear patch: corner grid in ground-local meters plus a
    per-texel color/validity grid."""

    grid: np.ndarray   # (u+1, v+1, 3) float64 ground-local corner points
    tex: np.ndarray    # (u, v, 3) float32 colors in [0, 1]
    valid: np.ndarray  # (u, v) bool


@dataclass(frozen=True)
class TunnelSegment:
    first_index: int                 # original index of the earlier section
    surfaces: dict                   # name -> SurfaceGeom
    range_key: float                 # mean trajectory range, painter ordering
    r_lo: float                      # min of the two section ranges
    r_hi: float                      # max of the two section ranges


@dataclass(frozen=True)
class ActionTunnel:
    sections: list
    segments: list
    trajectory: Trajectory
    frame: GroundFrame
    camera: RectifiedCamera
    image: np.ndarray        # rectified source view, (H, W, 3) uint8
    image_valid: np.ndarray  # (H, W) bool rectification validity
    params: TunnelParams

    @property
    def is_empty(self) -> bool:
        return not any(geom.valid.any()
                       for seg in self.segments for geom in seg.surfaces.values())


def _march_side(hmap: HeightMap, p0: np.ndarray, direction: np.ndarray,
                params: TunnelParams) -> float:
    """Largest clear lateral offset from ``p0`` along ``direction`` before the
    first non-walkable step; 0.0 when the very first step is blocked."""
    n_steps = int(np.floor((params.lambda_cap - 1e-12) / params.d_lambda))
    while n_steps * params.d_lambda >= params.lambda_cap:
        n_steps -= 1
    if n_steps < 1:
        return 0.0
    lam = (np.arange(1, n_steps + 1)) * params.d_lambda
    pts = p0[None, :] + lam[:, None] * direction[None, :]
    rho = np.hypot(pts[:, 0], pts[:, 1])
    r = np.where(rho > 1e-12, np.log(np.maximum(rho, 1e-12)), -np.inf)
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    phi = query_height(hmap, r, theta)
    walkable = (phi < params.h_max) & (rho > 1e-6)
    blocked = np.nonzero(~walkable)[0]
    if blocked.size == 0:
        return float(lam[-1])
    if blocked[0] == 0:
        return 0.0
    return float(lam[blocked[0] - 1])


def cross_section(hmap: HeightMap, traj: Trajectory, i: int,
                  frame: GroundFrame, params: TunnelParams) -> CrossSection:
    """Cross-section at trajectory point ``i`` (0-based). The tangent at the
    last point reuses the previous one."""
    if not (0 <= i < traj.size):
        raise IndexError(f"section index {i} outside trajectory of {traj.size}")
    xy = traj.ground_xy()
    j = i if i < traj.size - 1 else traj.size - 2
    tangent = xy[j + 1] - xy[j]
    tangent = tangent / np.linalg.norm(tangent)
    perp = np.array([-tangent[1], tangent[0]])  # +90 degrees on the ground

    t_pt = ProxemicPoint(*traj.points[i])
    p0 = xy[i]
    phi0 = query_height(hmap, t_pt.r, t_pt.theta)
    degenerate = not (phi0 < params.h_max)
    if degenerate:
        lam1 = lam2 = 0.0
    else:
        lam1 = _march_side(hmap, p0, perp, params)
        lam2 = _march_side(hmap, p0, -perp, params)

    h_off = params.alpha * frame.height / np.exp(t_pt.r)
    corners = []
    for lam, sign in ((lam1, 1.0), (lam2, -1.0)):
        if lam <= 0.0:
            b = t_pt
        else:
            q = p0 + sign * lam * perp
            b = ProxemicPoint(*local_to_proxemic(np.array([q[0], q[1], 0.0])))
        c = ProxemicPoint(b.r, b.theta, b.h + h_off)
        corners.append((b, c))
    (b1, c1), (b2, c2) = corners
    return CrossSection(b1=b1, b2=b2, c1=c1, c2=c2, index=i, t=t_pt,
                        degenerate=degenerate)


def _section_locals(sec: CrossSection):
    as_local = lambda p: proxemic_to_local(p.as_array())
    return {"b1": as_local(sec.b1), "b2": as_local(sec.b2),
            "c1": as_local(sec.c1), "c2": as_local(sec.c2)}


_SURFACE_CORNERS = {
    # surface -> (corner at s=0,t=0), (s=0,t=1), (s=1,t=0), (s=1,t=1)
    "floor": ("b1", "b2"),
    "ceiling": ("c1", "c2"),
    "left": ("b1", "c1"),
    "right": ("b2", "c2"),
}


def _patch_points(a0, a1, b0, b1, s, t):
    """Bilinear patch: rows follow s (section 0 -> 1), columns follow t."""
    s = s[:, None, None]
    t = t[None, :, None]
    start = (1 - t) * a0 + t * a1
    end = (1 - t) * b0 + t * b1
    return (1 - s) * start + s * end


def _lift_texture(grid_pts, camera: RectifiedCamera, image_f, image_valid):
    """Sample the rectified source image at projected 3D points."""
    world = from_ground_local(grid_pts, camera.frame)
    pix, depth = camera.project(world)
    x, y = pix[..., 0], pix[..., 1]
    colors, inside = _bilinear(image_f, x, y)
    src_ok, _ = _nearest(image_valid, x, y)
    valid = (depth > 1e-9) & inside & src_ok
    return colors.astype(np.float32), valid


def build_tunnel(bundle, hmap: HeightMap, params: TunnelParams | None = None,
                 known_mask=None) -> ActionTunnel:
    """Construct the textured tunnel for a scene bundle.

    The bundle's image is rectified internally; textures are lifted by
    projecting each surface's texel centers into the rectified view.
    ``known_mask`` (raw-space bool, True = usable pixel) optionally restricts
    which source pixels may contribute texture.
    """
    params = params or TunnelParams()
    traj = bundle.trajectory
    if traj.size < 2:
        raise ValueError("trajectory needs at least two points")
    frame = bundle.frame
    rect_img, rect_valid = rectify_image(bundle.rgb, bundle.camera, frame)
    if known_mask is not None:
        rk, rk_valid = rectify_image(np.asarray(known_mask, dtype=np.uint8),
                                     bundle.camera, frame, nearest=True)
        rect_valid = rect_valid & (rk > 0) & rk_valid
    camera = RectifiedCamera.for_camera(bundle.camera, frame)
    image_f = rect_img.astype(np.float32) / 255.0

    sections = [cross_section(hmap, traj, i, frame, params)
                for i in range(traj.size)]

    u, v = params.tex_u, params.tex_v
    s_edges = np.linspace(0.0, 1.0, u + 1)
    t_edges = np.linspace(0.0, 1.0, v + 1)
    s_mid = (np.arange(u) + 0.5) / u
    t_mid = (np.arange(v) + 0.5) / v

    segments = []
    for i in range(traj.size - 1):
        s0 = _section_locals(sections[i])
        s1 = _section_locals(sections[i + 1])
        # a segment between two zero-width slices has no surface area; its
        # splat would only smear 1-px streaks of stretched texture
        dead = sections[i].degenerate and sections[i + 1].degenerate
        surfaces = {}
        for name, (k0, k1) in _SURFACE_CORNERS.items():
            grid = _patch_points(s0[k0], s0[k1], s1[k0], s1[k1], s_edges, t_edges)
            centers = _patch_points(s0[k0], s0[k1], s1[k0], s1[k1], s_mid, t_mid)
            tex, valid = _lift_texture(centers, camera, image_f, rect_valid)
            if dead:
                valid = np.zeros_like(valid)
            surfaces[name] = SurfaceGeom(grid=grid, tex=tex, valid=valid)
        r_pair = (traj.points[i, 0], traj.points[i + 1, 0])
        segments.append(TunnelSegment(first_index=i, surfaces=surfaces,
                                      range_key=float(np.mean(r_pair)),
                                      r_lo=float(min(r_pair)),
                                      r_hi=float(max(r_pair))))
    return ActionTunnel(sections=sections, segments=segments, trajectory=traj,
                        frame=frame, camera=camera, image=rect_img,
                        image_valid=rect_valid, params=params)


def lift_from_image(bundle, hmap: HeightMap, params: TunnelParams | None = None) -> ActionTunnel:
    """Alias of :func:`build_tunnel`: lifting image texture onto tunnel
    geometry is the inverse of projecting the tunnel into the image."""
    return build_tunnel(bundle, hmap, params)


def transform_tunnel(tunnel: ActionTunnel, dtheta: float, dxy) -> ActionTunnel:
    """Apply a rigid ground transform (rotation about the vertical axis, then
    translation) to all tunnel geometry. Metric heights are preserved;
    proxemic h ratios are recomputed against the new radii.

    The returned tunnel's local coordinates live in the frame the transform
    maps into (typically another scene's ground frame).
    """
    dxy = np.asarray(dxy, dtype=np.float64)
    c, s = np.cos(dtheta), np.sin(dtheta)
    rot = np.array([[c, -s], [s, c]])

    def tf_local(pts):
        out = np.array(pts, dtype=np.float64, copy=True)
        out[..., :2] = out[..., :2] @ rot.T + dxy
        return out

    def tf_prox(p: ProxemicPoint) -> ProxemicPoint:
        return ProxemicPoint(*local_to_proxemic(tf_local(proxemic_to_local(p.as_array()))))

    sections = [replace(sec, b1=tf_prox(sec.b1), b2=tf_prox(sec.b2),
                        c1=tf_prox(sec.c1), c2=tf_prox(sec.c2), t=tf_prox(sec.t))
                for sec in tunnel.sections]
    traj_pts = local_to_proxemic(tf_local(proxemic_to_local(tunnel.trajectory.points)))
    traj_pts[:, 2] = 0.0
    trajectory = Trajectory(points=traj_pts)
    segments = []
    for seg, lo_sec, hi_sec in zip(tunnel.segments, sections[:-1], sections[1:]):
        surfaces = {name: SurfaceGeom(grid=tf_local(g.grid), tex=g.tex, valid=g.valid)
                    for name, g in seg.surfaces.items()}
        r_pair = (lo_sec.t.r, hi_sec.t.r)
        segments.append(replace(seg, surfaces=surfaces,
                                range_key=float(np.mean(r_pair)),
                                r_lo=float(min(r_pair)), r_hi=float(max(r_pair))))
    return replace(tunnel, sections=sections, segments=segments,
                   trajectory=trajectory)


def _splat_surface(geom: SurfaceGeom, target: RectifiedCamera,
                   img: np.ndarray, label_map: np.ndarray, label: int):
    """Forward-rasterize one surface into the canvas (in place)."""
    height, width = label_map.shape
    world = from_ground_local(geom.grid, target.frame)
    pix, depth = target.project(world)
    u, v = geom.tex.shape[:2]

    p00, p01 = pix[:-1, :-1], pix[:-1, 1:]
    p10, p11 = pix[1:, :-1], pix[1:, 1:]
    d_ok = ((depth[:-1, :-1] > 1e-9) & (depth[:-1, 1:] > 1e-9)
            & (depth[1:, :-1] > 1e-9) & (depth[1:, 1:] > 1e-9))
    corners = np.stack([p00, p01, p10, p11], axis=0)
    finite = np.all(np.isfinite(corners), axis=(0, 3))
    ok = geom.valid & d_ok & finite
    if not ok.any():
        return
    xs, ys = corners[..., 0], corners[..., 1]
    ok &= ((xs.max(0) >= -0.5) & (xs.min(0) <= width - 0.5)
           & (ys.max(0) >= -0.5) & (ys.min(0) <= height - 0.5))
    if not ok.any():
        return

    es = np.maximum(np.linalg.norm(p10 - p00, axis=-1),
                    np.linalg.norm(p11 - p01, axis=-1))
    et = np.maximum(np.linalg.norm(p01 - p00, axis=-1),
                    np.linalg.norm(p11 - p10, axis=-1))
    ns = np.clip(np.ceil(es / _SPLAT_SPACING), 1, _MAX_SUBDIV).astype(np.int64)
    nt = np.clip(np.ceil(et / _SPLAT_SPACING), 1, _MAX_SUBDIV).astype(np.int64)
    # round up to powers of two so texels group into few vectorized buckets
    ns = (2 ** np.ceil(np.log2(ns))).astype(np.int64)
    nt = (2 ** np.ceil(np.log2(nt))).astype(np.int64)

    ai, bi = np.nonzero(ok)
    buckets = {}
    key = ns[ai, bi] * (_MAX_SUBDIV * 2) + nt[ai, bi]
    for k in np.unique(key):
        buckets[k] = key == k

    c00 = p00[ai, bi]; c01 = p01[ai, bi]
    c10 = p10[ai, bi]; c11 = p11[ai, bi]
    for k, sel in buckets.items():
        n_s = int(k // (_MAX_SUBDIV * 2))
        n_t = int(k % (_MAX_SUBDIV * 2))
        so = (np.arange(n_s) + 0.5) / n_s
        to = (np.arange(n_t) + 0.5) / n_t
        w00 = np.outer(1 - so, 1 - to)
        w01 = np.outer(1 - so, to)
        w10 = np.outer(so, 1 - to)
        w11 = np.outer(so, to)
        pts = (c00[sel][:, None, None, :] * w00[None, :, :, None]
               + c01[sel][:, None, None, :] * w01[None, :, :, None]
               + c10[sel][:, None, None, :] * w10[None, :, :, None]
               + c11[sel][:, None, None, :] * w11[None, :, :, None])
        px = np.rint(pts[..., 0]).astype(np.int64).ravel()
        py = np.rint(pts[..., 1]).astype(np.int64).ravel()
        inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
        if not inside.any():
            continue
        # one Newton step in texture space so the color is sampled at the
        # rounded pixel center, not the raw sample position
        j_s = 0.5 * ((c10[sel] + c11[sel]) - (c00[sel] + c01[sel]))
        j_t = 0.5 * ((c01[sel] + c11[sel]) - (c00[sel] + c10[sel]))
        det = j_s[:, 0] * j_t[:, 1] - j_s[:, 1] * j_t[:, 0]
        safe = np.where(np.abs(det) > 1e-12, det, np.inf)[:, None, None]
        delta = np.stack([px.astype(np.float64), py.astype(np.float64)],
                         axis=-1).reshape(pts.shape) - pts
        ds = (j_t[:, 1, None, None] * delta[..., 0]
              - j_t[:, 0, None, None] * delta[..., 1]) / safe
        dt = (-j_s[:, 1, None, None] * delta[..., 0]
              + j_s[:, 0, None, None] * delta[..., 1]) / safe
        # bilinear texture filtering at the corrected texture-space position
        ty = ai[sel][:, None, None] + so[None, :, None] + ds - 0.5
        tx = bi[sel][:, None, None] + to[None, None, :] + dt - 0.5
        color, _ = _bilinear(geom.tex, tx, ty)
        color = color.reshape(-1, 3)[inside]
        px, py = px[inside], py[inside]
        img[py, px] = color
        label_map[py, px] = label


def paint_segments(items, target: RectifiedCamera):
    """Painter's pass over labeled segments.

    ``items`` is an iterable of (segment, label, priority). Segments are drawn
    far-to-near by decreasing range key; at equal range, higher priority wins
    (is drawn later). Returns (float image in [0,1], label map uint8).
    """
    img = np.zeros((target.height, target.width, 3), dtype=np.float32)
    label_map = np.zeros((target.height, target.width), dtype=np.uint8)
    ordered = sorted(items, key=lambda it: (-it[0].range_key, it[2]))
    for seg, label, _prio in ordered:
        for name in SURFACES:
            _splat_surface(seg.surfaces[name], target, img, label_map, label)
    return img, label_map


def tunnel_outline_polygons(tunnel: ActionTunnel,
                            target: RectifiedCamera | None = None) -> dict:
    """Projected overlay geometry: one image-space quad per cross-section and
    the floor's left/right boundary polylines. Vertices behind the camera are
    dropped from their polygon."""
    target = target or tunnel.camera

    def project_points(prox_points):
        local = proxemic_to_local(np.asarray(prox_points, dtype=np.float64))
        pix, depth = target.project(from_ground_local(local, target.frame))
        return pix, depth

    sections = []
    for sec in tunnel.sections:
        quad = [sec.b1.as_array(), sec.b2.as_array(),
                sec.c2.as_array(), sec.c1.as_array()]
        pix, depth = project_points(quad)
        sections.append([[float(x), float(y)]
                         for (x, y), d in zip(pix, depth) if d > 1e-9])
    edges = {}
    for name, attr in (("left", "b1"), ("right", "b2")):
        pts = [getattr(sec, attr).as_array() for sec in tunnel.sections]
        pix, depth = project_points(pts)
        edges[name] = [[float(x), float(y)]
                       for (x, y), d in zip(pix, depth) if d > 1e-9]
    return {"sections": sections, "floor_edges": edges}


def export_tunnel_mesh(tunnel: ActionTunnel, path) -> None:
    """Debug export: Wavefront-style text mesh, one labeled group per
    segment surface, vertices in ground-local metric coordinates."""
    lines = ["# action tunnel mesh (ground-local coordinates)"]
    n_verts = 0
    for seg in tunnel.segments:
        for name in SURFACES:
            g = seg.surfaces[name].grid
            corners = [g[0, 0], g[0, -1], g[-1, -1], g[-1, 0]]
            lines.append(f"g segment_{seg.first_index:03d}_{name}")
            for c in corners:
                lines.append(f"v {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
            lines.append(f"f {n_verts + 1} {n_verts + 2} {n_verts + 3} {n_verts + 4}")
            n_verts += 4
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def project_tunnel(tunnel: ActionTunnel, target: RectifiedCamera | None = None):
    """Render the textured tunnel into a rectified view.

    Returns (uint8 image, coverage mask); coverage marks pixels that received
    at least one valid texel. An empty tunnel renders to an all-zero coverage
    mask.
    """
    target = target or tunnel.camera
    img, labels = paint_segments(
        [(seg, 1, 1) for seg in tunnel.segments], target)
    coverage = labels > 0
    out = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out, coverage
