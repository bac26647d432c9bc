"""Masked-reconstruction benchmark: predict a masked region of one frame
from its remaining pixels plus a consecutive frame, and grade the prediction
with masked NCC (eta).

Methods: 2D pasting, 2D diffusion filling, 3D (rectified) pasting and
filling, a box-world transfer, and the full tunnel composition. All methods
in a trial share a bit-identical mask; the mask region of the evaluated frame
is never read by any method.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from .compose import ground_transform_between
from .egomap import build_height_map
from .gapfill import fill_diffusion
from .proxemic import (GroundFrame, ground_frame_from_motion, rectify_image,
                       unrectify_image, warp_homography)
from .scene_io import load_corpus
from .synthgen import load_specs, max_frame_index, render_scene
from .tunnel import (TunnelParams, build_tunnel, paint_segments,
                     transform_tunnel)

METHODS = ("paste2d", "fill2d", "paste3d", "fill3d", "box3d", "ours")


class NoEligiblePairsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    dts: tuple = (2, 4, 6, 8, 10)
    fractions: tuple = ()
    methods: tuple = METHODS
    mask_policy: str = "tunnel-band"   # or "disk"
    disk_fraction: float = 0.3
    disk_center_quantile: float = 0.45  # trajectory range the disk grows around
    min_mask_fraction: float = 0.6     # eligibility filter (tunnel-band only)
    seed: int = 0
    corpus_selector: str = "all"       # label filter; "all" keeps everything
    band_r_quantile: float = 0.3       # transitional point along the ranges
    band_dr: float = 0.15
    fill_tol: float = 0.5 / 255.0
    fill_iters: int = 400
    tunnel_params: TunnelParams = TunnelParams(tex_u=12, tex_v=160)

    def __post_init__(self):
        if len(self.dts) < 1 and len(self.fractions) < 1:
            raise ValueError("need at least one dt or missing fraction")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        if any(not (0.0 < f < 1.0) for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1)")


@dataclass(frozen=True)
class SweepRow:
    method: str
    param: float       # dt or missing fraction
    median: float
    std: float
    n: int


@dataclass(frozen=True)
class SweepReport:
    sweep: str              # "dt" or "fraction"
    rows: tuple

    def __post_init__(self):
        if any(r.n <= 0 for r in self.rows):
            raise ValueError("every report row needs n > 0")

    def cell(self, method: str, param: float) -> str:
        for r in self.rows:
            if r.method == method and r.param == param:
                return f"{r.median:.2f}({r.std:.2f})"
        raise KeyError((method, param))

    def median_of(self, method: str, param: float) -> float:
        for r in self.rows:
            if r.method == method and r.param == param:
                return r.median
        raise KeyError((method, param))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", self.sweep, "median", "std", "n"])
        for r in self.rows:
            w.writerow([r.method, r.param, f"{r.median:.6f}", f"{r.std:.6f}", r.n])
        return buf.getvalue()

    def to_text(self) -> str:
        params = sorted({r.param for r in self.rows})
        methods = []
        for r in self.rows:
            if r.method not in methods:
                methods.append(r.method)
        head = self.sweep.ljust(10) + "".join(f"{p:>14g}" for p in params)
        lines = [head]
        for m in methods:
            cells = []
            for p in params:
                try:
                    cells.append(f"{self.cell(m, p):>14}")
                except KeyError:
                    cells.append(f"{'-':>14}")
            lines.append(m.ljust(10) + "".join(cells))
        return "\n".join(lines)


def ncc(a, b, mask) -> float:
    """Masked normalized cross-correlation averaged over channels, in [-1, 1].

    Each channel is centered over the masked pixels; a channel whose centered
    vector (on either side) has vanishing norm contributes 0.
    """
    m = np.asarray(mask, dtype=bool)
    if int(m.sum()) < 2:
        raise ValueError("mask must select at least 2 pixels")
    fa = np.asarray(a, dtype=np.float64)
    fb = np.asarray(b, dtype=np.float64)
    if fa.ndim == 2:
        fa = fa[..., None]
    if fb.ndim == 2:
        fb = fb[..., None]
    total = 0.0
    n_ch = fa.shape[2]
    for ch in range(n_ch):
        av = fa[..., ch][m]
        bv = fb[..., ch][m]
        av = av - av.mean()
        bv = bv - bv.mean()
        na, nb = np.linalg.norm(av), np.linalg.norm(bv)
        if na < 1e-12 or nb < 1e-12:
            continue
        total += float(av @ bv / (na * nb))
    return total / n_ch


def _velocity_free_frame(bundle) -> GroundFrame:
    """Ground-aligned frame whose forward axis is the camera optical axis
    projected to the ground (the head direction, not the walking velocity)."""
    up = bundle.frame.g_z
    fwd = bundle.camera.R[2]
    c = bundle.camera.C
    return ground_frame_from_motion(c, c + fwd, up, bundle.frame.height)


def _rectify_mask(mask, camera, frame):
    warped, valid = rectify_image(mask.astype(np.uint8), camera, frame,
                                  nearest=True)
    return (warped > 0) & valid


def _band_mask(tunnel, r_split: float):
    """Rectified mask of everything the tunnel shows beyond ``r_split``:
    the region that changes when transitioning there."""
    items = [(seg, 1 if seg.r_hi < r_split else 3, 1) for seg in tunnel.segments]
    _img, labels = paint_segments(items, tunnel.camera)
    return labels == 3


def _disk_mask(shape, fraction: float, center=None):
    h, w = shape
    radius = np.sqrt(fraction * h * w / np.pi)
    if center is None:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    else:
        cy = float(np.clip(center[0], 0, h - 1))
        cx = float(np.clip(center[1], 0, w - 1))
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2


def _walkway_center(bundle, quantile=0.45):
    """Raw-image projection of the mid-range trajectory foot point; disks for
    the missing-data sweep grow around the action area."""
    from .proxemic import proxemic_to_world
    ranges = bundle.trajectory.ranges
    idx = int(np.argmin(np.abs(ranges - np.quantile(ranges, quantile))))
    world = proxemic_to_world(bundle.trajectory.points[idx], bundle.frame)
    cam = bundle.camera
    hom = cam.K @ (cam.R @ (world - cam.C))
    if hom[2] <= 1e-9:
        return None
    return (hom[1] / hom[2], hom[0] / hom[2])  # (row, col)


@dataclass
class _Trial:
    """Shared per-scene state so every method sees identical inputs."""
    bundle: object
    mask: np.ndarray            # raw-space mask, True = to predict
    hmap: object
    tunnel_masked: object       # tunnel of the masked present frame
    r_split: float
    dr: float
    mask_policy: str = "tunnel-band"


def _raw_band_mask(bundle, tunnel_full, r_split: float, dr: float):
    rect_mask = _band_mask(tunnel_full, r_split - dr)
    raw_mask, valid = unrectify_image(
        rect_mask.astype(np.uint8), bundle.camera, bundle.frame, nearest=True)
    return (raw_mask > 0) & valid


def _solve_r_split(bundle, tunnel_full, fraction: float, dr: float):
    """Transitional range whose band mask covers ``fraction`` of the image
    (the missing area grows as the transition approaches the wearer)."""
    ranges = bundle.trajectory.ranges
    lo = float(ranges.min()) - 1.0
    hi = float(ranges.max()) + 0.5
    f_lo = _raw_band_mask(bundle, tunnel_full, lo, dr).mean()
    if fraction >= f_lo:
        return lo, float(f_lo)
    for _ in range(24):
        mid = 0.5 * (lo + hi)
        f_mid = _raw_band_mask(bundle, tunnel_full, mid, dr).mean()
        if f_mid >= fraction:
            lo = mid
        else:
            hi = mid
    r = 0.5 * (lo + hi)
    return r, float(_raw_band_mask(bundle, tunnel_full, r, dr).mean())


def _make_trial(bundle, hmap, mask, r_split, config: EvalConfig,
                policy: str) -> "_Trial":
    tunnel_masked = None
    if "ours" in config.methods:
        masked_rgb = bundle.rgb.copy()
        masked_rgb[mask] = 0
        masked_bundle = dc_replace(bundle, rgb=masked_rgb)
        tunnel_masked = build_tunnel(masked_bundle, hmap, config.tunnel_params,
                                     known_mask=~mask)
    return _Trial(bundle=bundle, mask=np.asarray(mask, dtype=bool), hmap=hmap,
                  tunnel_masked=tunnel_masked, r_split=r_split,
                  dr=config.band_dr, mask_policy=policy)


def _prepare_trial(bundle, config: EvalConfig):
    hmap = build_height_map(bundle)
    ranges = bundle.trajectory.ranges
    r_split = float(np.quantile(ranges, config.band_r_quantile))
    if config.mask_policy == "tunnel-band":
        tunnel_full = build_tunnel(bundle, hmap, config.tunnel_params)
        mask = _raw_band_mask(bundle, tunnel_full, r_split, config.band_dr)
    elif config.mask_policy == "disk":
        mask = _disk_mask(bundle.rgb.shape[:2], config.disk_fraction,
                          center=_walkway_center(bundle,
                                                 config.disk_center_quantile))
    else:
        raise ValueError(f"unknown mask policy {config.mask_policy!r}")
    return _make_trial(bundle, hmap, mask, r_split, config, config.mask_policy)


def _fill(image, mask, config: EvalConfig):
    if not mask.any():
        return image.copy()
    if mask.all():
        return image.copy()
    return fill_diffusion(image, mask, tol=config.fill_tol,
                          max_iters=config.fill_iters)


def _paste2d(trial: _Trial, other, config):
    out = trial.bundle.rgb.copy()
    out[trial.mask] = other.rgb[trial.mask]
    return out


def _fill2d(trial: _Trial, other, config):
    return _fill(trial.bundle.rgb, trial.mask, config)


def _rect3d_common(trial: _Trial, other):
    fr1 = _velocity_free_frame(trial.bundle)
    rect1, valid1 = rectify_image(trial.bundle.rgb, trial.bundle.camera, fr1)
    mask1 = _rectify_mask(trial.mask, trial.bundle.camera, fr1)
    ctx = {"fr1": fr1, "rect1": rect1, "valid1": valid1, "mask1": mask1}
    if other is not None:
        fr2 = _velocity_free_frame(other)
        rect2, valid2 = rectify_image(other.rgb, other.camera, fr2)
        ctx.update(fr2=fr2, rect2=rect2, valid2=valid2)
    return ctx


def _finish_3d(trial: _Trial, rect_pred, config, frame=None):
    """Unrectify a prediction and composite it into the masked frame; mask
    pixels with no rectified counterpart fall back to raw-space diffusion."""
    un, un_valid = unrectify_image(rect_pred, trial.bundle.camera,
                                   frame or _velocity_free_frame(trial.bundle))
    out = trial.bundle.rgb.copy()
    paste = trial.mask & un_valid
    out[paste] = un[paste]
    leftover = trial.mask & ~un_valid
    if leftover.any() and not leftover.all():
        out = _fill(out, leftover, config)
    return out


def _paste3d(trial: _Trial, other, config):
    ctx = _rect3d_common(trial, other)
    pred = ctx["rect1"].copy()
    pred[ctx["mask1"]] = ctx["rect2"][ctx["mask1"]]
    return _finish_3d(trial, pred, config)


def _fill3d(trial: _Trial, other, config):
    ctx = _rect3d_common(trial, None)
    pred = _fill(ctx["rect1"], ctx["mask1"] & ctx["valid1"], config)
    return _finish_3d(trial, pred, config)


def _median_nonground_depth(bundle, frame: GroundFrame) -> float:
    from .egomap import backproject_depth
    pts, _ = backproject_depth(bundle.depth, bundle.camera)
    if pts.shape[0] == 0:
        return 10.0
    rel = pts - frame.origin
    height = rel @ frame.g_z
    forward = (pts - bundle.camera.C) @ frame.g_y
    sel = (height > 0.3) & (forward > 0.5)
    if not sel.any():
        return float(max(np.nanmax(bundle.depth) * 0.75, 1.0))
    return float(np.median(forward[sel]))


def _box3d(trial: _Trial, other, config):
    """Box-world transfer: ground + frontal far wall + two side walls, with
    textures pulled from the consecutive frame through each plane."""
    from .proxemic import RectifiedCamera, _bilinear
    bundle = trial.bundle
    ctx = _rect3d_common(trial, other)
    fr1, fr2 = ctx["fr1"], ctx["fr2"]
    cam1 = RectifiedCamera.for_camera(bundle.camera, fr1)
    cam2 = RectifiedCamera.for_camera(other.camera, fr2)

    h, w = bundle.rgb.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    dirs = cam1.pixel_rays(pix)

    c = cam1.C
    d_far = _median_nonground_depth(bundle, fr1)
    k = bundle.camera.K
    x_left = (0.0 - k[0, 2]) / k[0, 0] * d_far
    x_right = (w - 1 - k[0, 2]) / k[0, 0] * d_far

    d_dot_z = dirs @ fr1.g_z
    d_dot_y = dirs @ fr1.g_y
    d_dot_x = dirs @ fr1.g_x
    t_best = np.full((h, w), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in (
            np.where(d_dot_z < -1e-9, -fr1.height / d_dot_z, np.inf),
            np.where(d_dot_y > 1e-9, d_far / d_dot_y, np.inf),
            np.where(d_dot_x < -1e-9, x_left / d_dot_x, np.inf),
            np.where(d_dot_x > 1e-9, x_right / d_dot_x, np.inf),
        ):
            t_best = np.minimum(t_best, np.where(t > 1e-9, t, np.inf))
    hit = np.isfinite(t_best)
    points = c + t_best[..., None] * dirs

    pred = ctx["rect1"].astype(np.float64)
    pix2, depth2 = cam2.project(points)
    colors, inside = _bilinear(ctx["rect2"].astype(np.float64),
                               pix2[..., 0], pix2[..., 1])
    ok = hit & inside & (depth2 > 1e-9)
    paste = ctx["mask1"] & ok
    pred[paste] = colors[paste]
    pred = np.rint(np.clip(pred, 0, 255)).astype(np.uint8)
    leftover = ctx["mask1"] & ~ok
    pred = _fill(pred, leftover, config)
    return _finish_3d(trial, pred, config)


def _ours(trial: _Trial, other, config):
    """Tunnel composition: the masked frame's near tunnel plus the whole
    consecutive-frame tunnel re-seated by the known relative pose. Masked
    pixels the tunnels cannot speak for fall back to the consecutive frame's
    rectified view (the composite keeps the available image outside the
    tunnel), then any leftover is diffused."""
    t1 = trial.tunnel_masked
    hmap2 = build_height_map(other)
    t2 = build_tunnel(other, hmap2, config.tunnel_params)
    transform = ground_transform_between(trial.bundle.frame, other.frame)
    t2a = transform_tunnel(t2, transform.dtheta, transform.dxy)

    items = [(seg, 1, 1) for seg in t1.segments
             if seg.r_hi < trial.r_split]
    items += [(seg, 2, 0) for seg in t2a.segments]
    img, labels = paint_segments(items, t1.camera)
    covered = labels > 0
    backdrop = ~covered & t1.image_valid
    img[backdrop] = t1.image[backdrop].astype(np.float32) / 255.0
    composite = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)

    rect_mask = _rectify_mask(trial.mask, trial.bundle.camera,
                              trial.bundle.frame)
    holes = rect_mask & ~covered
    if holes.any():
        # the consecutive frame re-rectified into this frame's orientation
        k = np.asarray(other.camera.K)
        h_dst_src = k @ np.asarray(other.camera.R) @ t1.camera.R_bar.T \
            @ np.linalg.inv(k)
        rect2, v2 = warp_homography(other.rgb, h_dst_src,
                                    other.rgb.shape[:2])
        paste = holes & v2
        composite[paste] = rect2[paste]
        holes = holes & ~v2
    filled = _fill(composite, holes, config)
    un, un_valid = unrectify_image(filled, trial.bundle.camera,
                                   trial.bundle.frame)
    out = trial.bundle.rgb.copy()
    paste = trial.mask & un_valid
    out[paste] = un[paste]
    leftover = trial.mask & ~un_valid
    if leftover.any() and not leftover.all():
        out = _fill(out, leftover, config)
    return out


_METHOD_FNS = {"paste2d": _paste2d, "fill2d": _fill2d, "paste3d": _paste3d,
               "fill3d": _fill3d, "box3d": _box3d, "ours": _ours}


def baseline_reconstruct(method: str, bundle, other, mask, config=None):
    """Reconstruct the masked region of ``bundle`` from consecutive frame
    ``other``. Pixels outside the mask equal the input frame."""
    if method not in _METHOD_FNS:
        raise ValueError(f"unknown method {method!r}")
    config = config or EvalConfig()
    trial = _prepare_trial_with_mask(bundle, mask, config)
    return _METHOD_FNS[method](trial, other, config)


def _prepare_trial_with_mask(bundle, mask, config):
    hmap = build_height_map(bundle)
    masked_rgb = bundle.rgb.copy()
    masked_rgb[mask] = 0
    masked_bundle = dc_replace(bundle, rgb=masked_rgb)
    tunnel_masked = build_tunnel(masked_bundle, hmap, config.tunnel_params,
                                 known_mask=~mask)
    r_split = float(np.quantile(bundle.trajectory.ranges,
                                config.band_r_quantile))
    return _Trial(bundle=bundle, mask=np.asarray(mask, dtype=bool), hmap=hmap,
                  tunnel_masked=tunnel_masked, r_split=r_split,
                  dr=config.band_dr)


def _corpus_trials(corpus_root, config: EvalConfig):
    bundles = load_corpus(corpus_root)
    specs = load_specs(corpus_root)
    labels = {}
    labels_path = Path(corpus_root) / "labels.json"
    if labels_path.is_file():
        import json
        with open(labels_path) as f:
            labels = json.load(f)
    out = []
    for bundle in bundles:
        if config.corpus_selector != "all" and \
                labels.get(bundle.id) != config.corpus_selector:
            continue
        out.append((bundle, *specs[bundle.id]))
    return out


def _consecutive(spec, frame_index: int, dt: int):
    target = frame_index + dt
    if target > max_frame_index(spec):
        return None
    return render_scene(spec, target, scene_id=f"dt{dt:02d}")


def run_sweep(corpus_root, config: EvalConfig | None = None,
              progress=None) -> SweepReport:
    """eta over (method, dt) with the shared tunnel-band (or disk) mask."""
    config = config or EvalConfig()
    scenes = _corpus_trials(corpus_root, config)
    rows = []
    samples = {(m, dt): [] for m in config.methods for dt in config.dts}
    for bundle, spec, frame_index in scenes:
        trial = _prepare_trial(bundle, config)
        frac = float(trial.mask.mean())
        if config.mask_policy == "tunnel-band" and frac < config.min_mask_fraction:
            continue
        if int(trial.mask.sum()) < 2:
            continue
        for dt in config.dts:
            other = bundle if dt == 0 else _consecutive(spec, frame_index, dt)
            if other is None:
                continue
            for method in config.methods:
                recon = _METHOD_FNS[method](trial, other, config)
                eta = ncc(bundle.rgb, recon, trial.mask)
                samples[(method, dt)].append(eta)
            if progress:
                progress(bundle.id, dt)
    for method in config.methods:
        for dt in config.dts:
            vals = samples[(method, dt)]
            if not vals:
                continue
            rows.append(SweepRow(method=method, param=float(dt),
                                 median=float(np.median(vals)),
                                 std=float(np.std(vals)), n=len(vals)))
    if not rows:
        raise NoEligiblePairsError("no eligible scene pairs for the sweep")
    return SweepReport(sweep="dt", rows=tuple(rows))


def missing_data_sweep(corpus_root, fractions, methods=None, dt: int = 2,
                       config: EvalConfig | None = None,
                       progress=None) -> SweepReport:
    """eta over (method, missing fraction) at a fixed frame offset.

    With the default tunnel-band policy the missing fraction is controlled by
    moving the transitional range toward the wearer (the band area grows
    quadratically as it approaches); the disk policy instead grows a disk
    around the walkway. Scenes that cannot reach a requested fraction within
    0.08 are skipped for that fraction.
    """
    if not fractions:
        raise ValueError("empty fraction list")
    base = config or EvalConfig()
    methods = tuple(methods or base.methods)
    cfg = dc_replace(base, methods=methods)
    scenes = _corpus_trials(corpus_root, cfg)
    samples = {(m, f): [] for m in methods for f in fractions}
    for bundle, spec, frame_index in scenes:
        other = bundle if dt == 0 else _consecutive(spec, frame_index, dt)
        if other is None:
            continue
        hmap = build_height_map(bundle)
        tunnel_full = None
        if cfg.mask_policy == "tunnel-band":
            # doubled trajectory sampling: halves the band-area quantum so
            # small target fractions stay reachable
            fine = dc_replace(bundle, trajectory=bundle.trajectory.resample(
                2 * bundle.trajectory.size - 1))
            tunnel_full = build_tunnel(fine, hmap, cfg.tunnel_params)
        for frac in fractions:
            if cfg.mask_policy == "tunnel-band":
                r_split, got = _solve_r_split(bundle, tunnel_full, float(frac),
                                              cfg.band_dr)
                if abs(got - frac) > max(0.06, 0.25 * frac):
                    continue
                mask = _raw_band_mask(bundle, tunnel_full, r_split, cfg.band_dr)
                trial = _make_trial(bundle, hmap, mask, r_split, cfg,
                                    "tunnel-band")
            else:
                mask = _disk_mask(bundle.rgb.shape[:2], float(frac),
                                  center=_walkway_center(
                                      bundle, cfg.disk_center_quantile))
                trial = _make_trial(bundle, hmap, mask,
                                    float(np.quantile(bundle.trajectory.ranges,
                                                      cfg.band_r_quantile)),
                                    cfg, "disk")
            if int(trial.mask.sum()) < 200:
                continue
            for method in methods:
                recon = _METHOD_FNS[method](trial, other, cfg)
                eta = ncc(bundle.rgb, recon, trial.mask)
                samples[(method, frac)].append(eta)
            if progress:
                progress(bundle.id, frac)
    rows = []
    for method in methods:
        for frac in fractions:
            vals = samples[(method, frac)]
            if not vals:
                continue
            rows.append(SweepRow(method=method, param=float(frac),
                                 median=float(np.median(vals)),
                                 std=float(np.std(vals)), n=len(vals)))
    if not rows:
        raise NoEligiblePairsError("no eligible scene pairs for the sweep")
    return SweepReport(sweep="fraction", rows=tuple(rows))
