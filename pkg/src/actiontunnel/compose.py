"""Composing two tunnels at a transitional range R: segment the present
tunnel below the band, the future tunnel beyond it, align them rigidly on the
ground, render both in one painter pass, and mark the adjoining band as the
changeable (missing) region. Also generates self-supervised training pairs by
carving the band out of a single scene's own tunnel.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .egomap import build_height_map
from .tunnel import (ActionTunnel, Trajectory, TunnelParams, build_tunnel,
                     paint_segments, transform_tunnel)

# provenance tags
SOURCE_SCENE1 = 1   # present tunnel, or backdrop copied from scene 1
SOURCE_SCENE2 = 2   # retrieved future tunnel
SOURCE_MISSING = 3  # adjoining band, to be filled


class AlignmentWindowError(ValueError):
    """No trajectory point close enough to the transitional range."""


@dataclass(frozen=True)
class GroundTransform:
    """Rigid ground motion: rotate by dtheta about the vertical axis, then
    translate by dxy (metric meters). Maps tunnel-2 coordinates into the
    target scene's ground frame."""

    dtheta: float = 0.0
    dxy: tuple = (0.0, 0.0)

    @classmethod
    def identity(cls) -> "GroundTransform":
        return cls()

    def apply_xy(self, xy: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.dtheta), np.sin(self.dtheta)
        rot = np.array([[c, -s], [s, c]])
        return xy @ rot.T + np.asarray(self.dxy, dtype=np.float64)


@dataclass(frozen=True)
class TransitionSpec:
    """Transitional range R with band half-width dR (both log-meters) and the
    rigid alignment applied to the future tunnel."""

    R: float
    dR: float
    align: GroundTransform = field(default_factory=GroundTransform.identity)

    def __post_init__(self):
        if not np.isfinite(self.R):
            raise ValueError("transitional point R must be finite")
        if not (np.isfinite(self.dR) and self.dR >= 0):
            raise ValueError("band half-width dR must be >= 0")


@dataclass(frozen=True)
class CompositeResult:
    image: np.ndarray          # (H, W, 3) uint8 rectified composite
    missing: np.ndarray        # (H, W) bool: adjoining-band pixels
    provenance: np.ndarray     # (H, W) uint8: SOURCE_* tags
    kept_coverage: np.ndarray  # (H, W) bool: covered by a kept tunnel segment

    def __post_init__(self):
        if not np.array_equal(self.missing, self.provenance == SOURCE_MISSING):
            raise ValueError("missing mask must equal provenance == missing")


def split_tunnel(tunnel: ActionTunnel, R: float, dR: float, side: str) -> ActionTunnel:
    """Keep the near (t_r < R - dR) or far (t_r > R + dR) sections.

    Segment textures survive only between sections that remain adjacent.
    The trajectory field is left untouched (section indices identify the
    kept slice); empty splits are allowed.
    """
    if side not in ("near", "far"):
        raise ValueError("side must be 'near' or 'far'")
    ranges = tunnel.trajectory.ranges
    if side == "near":
        keep = ranges < R - dR
    else:
        keep = ranges > R + dR
    sections = [sec for sec in tunnel.sections if keep[sec.index]]
    segments = [seg for seg in tunnel.segments
                if keep[seg.first_index] and keep[seg.first_index + 1]]
    return ActionTunnel(sections=sections, segments=segments,
                        trajectory=tunnel.trajectory, frame=tunnel.frame,
                        camera=tunnel.camera, image=tunnel.image,
                        image_valid=tunnel.image_valid, params=tunnel.params)


def _tangents(xy: np.ndarray) -> np.ndarray:
    d = np.diff(xy, axis=0)
    d = np.concatenate([d, d[-1:]], axis=0)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def align_tunnels(t1: ActionTunnel, t2: ActionTunnel, R: float,
                  window: float = 0.75) -> GroundTransform:
    """Closed-form rigid alignment of tunnel 2 onto tunnel 1 at range R.

    The rotation matches the trajectory tangents at each tunnel's point
    nearest to r = R; the translation then matches the positions, giving a
    C0 junction with matched heading.
    """
    idx = []
    for t in (t1, t2):
        gaps = np.abs(t.trajectory.ranges - R)
        i = int(np.argmin(gaps))
        if gaps[i] >= window:
            raise AlignmentWindowError(
                f"no trajectory point within {window} log-meters of R={R}")
        idx.append(i)
    xy1, xy2 = t1.trajectory.ground_xy(), t2.trajectory.ground_xy()
    u1 = _tangents(xy1)[idx[0]]
    u2 = _tangents(xy2)[idx[1]]
    dtheta = float(np.arctan2(u2[0] * u1[1] - u2[1] * u1[0], u2 @ u1))
    c, s = np.cos(dtheta), np.sin(dtheta)
    rot = np.array([[c, -s], [s, c]])
    dxy = xy1[idx[0]] - rot @ xy2[idx[1]]
    return GroundTransform(dtheta=dtheta, dxy=(float(dxy[0]), float(dxy[1])))


def ground_transform_between(frame1, frame2) -> GroundTransform:
    """Exact rigid ground motion mapping frame-2 local coordinates into
    frame-1 local coordinates, from known world poses (both frames share the
    up direction)."""
    # rotation of frame2's ground axes expressed in frame1's ground basis
    r11 = frame1.g_x @ frame2.g_x
    r12 = frame1.g_x @ frame2.g_y
    dtheta = float(np.arctan2(-r12, r11))
    d = frame2.origin - frame1.origin
    dxy = (float(frame1.g_x @ d), float(frame1.g_y @ d))
    return GroundTransform(dtheta=dtheta, dxy=dxy)


def junction_mismatch(t1: ActionTunnel, t2: ActionTunnel,
                      transform: GroundTransform, R: float,
                      window: float = 0.75) -> float:
    """Squared position + tangent mismatch at the junction after applying
    ``transform`` to tunnel 2."""
    idx = []
    for t in (t1, t2):
        gaps = np.abs(t.trajectory.ranges - R)
        i = int(np.argmin(gaps))
        if gaps[i] >= window:
            raise AlignmentWindowError(
                f"no trajectory point within {window} log-meters of R={R}")
        idx.append(i)
    xy1, xy2 = t1.trajectory.ground_xy(), t2.trajectory.ground_xy()
    p2 = transform.apply_xy(xy2)
    u1 = _tangents(xy1)[idx[0]]
    u2 = _tangents(p2)[idx[1]]
    pos = np.sum((p2[idx[1]] - xy1[idx[0]]) ** 2)
    tan = np.sum((u2 - u1) ** 2)
    return float(pos + tan)


def _classify(tunnel: ActionTunnel, R: float, dR: float, role: str):
    """Split a tunnel's segments into kept / band lists for composition."""
    kept, band = [], []
    for seg in tunnel.segments:
        if role == "near":
            if seg.r_hi < R - dR:
                kept.append(seg)
            elif seg.r_lo <= R + dR:
                band.append(seg)
            # fully beyond the band: replaced by the future tunnel
        else:
            if seg.r_lo > R + dR:
                kept.append(seg)
            elif seg.r_hi >= R - dR:
                band.append(seg)
            # fully before the band: replaced by the present tunnel
    return kept, band


def compose(t1: ActionTunnel, t2: ActionTunnel, spec: TransitionSpec,
            target=None) -> CompositeResult:
    """Render present-near + aligned-future-far tunnels into scene 1's
    rectified view.

    The adjoining band (segments whose range interval meets
    [R - dR, R + dR]) is rendered for occlusion and provenance but its pixels
    are blanked and tagged missing. Pixels outside both tunnels are copied
    from scene 1's rectified image (backdrop, tagged as scene 1). At equal
    painter range the present tunnel wins ties.
    """
    target = target or t1.camera
    t2a = transform_tunnel(t2, spec.align.dtheta, spec.align.dxy)
    kept1, band1 = _classify(t1, spec.R, spec.dR, "near")
    kept2, band2 = _classify(t2a, spec.R, spec.dR, "far")
    if not kept1 and not kept2:
        raise ValueError("both tunnel segments are empty after the split")

    items = ([(seg, SOURCE_SCENE1, 1) for seg in kept1]
             + [(seg, SOURCE_MISSING, 1) for seg in band1]
             + [(seg, SOURCE_SCENE2, 0) for seg in kept2]
             + [(seg, SOURCE_MISSING, 0) for seg in band2])
    img, labels = paint_segments(items, target)

    kept_cov = (labels == SOURCE_SCENE1) | (labels == SOURCE_SCENE2)
    missing = labels == SOURCE_MISSING
    backdrop = labels == 0
    if backdrop.any() and t1.image.shape[:2] == (target.height, target.width):
        img[backdrop] = t1.image[backdrop].astype(np.float32) / 255.0
    img[missing] = 0.0
    provenance = labels.copy()
    provenance[backdrop] = SOURCE_SCENE1
    out = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return CompositeResult(image=out, missing=missing, provenance=provenance,
                           kept_coverage=kept_cov)


def save_composite(result: CompositeResult, directory, stem: str = "composite"):
    """Export composite / missing-mask / provenance PNG triple."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result.image, mode="RGB").save(directory / f"{stem}.png")
    Image.fromarray((result.missing * np.uint8(255)),
                    mode="L").save(directory / f"{stem}_missing.png")
    pal = Image.fromarray(result.provenance, mode="P")
    pal.putpalette([0, 0, 0, 60, 120, 216, 216, 150, 60, 230, 60, 60]
                   + [0] * (256 - 4) * 3)
    pal.save(directory / f"{stem}_provenance.png")
    return directory / f"{stem}.png"


def make_training_pair(bundle, hmap=None, params: TunnelParams | None = None,
                       R: float | None = None, dR: float | None = None,
                       rng=None):
    """Self-supervised pair: (masked render, rectified target, valid mask).

    The same scene plays both present and future: sections whose range falls
    inside the open band (R - dR, R + dR) are dropped and the remaining
    tunnel is re-rendered, leaving the band black. Unset R / dR are sampled
    (R uniform over the middle 60% of the trajectory range, dR uniform in
    [0.05, 0.4] log-meters) from ``rng``.
    """
    params = params or TunnelParams()
    hmap = hmap if hmap is not None else build_height_map(bundle)
    tunnel = build_tunnel(bundle, hmap, params)
    ranges = tunnel.trajectory.ranges
    lo, hi = float(ranges.min()), float(ranges.max())
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if R is None:
        R = float(gen.uniform(lo + 0.2 * (hi - lo), lo + 0.8 * (hi - lo)))
    if dR is None:
        dR = float(gen.uniform(0.05, 0.4))

    keep = ~((ranges > R - dR) & (ranges < R + dR))
    segments = [seg for seg in tunnel.segments
                if keep[seg.first_index] and keep[seg.first_index + 1]]
    if not segments:
        raise ValueError("band removes the entire tunnel")
    img, _labels = paint_segments([(seg, 1, 1) for seg in segments],
                                  tunnel.camera)
    masked = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return masked, tunnel.image, tunnel.image_valid


def export_training_pairs(bundles, out_dir, n_per_scene: int = 4, seed: int = 0,
                          params: TunnelParams | None = None) -> list:
    """Write masked.png / target.png / mask.png sample triples, one directory
    per sample, plus an index.json. This is the dataset surface consumed by
    the learned filler."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sample_dirs = []
    rng = np.random.default_rng(seed)
    for bundle in bundles:
        hmap = build_height_map(bundle)
        for j in range(n_per_scene):
            try:
                masked, target, valid = make_training_pair(
                    bundle, hmap, params, rng=rng)
            except ValueError as e:
                warnings.warn(f"skipping pair {bundle.id}/{j}: {e}")
                continue
            d = out_dir / f"{bundle.id}_{j:02d}"
            d.mkdir(exist_ok=True)
            Image.fromarray(masked, mode="RGB").save(d / "masked.png")
            Image.fromarray(target, mode="RGB").save(d / "target.png")
            Image.fromarray(valid.astype(np.uint8) * 255,
                            mode="L").save(d / "mask.png")
            sample_dirs.append(d)
    with open(out_dir / "index.json", "w") as f:
        json.dump([str(d.name) for d in sample_dirs], f, indent=1)
    return sample_dirs
