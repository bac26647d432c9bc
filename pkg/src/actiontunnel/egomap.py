"""Overhead height map phi(r, theta) over the ground plane, plus ground-plane
estimation from depth.

The map bins every valid depth pixel into a log-range x angle grid and keeps
the MAXIMUM ground-local height per cell, so a single obstacle point is enough
to make a cell non-walkable. Cells that received no points are UNKNOWN and
query as +inf (unobserved space is treated as non-walkable).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import pfm
from .proxemic import GroundFrame, to_ground_local


class EmptyDepthError(ValueError):
    """No valid depth pixels to build from."""


class GroundFitError(ValueError):
    """Ground-plane consensus failed (too few inliers or samples)."""


@dataclass(frozen=True)
class HeightGridSpec:
    """Grid over r in [r_min, r_max], theta in [-theta_max, theta_max].

    The default covers the full circle: with g_y pinned to the walking
    velocity and theta = atan2(Y, X), the walking direction sits at
    theta = pi/2, so a half-circle grid centered on 0 would clip it. 256
    angular cells keep the resolution at 1.40625 degrees per cell.
    """

    r_min: float = float(np.log(0.5))
    r_max: float = float(np.log(20.0))
    theta_max: float = float(np.pi)
    n_r: int = 128
    n_theta: int = 256

    def __post_init__(self):
        if not (self.r_min < self.r_max):
            raise ValueError("r_min must be < r_max")
        if not (0.0 < self.theta_max <= np.pi):
            raise ValueError("theta_max must be in (0, pi]")
        if self.n_r < 2 or self.n_theta < 2:
            raise ValueError("grid needs at least 2 cells per axis")

    @property
    def dr(self) -> float:
        return (self.r_max - self.r_min) / self.n_r

    @property
    def dtheta(self) -> float:
        return 2.0 * self.theta_max / self.n_theta

    def cell_centers(self):
        r = self.r_min + (np.arange(self.n_r) + 0.5) * self.dr
        t = -self.theta_max + (np.arange(self.n_theta) + 0.5) * self.dtheta
        return r, t


@dataclass(frozen=True)
class HeightMap:
    """phi(r, theta): max scene height in meters per cell; NaN = UNKNOWN."""

    spec: HeightGridSpec
    cells: np.ndarray  # (n_r, n_theta) float32, NaN where unobserved

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=np.float32)
        if c.shape != (self.spec.n_r, self.spec.n_theta):
            raise ValueError("cells shape does not match grid spec")
        object.__setattr__(self, "cells", c)


def backproject_depth(depth, camera):
    """All valid depth pixels -> world points.

    Returns (points (N, 3), pixel indices (N, 2) as (row, col)). Depth is
    camera-z distance in meters; non-positive or NaN entries are invalid.
    """
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        return np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64)
    k_inv = np.linalg.inv(np.asarray(camera.K, dtype=np.float64))
    hom = np.stack([cols.astype(np.float64), rows.astype(np.float64),
                    np.ones_like(rows, dtype=np.float64)], axis=-1)
    cam = (hom @ k_inv.T) * d[rows, cols][:, None]
    r = np.asarray(camera.R, dtype=np.float64)
    world = cam @ r + np.asarray(camera.C, dtype=np.float64)
    return world, np.stack([rows, cols], axis=-1)


def build_height_map(bundle, spec: HeightGridSpec | None = None) -> HeightMap:
    """Bin the bundle's depth into phi(r, theta) with per-cell max height."""
    spec = spec or HeightGridSpec()
    world, _ = backproject_depth(bundle.depth, bundle.camera)
    if world.shape[0] == 0:
        raise EmptyDepthError("bundle has no valid depth pixels")
    local = to_ground_local(world, bundle.frame)
    rho = np.hypot(local[:, 0], local[:, 1])
    keep = rho > 1e-9
    local, rho = local[keep], rho[keep]
    r = np.log(rho)
    theta = np.arctan2(local[:, 1], local[:, 0])
    z = local[:, 2]

    ri = np.floor((r - spec.r_min) / spec.dr).astype(np.int64)
    ti = np.floor((theta + spec.theta_max) / spec.dtheta).astype(np.int64)
    inside = (ri >= 0) & (ri < spec.n_r) & (ti >= 0) & (ti < spec.n_theta)
    cells = np.full((spec.n_r, spec.n_theta), -np.inf, dtype=np.float64)
    np.maximum.at(cells, (ri[inside], ti[inside]), z[inside])
    cells[~np.isfinite(cells)] = np.nan
    return HeightMap(spec=spec, cells=cells.astype(np.float32))


def query_height(hmap: HeightMap, r, theta):
    """Bilinear phi lookup in meters; +inf outside the grid or where any
    contributing cell is UNKNOWN. Accepts scalars or arrays."""
    spec = hmap.spec
    r_in = np.asarray(r, dtype=np.float64)
    t_in = np.asarray(theta, dtype=np.float64)
    scalar = r_in.ndim == 0 and t_in.ndim == 0
    r_a, t_a = np.broadcast_arrays(np.atleast_1d(r_in), np.atleast_1d(t_in))

    out = np.full(r_a.shape, np.inf, dtype=np.float64)
    ok = ((r_a >= spec.r_min) & (r_a <= spec.r_max)
          & (t_a >= -spec.theta_max) & (t_a <= spec.theta_max))
    if np.any(ok):
        # continuous coordinates in units of cells, measured at cell centers
        fr = np.clip((r_a[ok] - spec.r_min) / spec.dr - 0.5, 0.0, spec.n_r - 1.0)
        ft = np.clip((t_a[ok] + spec.theta_max) / spec.dtheta - 0.5,
                     0.0, spec.n_theta - 1.0)
        r0 = np.floor(fr).astype(np.int64)
        t0 = np.floor(ft).astype(np.int64)
        r1 = np.minimum(r0 + 1, spec.n_r - 1)
        t1 = np.minimum(t0 + 1, spec.n_theta - 1)
        wr = fr - r0
        wt = ft - t0
        vals = np.zeros(fr.shape)
        bad = np.zeros(fr.shape, dtype=bool)
        cells = hmap.cells.astype(np.float64)
        for ci, (ii, jj, w) in enumerate([
                (r0, t0, (1 - wr) * (1 - wt)),
                (r0, t1, (1 - wr) * wt),
                (r1, t0, wr * (1 - wt)),
                (r1, t1, wr * wt)]):
            contrib = w > 1e-12
            v = cells[ii, jj]
            bad |= contrib & ~np.isfinite(v)
            vals += np.where(contrib, w * np.where(np.isfinite(v), v, 0.0), 0.0)
        vals[bad] = np.inf
        out[ok] = vals
    return float(out[()]) if scalar else out.reshape(np.broadcast(r_in, t_in).shape)


def estimate_ground_plane(depth, camera, inlier_thresh=0.05, iterations=500,
                          max_samples=4000, min_inlier_frac=0.20, seed=0):
    """Randomized 3-point plane consensus on the lower image half.

    Returns (up, height): unit plane normal oriented toward the camera and
    the camera's distance to the plane in meters.
    """
    d = np.asarray(depth, dtype=np.float64)
    h = d.shape[0]
    lower = np.full_like(d, np.nan)
    lower[h // 2:, :] = d[h // 2:, :]
    world, _ = backproject_depth(lower, camera)
    if world.shape[0] < 3:
        raise GroundFitError("fewer than 3 valid depth pixels in the lower half")

    rng = np.random.default_rng(seed)
    if world.shape[0] > max_samples:
        world = world[rng.choice(world.shape[0], max_samples, replace=False)]
    n_pts = world.shape[0]

    best_count = -1
    best_inliers = None
    for _ in range(iterations):
        idx = rng.choice(n_pts, 3, replace=False)
        p0, p1, p2 = world[idx]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        dist = np.abs((world - p0) @ n)
        inliers = dist < inlier_thresh
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < min_inlier_frac * n_pts:
        raise GroundFitError(
            f"insufficient ground inliers: {max(best_count, 0)}/{n_pts}")

    pts = world[best_inliers]
    centroid = pts.mean(axis=0)
    # least-squares refinement: smallest singular vector of centered points
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    up = vt[-1]
    c = np.asarray(camera.C, dtype=np.float64)
    if (c - centroid) @ up < 0:
        up = -up
    height = float((c - centroid) @ up)
    return up, height


def save_height_map(hmap: HeightMap, pfm_path, meta_path) -> None:
    """Debug export: phi as PFM plus the grid spec as a JSON sidecar."""
    pfm.write_pfm(pfm_path, hmap.cells)
    spec = hmap.spec
    meta = {"r_min": spec.r_min, "r_max": spec.r_max, "theta_max": spec.theta_max,
            "n_r": spec.n_r, "n_theta": spec.n_theta}
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1)


def load_height_map(pfm_path, meta_path) -> HeightMap:
    with open(meta_path) as f:
        meta = json.load(f)
    cells = pfm.read_pfm(pfm_path)
    return HeightMap(spec=HeightGridSpec(**meta), cells=cells)
