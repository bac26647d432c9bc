"""Log-cylindrical proxemic coordinates, ground frames, and view rectification.

The proxemic space is a log-cylindrical coordinate system centered on the
wearer's vertical axis: a ground-local point (X, Y, Z) maps to
(r, theta, h) = (ln rho, atan2(Y, X), Z / rho) with rho = sqrt(X^2 + Y^2).
The log radius emphasizes near-field geometry, where walking decisions live.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Points closer than this to the wearer's vertical axis have no well-defined
# (r, theta); they are rejected, not clamped.
AXIS_EPS = 1e-6

ORTHO_TOL = 1e-9


class DegenerateMotionError(ValueError):
    """Velocity is zero or vertical; no ground heading can be derived."""


class AxisSingularityError(ValueError):
    """Point lies on (or numerically at) the cylinder axis."""


@dataclass(frozen=True)
class GroundFrame:
    """Ground-plane basis: origin on the ground, g_y along walking velocity,
    g_z the up normal, g_x completing the right-handed triad. ``height`` is
    the camera height above the ground in meters."""

    origin: np.ndarray   # (3,) ground-plane origin, meters
    g_x: np.ndarray      # (3,) unit
    g_y: np.ndarray      # (3,) unit, walking direction
    g_z: np.ndarray      # (3,) unit, ground normal (up)
    height: float        # camera height above ground, meters

    def __post_init__(self):
        for name in ("origin", "g_x", "g_y", "g_z"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"GroundFrame.{name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        for name in ("g_x", "g_y", "g_z"):
            n = np.linalg.norm(getattr(self, name))
            if abs(n - 1.0) > 1e-9:
                raise ValueError(f"GroundFrame.{name} is not unit length (|v|={n!r})")
        cross = np.cross(self.g_x, self.g_y)
        if np.max(np.abs(cross - self.g_z)) > 1e-9:
            raise ValueError("GroundFrame basis is not right-handed: g_z != g_x x g_y")
        if not (np.isfinite(self.height) and self.height > 0):
            raise ValueError("GroundFrame.height must be positive")

    @property
    def basis(self) -> np.ndarray:
        """3x3 matrix with rows g_x, g_y, g_z (world -> ground-local)."""
        return np.stack([self.g_x, self.g_y, self.g_z])


@dataclass(frozen=True)
class ProxemicPoint:
    """One point in log-cylindrical coordinates."""

    r: float        # log-meters
    theta: float    # radians, normalized into (-pi, pi]
    h: float        # height ratio Z / rho, dimensionless

    def __post_init__(self):
        if not (np.isfinite(self.r) and np.isfinite(self.theta) and np.isfinite(self.h)):
            raise ValueError("ProxemicPoint components must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def rho(self) -> float:
        return float(np.exp(self.r))

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.h], dtype=np.float64)


def wrap_angle(theta):
    """Normalize angles into (-pi, pi]."""
    t = np.asarray(theta, dtype=np.float64)
    out = np.remainder(t + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return float(out) if np.isscalar(theta) or t.ndim == 0 else out


def ground_frame_from_motion(c_t, c_next, up, height: float) -> GroundFrame:
    """Build the ground frame at camera position ``c_t`` moving toward ``c_next``.

    g_z is ``up``; g_y is the unit ground-projection of the velocity; the
    frame origin sits on the ground directly below the camera.
    """
    c_t = np.asarray(c_t, dtype=np.float64)
    c_next = np.asarray(c_next, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    v = c_next - c_t
    v_ground = v - up * (up @ v)
    n = np.linalg.norm(v_ground)
    if n <= AXIS_EPS:
        raise DegenerateMotionError(
            f"ground-projected velocity has norm {n:.3e} <= {AXIS_EPS}")
    g_y = v_ground / n
    g_x = np.cross(g_y, up)
    g_x = g_x / np.linalg.norm(g_x)
    origin = c_t - height * up
    return GroundFrame(origin=origin, g_x=g_x, g_y=g_y, g_z=up, height=float(height))


def to_ground_local(points, frame: GroundFrame) -> np.ndarray:
    """World points (..., 3) -> ground-local (X, Y, Z)."""
    p = np.asarray(points, dtype=np.float64)
    return (p - frame.origin) @ frame.basis.T


def from_ground_local(points, frame: GroundFrame) -> np.ndarray:
    """Ground-local (X, Y, Z) -> world points (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    return p @ frame.basis + frame.origin


def local_to_proxemic(local) -> np.ndarray:
    """Ground-local (..., 3) -> proxemic (r, theta, h). Rejects axis points."""
    p = np.asarray(local, dtype=np.float64)
    rho = np.hypot(p[..., 0], p[..., 1])
    if np.any(rho <= AXIS_EPS):
        raise AxisSingularityError(
            f"point with rho <= {AXIS_EPS} m lies on the cylinder axis")
    r = np.log(rho)
    theta = np.arctan2(p[..., 1], p[..., 0])
    h = p[..., 2] / rho
    return np.stack([r, theta, h], axis=-1)


def proxemic_to_local(prox) -> np.ndarray:
    """Proxemic (r, theta, h) -> ground-local (X, Y, Z)."""
    p = np.asarray(prox, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("proxemic coordinates must be finite")
    rho = np.exp(p[..., 0])
    x = rho * np.cos(p[..., 1])
    y = rho * np.sin(p[..., 1])
    z = p[..., 2] * rho
    return np.stack([x, y, z], axis=-1)


def world_to_proxemic(x, frame: GroundFrame):
    """World point(s) -> proxemic (r, theta, h).

    Accepts a single 3-vector or an (..., 3) array; returns the same shape.
    """
    return local_to_proxemic(to_ground_local(x, frame))


def proxemic_to_world(p, frame: GroundFrame):
    """Proxemic (r, theta, h) point(s) -> world coordinates. Inverse of
    :func:`world_to_proxemic` away from the axis singularity."""
    if isinstance(p, ProxemicPoint):
        p = p.as_array()
    return from_ground_local(proxemic_to_local(p), frame)


def rectifying_rotation(frame: GroundFrame) -> np.ndarray:
    """Rectified camera orientation: rows (g_x, -g_z, g_y).

    A camera with this world->camera rotation looks along the walking
    direction with its image y-axis anti-parallel to the ground normal, which
    pins vanishing lines regardless of head pitch and roll.
    """
    r_bar = np.stack([frame.g_x, -frame.g_z, frame.g_y])
    return r_bar


@dataclass(frozen=True)
class RectifiedCamera:
    """Rectified pinhole view: intrinsics K, orientation R_bar, center C."""

    K: np.ndarray        # (3,3)
    R_bar: np.ndarray    # (3,3) world->camera
    C: np.ndarray        # (3,) optical center, world meters
    width: int
    height: int
    frame: GroundFrame

    @classmethod
    def for_camera(cls, camera, frame: GroundFrame) -> "RectifiedCamera":
        return cls(K=np.asarray(camera.K, dtype=np.float64),
                   R_bar=rectifying_rotation(frame),
                   C=np.asarray(camera.C, dtype=np.float64),
                   width=int(camera.width), height=int(camera.height),
                   frame=frame)

    def project(self, points_world):
        """Project world points (..., 3); returns (pixels (..., 2), depth).

        ``depth`` is the projective scale; points with depth <= 0 lie behind
        the camera and their pixel coordinates are meaningless.
        """
        p = np.asarray(points_world, dtype=np.float64)
        cam = (p - self.C) @ self.R_bar.T
        hom = cam @ self.K.T
        depth = hom[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = hom[..., :2] / depth[..., None]
        return pix, depth

    def pixel_rays(self, pixels):
        """Unit-scale world ray directions through pixels (..., 2); the ray
        parameter equals camera-z depth."""
        pix = np.asarray(pixels, dtype=np.float64)
        hom = np.concatenate([pix, np.ones(pix.shape[:-1] + (1,))], axis=-1)
        d_cam = hom @ np.linalg.inv(self.K).T
        return d_cam @ self.R_bar


def ray_ground_point(camera: RectifiedCamera, u: float, v: float) -> np.ndarray:
    """Proxemic foot point under a rectified-image pixel (u, v): intersect the
    pixel ray with the ground plane. Raises for rays at or above the horizon."""
    d = camera.pixel_rays(np.array([float(u), float(v)]))
    frame = camera.frame
    dz = d @ frame.g_z
    if dz >= -1e-9:
        raise ValueError("pixel ray does not meet the ground (at/above horizon)")
    t = -((camera.C - frame.origin) @ frame.g_z) / dz
    if t <= 0:
        raise ValueError("ground intersection behind the camera")
    point = camera.C + t * d
    return world_to_proxemic(point, frame)


def _bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``image`` at float coords; returns (values, inside-mask)."""
    h, w = image.shape[:2]
    inside = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None] if image.ndim == 3 else (xc - x0)
    fy = (yc - y0)[..., None] if image.ndim == 3 else (yc - y0)
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def _nearest(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    h, w = image.shape[:2]
    inside = (x >= -0.5) & (x <= w - 0.5) & (y >= -0.5) & (y <= h - 0.5)
    xi = np.clip(np.rint(x).astype(np.int64), 0, w - 1)
    yi = np.clip(np.rint(y).astype(np.int64), 0, h - 1)
    return image[yi, xi], inside


def warp_homography(image, H_dst_to_src, out_shape, nearest=False):
    """Inverse-warp ``image`` through a destination->source homography.

    Returns (warped, mask); mask marks destination pixels whose source
    coordinate lies in front of the camera and inside the source image.
    Color uses bilinear sampling, ``nearest=True`` is for masks and labels.
    """
    out_h, out_w = out_shape
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    ones = np.ones_like(xs)
    dst = np.stack([xs, ys, ones], axis=-1)
    src = dst @ np.asarray(H_dst_to_src, dtype=np.float64).T
    w = src[..., 2]
    front = w > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(front, src[..., 0] / w, -1.0)
        sy = np.where(front, src[..., 1] / w, -1.0)
    if nearest:
        values, inside = _nearest(image, sx, sy)
    else:
        values, inside = _bilinear(image, sx, sy)
    mask = front & inside
    if values.ndim == 3:
        values = values * mask[..., None]
    else:
        values = values * mask
    if np.issubdtype(np.asarray(image).dtype, np.integer) and not nearest:
        values = np.rint(values).astype(np.asarray(image).dtype)
    else:
        values = values.astype(np.asarray(image).dtype)
    return values, mask


def _check_intrinsics(K: np.ndarray):
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("near-singular intrinsic matrix")


def rectify_image(image, camera, frame: GroundFrame, nearest=False):
    """Warp ``image`` from the camera's true orientation into the rectified
    orientation. Returns (rectified image, valid-pixel mask)."""
    K = np.asarray(camera.K, dtype=np.float64)
    R = np.asarray(camera.R, dtype=np.float64)
    _check_intrinsics(K)
    r_bar = rectifying_rotation(frame)
    h_dst_to_src = K @ R @ r_bar.T @ np.linalg.inv(K)
    return warp_homography(image, h_dst_to_src, (camera.height, camera.width),
                           nearest=nearest)


def unrectify_image(image, camera, frame: GroundFrame, nearest=False):
    """Inverse of :func:`rectify_image`: warp a rectified image back to the
    camera's true orientation. Returns (image, valid-pixel mask)."""
    K = np.asarray(camera.K, dtype=np.float64)
    R = np.asarray(camera.R, dtype=np.float64)
    _check_intrinsics(K)
    r_bar = rectifying_rotation(frame)
    h_dst_to_src = K @ r_bar @ R.T @ np.linalg.inv(K)
    return warp_homography(image, h_dst_to_src, (camera.height, camera.width),
                           nearest=nearest)
