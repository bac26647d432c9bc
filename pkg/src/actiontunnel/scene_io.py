"""Scene bundle data model and on-disk corpus format.

A bundle directory holds exactly three files:

* ``rgb.png``   -- 8-bit RGB image
* ``depth.pfm`` -- single-channel float32 depth in meters, little-endian
  (scale header -1.0); non-positive or NaN cells are invalid
* ``meta.json`` -- camera (K, R, C row-major), ground frame, wearer height,
  trajectory as F x 3 proxemic triples, format version

meta.json is the single source of camera truth; images carry no calibration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import pfm
from .proxemic import GroundFrame
from .tunnel import Trajectory

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class BundleFormatError(ValueError):
    """Bundle directory is missing files or fails validation."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: world->camera rotation R, optical center C, pixels."""

    K: np.ndarray      # (3,3) intrinsics
    R: np.ndarray      # (3,3) world->camera rotation
    C: np.ndarray      # (3,) optical center, meters
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.K, dtype=np.float64)
        r = np.asarray(self.R, dtype=np.float64)
        c = np.asarray(self.C, dtype=np.float64)
        if k.shape != (3, 3) or r.shape != (3, 3) or c.shape != (3,):
            raise BundleFormatError("camera matrices have wrong shapes")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(r))
                and np.all(np.isfinite(c))):
            raise BundleFormatError("camera contains non-finite values")
        if np.max(np.abs(k[np.tril_indices(3, -1)])) > 0:
            raise BundleFormatError("K must be upper-triangular")
        if not (k[0, 0] > 0 and k[1, 1] > 0 and k[2, 2] == 1.0):
            raise BundleFormatError("K diagonal must be (fx>0, fy>0, 1)")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise BundleFormatError("R is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise BundleFormatError("R must have det +1")
        if self.width <= 0 or self.height <= 0:
            raise BundleFormatError("image size must be positive")
        object.__setattr__(self, "K", k)
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "C", c)

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix K R [I | -C]."""
        return self.K @ self.R @ np.hstack([np.eye(3), -self.C[:, None]])


@dataclass(frozen=True)
class SceneBundle:
    """One first-person observation."""

    id: str
    rgb: np.ndarray      # (H, W, 3) uint8
    depth: np.ndarray    # (H, W) float32 meters; <=0 or NaN invalid
    camera: CameraModel
    frame: GroundFrame
    trajectory: Trajectory

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        depth = np.asarray(self.depth, dtype=np.float32)
        if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
            raise BundleFormatError("rgb must be (H, W, 3) uint8")
        if rgb.shape[:2] != (self.camera.height, self.camera.width):
            raise BundleFormatError(
                f"rgb size {rgb.shape[:2]} does not match camera "
                f"{(self.camera.height, self.camera.width)}")
        if depth.shape != rgb.shape[:2]:
            raise BundleFormatError("depth size does not match rgb")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class CorpusManifest:
    root: Path
    scene_ids: list
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if len(set(self.scene_ids)) != len(self.scene_ids):
            raise BundleFormatError("duplicate scene ids in manifest")


def _frame_to_meta(frame: GroundFrame) -> dict:
    return {"origin": frame.origin.tolist(), "g_x": frame.g_x.tolist(),
            "g_y": frame.g_y.tolist(), "g_z": frame.g_z.tolist(),
            "height": frame.height}


def save_bundle(bundle: SceneBundle, directory) -> None:
    """Write rgb.png / depth.pfm / meta.json into ``directory``."""
    cam = bundle.camera
    for arr, what in ((cam.K, "K"), (cam.R, "R"), (cam.C, "C")):
        if not np.all(np.isfinite(arr)):
            raise BundleFormatError(f"non-finite camera field {what}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(bundle.rgb, mode="RGB").save(directory / "rgb.png")
    pfm.write_pfm(directory / "depth.pfm", bundle.depth)
    meta = {
        "format_version": FORMAT_VERSION,
        "id": bundle.id,
        "width": cam.width,
        "height": cam.height,
        "K": cam.K.ravel().tolist(),
        "R": cam.R.ravel().tolist(),
        "C": cam.C.tolist(),
        "frame": _frame_to_meta(bundle.frame),
        "trajectory": bundle.trajectory.points.tolist(),
    }
    with open(directory / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)


def load_bundle(directory) -> SceneBundle:
    """Load and fully validate one bundle directory."""
    directory = Path(directory)
    for name in ("rgb.png", "depth.pfm", "meta.json"):
        if not (directory / name).is_file():
            raise BundleFormatError(f"missing {name} in {directory}")
    with open(directory / "meta.json") as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise BundleFormatError(f"malformed meta.json in {directory}: {e}")
    try:
        camera = CameraModel(
            K=np.array(meta["K"], dtype=np.float64).reshape(3, 3),
            R=np.array(meta["R"], dtype=np.float64).reshape(3, 3),
            C=np.array(meta["C"], dtype=np.float64),
            width=int(meta["width"]), height=int(meta["height"]))
        fr = meta["frame"]
        frame = GroundFrame(origin=np.array(fr["origin"]),
                            g_x=np.array(fr["g_x"]), g_y=np.array(fr["g_y"]),
                            g_z=np.array(fr["g_z"]), height=float(fr["height"]))
        trajectory = Trajectory(points=np.array(meta["trajectory"],
                                                dtype=np.float64))
    except (KeyError, ValueError) as e:
        raise BundleFormatError(f"invalid meta.json in {directory}: {e}")
    rgb = np.asarray(Image.open(directory / "rgb.png").convert("RGB"))
    depth = pfm.read_pfm(directory / "depth.pfm")
    return SceneBundle(id=str(meta["id"]), rgb=rgb, depth=depth,
                       camera=camera, frame=frame, trajectory=trajectory)


def save_manifest(manifest: CorpusManifest) -> None:
    data = {"format_version": manifest.format_version,
            "scenes": list(manifest.scene_ids)}
    with open(Path(manifest.root) / MANIFEST_NAME, "w") as f:
        json.dump(data, f, indent=1)


def load_manifest(root) -> CorpusManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise BundleFormatError(f"no {MANIFEST_NAME} under {root}")
    with open(path) as f:
        data = json.load(f)
    return CorpusManifest(root=root, scene_ids=list(data["scenes"]),
                          format_version=int(data["format_version"]))


def load_corpus(root) -> list:
    """Load every bundle named by the manifest, ordered by id.

    Any invalid bundle aborts the load with an error naming the offender;
    nothing is skipped silently.
    """
    manifest = load_manifest(root)
    bundles = []
    for scene_id in sorted(manifest.scene_ids):
        try:
            bundles.append(load_bundle(Path(root) / scene_id))
        except (BundleFormatError, ValueError, OSError) as e:
            raise BundleFormatError(f"corpus scene '{scene_id}' failed to load: {e}")
    return bundles
