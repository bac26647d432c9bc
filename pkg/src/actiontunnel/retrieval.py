"""Scene retrieval: D = lambda_V * D_V + lambda_S * D_S + lambda_M * D_M with
joint alignment (angle from the height-map correlation, then ground
translation from the tunnel vertices), plus realism re-ranking of the top k.

D_V compares compact visual features of the rectified images, D_S is one
minus the best normalized cross-correlation between height maps over integer
angular shifts, and D_M is the residual of translation-aligned cross-section
vertices in metric ground coordinates.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import pfm
from .compose import GroundTransform
from .egomap import HeightGridSpec, HeightMap, build_height_map
from .proxemic import rectify_image
from .tunnel import TunnelParams, Trajectory, cross_section

INDEX_MAGIC = b"ATIX"
INDEX_VERSION = 1

DEFAULT_F = 32          # common cross-section count for motion distance
DEFAULT_THETA_SEARCH = 32  # +- cells for the angular alignment search


class DescriptorMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SceneDescriptor:
    scene_id: str
    feature: np.ndarray     # fixed-length visual feature
    hmap: HeightMap
    vertices: np.ndarray    # (F, 2, 3) proxemic triples: (b1, b2) per section

    def ground_vertices(self) -> np.ndarray:
        """(F, 2, 2) metric ground positions of the bottom corners."""
        v = self.vertices
        rho = np.exp(v[..., 0])
        return np.stack([rho * np.cos(v[..., 1]), rho * np.sin(v[..., 1])],
                        axis=-1)


@dataclass(frozen=True)
class RetrievalWeights:
    lambda_v: float = 1.0
    lambda_s: float = 1.0
    lambda_m: float = 1.0

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_s, self.lambda_m) < 0:
            raise ValueError("weights must be non-negative")
        if self.lambda_v + self.lambda_s + self.lambda_m <= 0:
            raise ValueError("at least one weight must be positive")


@dataclass(frozen=True)
class Match:
    scene_id: str
    distance: float
    components: tuple          # (D_V, D_S, D_M) after per-query normalization
    raw_components: tuple      # unnormalized values, for inspection
    alignment: GroundTransform
    realism: float | None = None


def visual_feature(image) -> np.ndarray:
    """Default descriptor: 16x16 grayscale intensity grid concatenated with an
    8-bin gradient-orientation histogram over a 4x4 spatial grid; each block
    L2-normalized, then the whole vector renormalized. Length 256 + 128."""
    img = np.asarray(image)
    f = img.astype(np.float64) / (255.0 if img.dtype == np.uint8 else 1.0)
    if f.ndim == 3:
        gray = 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]
    else:
        gray = f
    h, w = gray.shape

    rows = (np.arange(h) * 16) // h
    cols = (np.arange(w) * 16) // w
    sums = np.zeros((16, 16))
    counts = np.zeros((16, 16))
    np.add.at(sums, (rows[:, None], cols[None, :]), gray)
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    intensity = (sums / np.maximum(counts, 1.0)).ravel()

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    obin = np.minimum((ang / (2.0 * np.pi / 8.0)).astype(np.int64), 7)
    cy = (np.arange(h) * 4) // h
    cx = (np.arange(w) * 4) // w
    hist = np.zeros((4, 4, 8))
    np.add.at(hist, (cy[:, None], cx[None, :], obin), mag)
    hist = hist.ravel()

    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 1e-12 else v

    feat = np.concatenate([unit(intensity), unit(hist)])
    return unit(feat)


def visual_distance(f1, f2) -> float:
    """Squared Euclidean distance between equal-length features."""
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    if a.shape != b.shape:
        raise DescriptorMismatchError(
            f"feature lengths differ: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def _masked_ncc(a: np.ndarray, b: np.ndarray) -> tuple:
    """(ncc, n) over mutually finite cells; ncc = 0 when variance vanishes."""
    m = np.isfinite(a) & np.isfinite(b)
    n = int(m.sum())
    if n < 10:
        return 0.0, n
    av = a[m] - a[m].mean()
    bv = b[m] - b[m].mean()
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na < 1e-12 or nb < 1e-12:
        return 0.0, n
    return float(av @ bv / (na * nb)), n


def spatial_distance(phi1: HeightMap, phi2: HeightMap,
                     theta_search: int = DEFAULT_THETA_SEARCH):
    """(1 - best NCC over angular shifts, best shift in cells).

    ``shift`` is the number of theta cells phi1 must be displaced (toward
    larger theta) to best match phi2; out-of-range cells are UNKNOWN, no
    wraparound. Shifts are scanned from 0 outward so exact matches prefer
    the smallest displacement.
    """
    if phi1.spec != phi2.spec:
        raise DescriptorMismatchError("height maps use different grid specs")
    a = phi1.cells.astype(np.float64)
    b = phi2.cells.astype(np.float64)
    n_theta = phi1.spec.n_theta
    best = None
    order = sorted(range(-theta_search, theta_search + 1), key=lambda s: (abs(s), s))
    usable = False
    for shift in order:
        if abs(shift) >= n_theta:
            continue
        if shift >= 0:
            sa = a[:, : n_theta - shift]
            sb = b[:, shift:]
        else:
            sa = a[:, -shift:]
            sb = b[:, : n_theta + shift]
        ncc, n = _masked_ncc(sa, sb)
        if n >= 10:
            usable = True
            if best is None or ncc > best[0]:
                best = (ncc, shift)
    if not usable:
        raise DescriptorMismatchError(
            "fewer than 10 mutually finite cells at every angular shift")
    return 1.0 - best[0], best[1]


def motion_distance(v1, v2):
    """Translation-aligned squared vertex mismatch in metric ground coords.

    Returns (residual, dx) where dx = mean(v2 - v1) is the optimal
    translation applied to v1.
    """
    a = np.asarray(v1, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(v2, dtype=np.float64).reshape(-1, 2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DescriptorMismatchError("empty vertex set")
    if a.shape != b.shape:
        raise DescriptorMismatchError(
            f"vertex counts differ: {a.shape[0]} vs {b.shape[0]}")
    dx = (b - a).mean(axis=0)
    residual = float(np.sum((a + dx - b) ** 2))
    return residual, dx


def build_descriptor(bundle, grid: HeightGridSpec | None = None,
                     params: TunnelParams | None = None, n_sections: int = DEFAULT_F,
                     feature_fn=None) -> SceneDescriptor:
    """Descriptor for one scene: visual feature of the rectified image, the
    height map, and bottom corners of cross-sections along the trajectory
    resampled to a common length."""
    params = params or TunnelParams()
    feature_fn = feature_fn or visual_feature
    rect, _ = rectify_image(bundle.rgb, bundle.camera, bundle.frame)
    hmap = build_height_map(bundle, grid)
    traj = bundle.trajectory.resample(n_sections)
    verts = np.zeros((n_sections, 2, 3))
    for i in range(n_sections):
        sec = cross_section(hmap, traj, i, bundle.frame, params)
        verts[i, 0] = sec.b1.as_array()
        verts[i, 1] = sec.b2.as_array()
    return SceneDescriptor(scene_id=bundle.id, feature=np.asarray(feature_fn(rect)),
                           hmap=hmap, vertices=verts)


def _rotate_xy(xy: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return xy @ rot.T


def retrieve(query: SceneDescriptor, corpus, weights: RetrievalWeights | None = None,
             k: int = 5, theta_search: int = DEFAULT_THETA_SEARCH) -> list:
    """Rank corpus scenes by D with per-candidate sequential alignment:
    angle from the height maps, then ground translation from the vertices.

    Component distances are normalized by their per-query corpus medians
    before weighting, so the stored components satisfy
    D = lv*D_V + ls*D_S + lm*D_M exactly. Ties break by scene id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    weights = weights or RetrievalWeights()

    rows = []
    q_xy = query.ground_vertices()
    for cand in corpus:
        d_v = visual_distance(query.feature, cand.feature)
        d_s, shift = spatial_distance(query.hmap, cand.hmap, theta_search)
        align_theta = -shift * cand.hmap.spec.dtheta
        c_xy = _rotate_xy(cand.ground_vertices(), align_theta)
        d_m, dx = motion_distance(q_xy, c_xy)
        align = GroundTransform(dtheta=align_theta,
                                dxy=(float(-dx[0]), float(-dx[1])))
        rows.append((cand.scene_id, d_v, d_s, d_m, align))

    raw = np.array([[r[1], r[2], r[3]] for r in rows])
    med = np.median(raw, axis=0)
    med = np.where(med > 1e-12, med, 1.0)
    lam = np.array([weights.lambda_v, weights.lambda_s, weights.lambda_m])

    matches = []
    for (sid, d_v, d_s, d_m, align), comp in zip(rows, raw / med):
        total = float(lam @ comp)
        matches.append(Match(scene_id=sid, distance=total,
                             components=tuple(float(x) for x in comp),
                             raw_components=(float(d_v), float(d_s), float(d_m)),
                             alignment=align))
    matches.sort(key=lambda m: (m.distance, m.scene_id))
    return matches[: min(k, len(matches))]


def rerank_by_realism(query_bundle, matches, composer, scorer, k_out: int) -> list:
    """Re-rank matches by realism of their filled composites, descending.

    ``composer(query_bundle, match) -> (image, missing_mask)`` builds and
    fills the transition; ``scorer(image, mask) -> float`` rates it. A
    candidate whose composition fails is excluded with a warning. The sort is
    stable, so constant scorers preserve the incoming order.
    """
    scored = []
    for m in matches:
        try:
            image, mask = composer(query_bundle, m)
            score = float(scorer(image, mask))
        except Exception as e:  # per-candidate isolation by contract
            warnings.warn(f"rerank: candidate {m.scene_id} failed: {e}")
            continue
        scored.append(dc_replace(m, realism=score))
    scored.sort(key=lambda m: -m.realism)
    return scored[: min(k_out, len(scored))]


def _write_block(f, blob: bytes):
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<I", f.read(4))
    blob = f.read(n)
    if len(blob) != n:
        raise ValueError("truncated index block")
    return blob


def save_index(path, descriptors) -> None:
    """Persist a corpus index: versioned header, then per scene the feature
    (float32), the height map (PFM block), and the vertices (float32
    proxemic triples)."""
    descriptors = list(descriptors)
    if not descriptors:
        raise ValueError("nothing to index")
    spec = descriptors[0].hmap.spec
    feat_len = descriptors[0].feature.shape[0]
    header = {
        "scene_ids": [d.scene_id for d in descriptors],
        "feature_len": int(feat_len),
        "n_sections": int(descriptors[0].vertices.shape[0]),
        "grid": {"r_min": spec.r_min, "r_max": spec.r_max,
                 "theta_max": spec.theta_max, "n_r": spec.n_r,
                 "n_theta": spec.n_theta},
    }
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<I", INDEX_VERSION))
        _write_block(f, json.dumps(header).encode("utf-8"))
        for d in descriptors:
            if d.feature.shape[0] != feat_len or d.hmap.spec != spec:
                raise DescriptorMismatchError(
                    "descriptors in one index must share feature length and grid")
            _write_block(f, d.feature.astype(np.float32).tobytes())
            _write_block(f, pfm.pfm_encode(d.hmap.cells))
            _write_block(f, d.vertices.astype(np.float32).tobytes())


def load_index(path) -> list:
    with open(path, "rb") as f:
        if f.read(4) != INDEX_MAGIC:
            raise ValueError("not a corpus index file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        header = json.loads(_read_block(f).decode("utf-8"))
        spec = HeightGridSpec(**header["grid"])
        out = []
        for sid in header["scene_ids"]:
            feat = np.frombuffer(_read_block(f), dtype=np.float32).astype(np.float64)
            cells = pfm.pfm_decode(_read_block(f))
            verts = np.frombuffer(_read_block(f), dtype=np.float32).astype(np.float64)
            verts = verts.reshape(header["n_sections"], 2, 3)
            out.append(SceneDescriptor(scene_id=sid, feature=feat,
                                       hmap=HeightMap(spec=spec, cells=cells),
                                       vertices=verts))
    return out
