"""Filling the missing band of a composite.

Two routes: a deterministic harmonic (Laplace) diffusion filler that keeps
the pipeline self-contained, and an HTTP client for an external learned
filler / realism scorer speaking the wire protocol below.

Wire protocol (authoritative): HTTP POST with JSON body
``{"id": str, "width": int, "height": int, "image": <base64 PNG RGB8>,
"mask": <base64 PNG grayscale, 255 = missing>}`` where width/height describe
the encoded payload images. ``/fill`` responds ``{"id", "image"}`` with a PNG
of the same size; ``/score`` responds ``{"id", "score"}`` with a float in
[0, 1]. Errors are HTTP 4xx/5xx with ``{"error": str}``.
"""

from __future__ import annotations

import base64
import io
import uuid
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

EXTERNAL_SIZE = 256  # fixed working size of the external filler


class FillError(RuntimeError):
    pass


class FillTimeoutError(FillError):
    pass


class FillProtocolError(FillError):
    """Malformed response or HTTP-level failure."""


class FillDimensionError(FillError):
    """Response image does not match the request dimensions."""


@dataclass(frozen=True)
class FillRequest:
    image: np.ndarray   # (H, W, 3) uint8
    mask: np.ndarray    # (H, W) bool, True = missing
    request_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image)
        msk = np.asarray(self.mask, dtype=bool)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError("image must be (H, W, 3) uint8")
        if msk.shape != img.shape[:2]:
            raise ValueError("mask shape must match image")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", msk)
        if not self.request_id:
            object.__setattr__(self, "request_id", uuid.uuid4().hex)


@dataclass(frozen=True)
class FillerEndpoint:
    base_url: str
    timeout: float = 30.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


def _neighbor_mean(u: np.ndarray) -> np.ndarray:
    """4-neighbor average with replicated (zero-flux) image borders."""
    p = np.pad(u, [(1, 1), (1, 1)] + [(0, 0)] * (u.ndim - 2), mode="edge")
    return 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])


def _coarsen(values: np.ndarray, known: np.ndarray):
    """Halve resolution; a coarse pixel is known if any fine pixel under it
    is, with the mean of the known fine values."""
    h, w = known.shape
    ph, pw = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    v = np.pad(values, [(0, ph - h), (0, pw - w)] + [(0, 0)] * (values.ndim - 2),
               mode="edge")
    k = np.pad(known, [(0, ph - h), (0, pw - w)], mode="edge")
    kf = k.astype(np.float64)
    if values.ndim == 3:
        num = (v * kf[..., None]).reshape(ph // 2, 2, pw // 2, 2, -1).sum(axis=(1, 3))
    else:
        num = (v * kf).reshape(ph // 2, 2, pw // 2, 2).sum(axis=(1, 3))
    den = kf.reshape(ph // 2, 2, pw // 2, 2).sum(axis=(1, 3))
    coarse_known = den > 0
    safe = np.maximum(den, 1.0)
    coarse = num / (safe[..., None] if values.ndim == 3 else safe)
    return coarse, coarse_known


def _solve_multiscale(u: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Coarse-to-fine harmonic initialization for the missing region."""
    if min(known.shape) <= 16 or known.all():
        out = u.copy()
    else:
        coarse, coarse_known = _coarsen(u, known)
        coarse = _solve_multiscale(coarse, coarse_known)
        out = u.copy()
        up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)
        out[~known] = up[: known.shape[0], : known.shape[1]][~known]
    miss = ~known
    for _ in range(60):
        nb = _neighbor_mean(out)
        out[miss] = nb[miss]
    return out


def fill_diffusion(image, mask, tol: float = 0.5 / 255.0, max_iters: int = 5000,
                   method: str = "jacobi"):
    """Solve the discrete Laplace equation on masked pixels with known pixels
    as Dirichlet boundary. Known pixels are returned untouched, exactly.

    ``tol`` is the max per-pixel update (in the image's value units for float
    input, in [0,1] units for uint8 input) below which iteration stops.
    An all-false mask is the identity; a mask covering the whole image has no
    boundary data and raises.
    """
    img = np.asarray(image)
    msk = np.asarray(mask, dtype=bool)
    if msk.shape != img.shape[:2]:
        raise ValueError("mask shape must match image")
    if not msk.any():
        return img.copy()
    if msk.all():
        raise ValueError("fully-masked image: no known boundary pixels")
    if method not in ("jacobi", "gauss-seidel"):
        raise ValueError(f"unknown method {method!r}")

    is_int = np.issubdtype(img.dtype, np.integer)
    u = img.astype(np.float64) / (255.0 if is_int else 1.0)
    known = ~msk
    u = _solve_multiscale(u, known)

    if method == "gauss-seidel":
        ys, xs = np.nonzero(msk)
        red = ((ys + xs) % 2) == 0
        phases = [(ys[red], xs[red]), (ys[~red], xs[~red])]
    for _ in range(max_iters):
        if method == "jacobi":
            nb = _neighbor_mean(u)
            delta = np.max(np.abs(nb[msk] - u[msk]))
            u[msk] = nb[msk]
        else:
            delta = 0.0
            for py, px in phases:
                nb = _neighbor_mean(u)
                if py.size:
                    delta = max(delta, float(np.max(np.abs(nb[py, px] - u[py, px]))))
                    u[py, px] = nb[py, px]
        if delta < tol:
            break

    if is_int:
        out = img.copy()
        out[msk] = np.rint(np.clip(u[msk], 0.0, 1.0) * 255.0).astype(img.dtype)
        return out
    out = img.astype(np.float64, copy=True)
    out[msk] = u[msk]
    return out.astype(img.dtype, copy=False)


def encode_png_b64(arr: np.ndarray, mode: str) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data)
        return np.asarray(Image.open(io.BytesIO(raw)))
    except Exception as e:
        raise FillProtocolError(f"undecodable PNG payload: {e}")


def _wire_body(image: np.ndarray, mask: np.ndarray, request_id: str) -> dict:
    return {
        "id": request_id,
        "width": int(image.shape[1]),
        "height": int(image.shape[0]),
        "image": encode_png_b64(image, "RGB"),
        "mask": encode_png_b64(mask.astype(np.uint8) * 255, "L"),
    }


def _post(endpoint: FillerEndpoint, route: str, body: dict) -> dict:
    url = endpoint.base_url.rstrip("/") + route
    try:
        resp = requests.post(url, json=body, timeout=endpoint.timeout)
    except requests.Timeout:
        raise FillTimeoutError(
            f"no response from {url} within {endpoint.timeout}s")
    except requests.RequestException as e:
        raise FillProtocolError(f"request to {url} failed: {e}")
    if resp.status_code != 200:
        raise FillProtocolError(f"{url} returned HTTP {resp.status_code}: "
                                f"{resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as e:
        raise FillProtocolError(f"non-JSON response from {url}: {e}")


def _resize(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    im = Image.fromarray(arr)
    resample = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(im.resize((size, size), resample=resample))


def fill_external(req: FillRequest, endpoint: FillerEndpoint) -> np.ndarray:
    """Delegate the hole to the external learned filler.

    The request is resampled to the filler's fixed 256x256 working size and
    the response resampled back; known pixels are then restored from the
    input, so only the hole can change regardless of what the model returns.
    """
    if not req.mask.any():
        raise ValueError("fill request needs a non-empty mask")
    h, w = req.image.shape[:2]
    img256 = _resize(req.image, EXTERNAL_SIZE, nearest=False)
    mask256 = _resize(req.mask.astype(np.uint8) * 255, EXTERNAL_SIZE,
                      nearest=True) > 127
    body = _wire_body(img256, mask256, req.request_id)
    data = _post(endpoint, "/fill", body)
    if "image" not in data:
        raise FillProtocolError("fill response lacks an 'image' field")
    out256 = decode_png_b64(data["image"])
    if out256.ndim != 3 or out256.shape[:2] != (EXTERNAL_SIZE, EXTERNAL_SIZE):
        raise FillDimensionError(
            f"fill response has shape {out256.shape}, expected "
            f"({EXTERNAL_SIZE}, {EXTERNAL_SIZE}, 3)")
    out = np.asarray(Image.fromarray(out256[..., :3].astype(np.uint8), "RGB")
                     .resize((w, h), resample=Image.BILINEAR))
    out = out.copy()
    out[~req.mask] = req.image[~req.mask]
    return out


def _abs_laplacian(image: np.ndarray) -> np.ndarray:
    f = image.astype(np.float64) / (255.0 if image.dtype == np.uint8 else 1.0)
    if f.ndim == 2:
        f = f[..., None]
    nb = _neighbor_mean(f)
    return np.mean(np.abs(f - nb), axis=-1)


def _mask_boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel ring on both sides of the mask edge."""
    m = mask.astype(bool)
    p = np.pad(m, 1, mode="edge")
    dil = (p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:] | m)
    ero = (p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:] & m)
    return dil & ~ero


def score_realism(image, endpoint: FillerEndpoint | None = None,
                  mask=None, request_id: str = "") -> float:
    """Likelihood-style realism score in [0, 1].

    With an endpoint, defers to the external discriminator via ``/score``.
    Without one, a deterministic proxy: 1 / (1 + s) where s is the mean
    absolute Laplacian along the (former) mask boundary normalized by the
    image's global mean absolute Laplacian — seam artifacts push s up and
    the score down. With no mask the whole image is the boundary (s = 1).
    """
    img = np.asarray(image)
    if endpoint is not None:
        msk = (np.zeros(img.shape[:2], dtype=bool) if mask is None
               else np.asarray(mask, dtype=bool))
        body = _wire_body(img, msk, request_id or uuid.uuid4().hex)
        data = _post(endpoint, "/score", body)
        if "score" not in data:
            raise FillProtocolError("score response lacks a 'score' field")
        score = float(data["score"])
        if not (0.0 <= score <= 1.0):
            raise FillProtocolError(f"score {score} outside [0, 1]")
        return score

    lap = _abs_laplacian(img)
    global_mean = float(lap.mean())
    if global_mean < 1e-12:
        return 0.5
    if mask is None:
        s = 1.0
    else:
        ring = _mask_boundary(np.asarray(mask, dtype=bool))
        if not ring.any():
            s = 1.0
        else:
            s = float(lap[ring].mean()) / global_mean
    return 1.0 / (1.0 + s)
