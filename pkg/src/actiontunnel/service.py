"""HTTP service exposing the pipeline to interactive clients.

Thin adapter over the library: the corpus and retrieval index load once at
startup and are immutable afterwards; every handler just wires request JSON
into library calls. Per-scene derived assets (rectified view, height map,
tunnel) are computed lazily and cached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse, Response

from .compose import TransitionSpec, align_tunnels, compose
from .egomap import build_height_map
from .gapfill import (FillerEndpoint, FillRequest, encode_png_b64,
                      fill_diffusion, fill_external)
from .proxemic import RectifiedCamera, ray_ground_point, rectify_image
from .retrieval import (RetrievalWeights, build_descriptor, load_index,
                        retrieve, save_index)
from .scene_io import load_corpus
from .tunnel import (Trajectory, TunnelParams, build_tunnel,
                     tunnel_outline_polygons)


@dataclass
class ServiceConfig:
    corpus_root: str
    host: str = "127.0.0.1"
    port: int = 8008
    filler: FillerEndpoint | None = None
    weights: RetrievalWeights = field(default_factory=RetrievalWeights)
    tunnel_params: TunnelParams = field(default_factory=TunnelParams)
    index_path: str | None = None

    def __post_init__(self):
        if not Path(self.corpus_root).is_dir():
            raise FileNotFoundError(f"corpus root {self.corpus_root} not found")


class SceneStore:
    """Immutable corpus plus lazily cached per-scene derived assets."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.bundles = {b.id: b for b in load_corpus(config.corpus_root)}
        labels_path = Path(config.corpus_root) / "labels.json"
        self.labels = {}
        if labels_path.is_file():
            with open(labels_path) as f:
                self.labels = json.load(f)
        self._rectified = {}
        self._hmaps = {}
        self._tunnels = {}
        index_path = config.index_path or str(
            Path(config.corpus_root) / "corpus.index")
        if Path(index_path).is_file():
            descriptors = load_index(index_path)
        else:
            descriptors = [build_descriptor(b, params=config.tunnel_params)
                           for b in self.bundles.values()]
            save_index(index_path, descriptors)
        self.descriptors = {d.scene_id: d for d in descriptors}

    def bundle(self, scene_id: str):
        if scene_id not in self.bundles:
            raise KeyError(scene_id)
        return self.bundles[scene_id]

    def rectified(self, scene_id: str):
        if scene_id not in self._rectified:
            b = self.bundle(scene_id)
            self._rectified[scene_id] = rectify_image(b.rgb, b.camera, b.frame)
        return self._rectified[scene_id]

    def hmap(self, scene_id: str):
        if scene_id not in self._hmaps:
            self._hmaps[scene_id] = build_height_map(self.bundle(scene_id))
        return self._hmaps[scene_id]

    def tunnel(self, scene_id: str):
        if scene_id not in self._tunnels:
            b = self.bundle(scene_id)
            self._tunnels[scene_id] = build_tunnel(
                b, self.hmap(scene_id), self.config.tunnel_params)
        return self._tunnels[scene_id]

    def rect_camera(self, scene_id: str) -> RectifiedCamera:
        b = self.bundle(scene_id)
        return RectifiedCamera.for_camera(b.camera, b.frame)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def compose_scenes(store: SceneStore, id1: str, id2: str, R: float, dR: float,
                   fill: str = "diffusion"):
    """Shared compose-and-fill path used by the service and the CLI."""
    t1 = store.tunnel(id1)
    t2 = store.tunnel(id2)
    transform = align_tunnels(t1, t2, R, window=max(1.0, dR + 0.5))
    spec = TransitionSpec(R=R, dR=dR, align=transform)
    result = compose(t1, t2, spec)
    if fill == "none" or not result.missing.any():
        filled = result.image.copy()
    elif fill == "diffusion":
        filled = fill_diffusion(result.image, result.missing)
    elif fill == "external":
        if store.config.filler is None:
            raise ValueError("no external filler endpoint configured")
        filled = fill_external(FillRequest(image=result.image,
                                           mask=result.missing),
                               store.config.filler)
    else:
        raise ValueError(f"unknown fill mode {fill!r}")
    return result, filled


def make_app(config: ServiceConfig) -> FastAPI:
    store = SceneStore(config)
    app = FastAPI(title="actiontunnel service")
    app.state.store = store

    @app.get("/scenes")
    def scenes():
        return [{"id": sid, "label": store.labels.get(sid)}
                for sid in sorted(store.bundles)]

    @app.get("/scene/{scene_id}/image")
    def scene_image(scene_id: str):
        try:
            rect, _ = store.rectified(scene_id)
        except KeyError:
            return _error(404, f"unknown scene {scene_id}")
        from PIL import Image
        import io
        buf = io.BytesIO()
        Image.fromarray(rect, mode="RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/ground_point")
    def ground_point(body: dict):
        try:
            scene_id = body["id"]
            u, v = float(body["u"]), float(body["v"])
        except (KeyError, TypeError, ValueError):
            return _error(400, "body must carry id, u, v")
        try:
            cam = store.rect_camera(scene_id)
        except KeyError:
            return _error(404, f"unknown scene {scene_id}")
        try:
            p = ray_ground_point(cam, u, v)
        except ValueError as e:
            return _error(400, str(e))
        return {"r": float(p[0]), "theta": float(p[1]), "h": float(p[2])}

    @app.post("/tunnel")
    def tunnel_overlay(body: dict):
        try:
            scene_id = body["id"]
        except (KeyError, TypeError):
            return _error(400, "body must carry id")
        try:
            bundle = store.bundle(scene_id)
        except KeyError:
            return _error(404, f"unknown scene {scene_id}")
        try:
            if "trajectory" in body and body["trajectory"] is not None:
                traj = Trajectory(points=np.asarray(body["trajectory"],
                                                    dtype=np.float64))
                from dataclasses import replace
                bundle = replace(bundle, trajectory=traj)
                tun = build_tunnel(bundle, store.hmap(scene_id),
                                   config.tunnel_params)
            else:
                tun = store.tunnel(scene_id)
            return tunnel_outline_polygons(tun)
        except ValueError as e:
            return _error(400, str(e))

    @app.post("/retrieve")
    def retrieve_route(body: dict):
        k = int(body.get("k", 5))
        scene_id = body.get("id")
        if scene_id is None:
            return _error(400, "query needs a scene id (optionally a trajectory)")
        if scene_id not in store.descriptors:
            return _error(404, f"unknown scene {scene_id}")
        try:
            if body.get("trajectory") is not None:
                from dataclasses import replace
                bundle = store.bundle(scene_id)
                traj = Trajectory(points=np.asarray(body["trajectory"],
                                                    dtype=np.float64))
                query = build_descriptor(replace(bundle, trajectory=traj),
                                         params=config.tunnel_params)
            else:
                query = store.descriptors[scene_id]
            matches = retrieve(query, store.descriptors.values(),
                               weights=config.weights, k=k)
        except ValueError as e:
            return _error(400, str(e))
        return [{
            "id": m.scene_id,
            "D": m.distance,
            "components": {"visual": m.components[0],
                           "spatial": m.components[1],
                           "motion": m.components[2]},
            "alignment": {"dtheta": m.alignment.dtheta,
                          "dx": list(m.alignment.dxy)},
        } for m in matches]

    @app.post("/compose")
    def compose_route(body: dict):
        try:
            id1, id2 = body["id1"], body["id2"]
            r_val = float(body["R"])
            dr_val = float(body.get("dR", 0.15))
            fill = body.get("fill", "diffusion")
        except (KeyError, TypeError, ValueError):
            return _error(400, "body must carry id1, id2, R (and optional dR, fill)")
        for sid in (id1, id2):
            if sid not in store.bundles:
                return _error(404, f"unknown scene {sid}")
        try:
            result, filled = compose_scenes(store, id1, id2, r_val, dr_val, fill)
        except ValueError as e:
            return _error(400, str(e))
        return {
            "composite": encode_png_b64(result.image, "RGB"),
            "mask": encode_png_b64(result.missing.astype(np.uint8) * 255, "L"),
            "filled": encode_png_b64(filled, "RGB"),
        }

    @app.exception_handler(Exception)
    async def on_error(_request, exc):
        return _error(500, f"{type(exc).__name__}: {exc}")

    return app


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    import uvicorn
    uvicorn.run(make_app(config), host=config.host, port=config.port,
                log_level="warning")
