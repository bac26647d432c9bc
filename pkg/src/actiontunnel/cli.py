"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actiontunnel",
                                description="trajectory-conditioned scene synthesis")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-scenes", type=int, default=9)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", default="straight:1,left:1,right:1",
                   help="class:weight list")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--jitter", type=float, default=2.0)

    s = sub.add_parser("rectify", help="rectify one scene image")
    s.add_argument("--corpus", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--out", required=True, help="output PNG path")

    s = sub.add_parser("heightmap", help="export a scene's height map")
    s.add_argument("--corpus", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--out", required=True, help="output prefix (.pfm/.json)")

    s = sub.add_parser("tunnel", help="build a tunnel, export debug mesh")
    s.add_argument("--corpus", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--out", help="Wavefront-style mesh path")
    s.add_argument("--ground-point", metavar="U,V",
                   help="print the proxemic foot point under pixel U,V")

    s = sub.add_parser("compose", help="compose two scenes at a transition")
    s.add_argument("id1")
    s.add_argument("id2")
    s.add_argument("--corpus", required=True)
    s.add_argument("--R", type=float, required=True)
    s.add_argument("--dR", type=float, default=0.15)
    s.add_argument("--fill", default="diffusion",
                   choices=["diffusion", "none", "external"])
    s.add_argument("--filler-url")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("retrieve", help="rank corpus scenes for a query")
    s.add_argument("--corpus", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--k", type=int, default=5)

    s = sub.add_parser("eval", help="reconstruction sweeps")
    s.add_argument("--corpus", required=True)
    s.add_argument("--dt", default="2,4,6,8,10")
    s.add_argument("--methods", default=",".join(
        ("paste2d", "fill2d", "paste3d", "fill3d", "box3d", "ours")))
    s.add_argument("--missing", default="",
                   help="fractions for the missing-data sweep (overrides --dt)")
    s.add_argument("--min-mask-fraction", type=float, default=0.6)
    s.add_argument("--out", help="CSV output path (default: stdout)")

    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--corpus", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8008)
    s.add_argument("--filler-url")
    return p


def _parse_classes(text: str) -> dict:
    mix = {}
    for part in text.split(","):
        name, _, weight = part.partition(":")
        mix[name.strip()] = float(weight) if weight else 1.0
    return mix


def _store(corpus, filler_url=None):
    from .gapfill import FillerEndpoint
    from .service import SceneStore, ServiceConfig
    filler = FillerEndpoint(base_url=filler_url) if filler_url else None
    return SceneStore(ServiceConfig(corpus_root=corpus, filler=filler))


def _run(args) -> int:
    if args.command == "synth":
        from .synthgen import make_corpus
        manifest = make_corpus(args.out, seed=args.seed, n_scenes=args.n_scenes,
                               class_mix=_parse_classes(args.classes),
                               noise_sigma=args.noise, jitter_deg=args.jitter)
        print(f"wrote {len(manifest.scene_ids)} scenes to {args.out}")
        return 0

    if args.command == "rectify":
        from .proxemic import rectify_image
        from .scene_io import load_bundle
        bundle = load_bundle(Path(args.corpus) / args.id)
        rect, mask = rectify_image(bundle.rgb, bundle.camera, bundle.frame)
        Image.fromarray(rect, mode="RGB").save(args.out)
        mask_path = str(Path(args.out).with_suffix("")) + "_mask.png"
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(mask_path)
        print(f"wrote {args.out} and {mask_path}")
        return 0

    if args.command == "heightmap":
        from .egomap import build_height_map, save_height_map
        from .scene_io import load_bundle
        bundle = load_bundle(Path(args.corpus) / args.id)
        hmap = build_height_map(bundle)
        save_height_map(hmap, args.out + ".pfm", args.out + ".json")
        print(f"wrote {args.out}.pfm / {args.out}.json")
        return 0

    if args.command == "tunnel":
        from .egomap import build_height_map
        from .proxemic import RectifiedCamera, ray_ground_point
        from .scene_io import load_bundle
        from .tunnel import build_tunnel, export_tunnel_mesh
        bundle = load_bundle(Path(args.corpus) / args.id)
        if args.ground_point:
            u, v = (float(x) for x in args.ground_point.split(","))
            cam = RectifiedCamera.for_camera(bundle.camera, bundle.frame)
            p = ray_ground_point(cam, u, v)
            print(f"r={p[0]:.6f} theta={p[1]:.6f} h={p[2]:.6f}")
        if args.out:
            tun = build_tunnel(bundle, build_height_map(bundle))
            export_tunnel_mesh(tun, args.out)
            print(f"wrote {args.out}")
        if not args.ground_point and not args.out:
            raise ValueError("tunnel: need --out and/or --ground-point")
        return 0

    if args.command == "compose":
        from .compose import save_composite
        from .service import compose_scenes
        store = _store(args.corpus, args.filler_url)
        result, filled = compose_scenes(store, args.id1, args.id2,
                                        args.R, args.dR, args.fill)
        out = Path(args.out)
        save_composite(result, out)
        Image.fromarray(filled, mode="RGB").save(out / "filled.png")
        print(f"wrote composite/missing/provenance/filled PNGs to {out}")
        return 0

    if args.command == "retrieve":
        from .retrieval import retrieve
        store = _store(args.corpus)
        if args.id not in store.descriptors:
            raise KeyError(f"unknown scene {args.id}")
        matches = retrieve(store.descriptors[args.id],
                           store.descriptors.values(), k=args.k)
        print(f"{'rank':>4} {'id':<12} {'D':>9} {'D_V':>9} {'D_S':>9} {'D_M':>9}")
        for i, m in enumerate(matches):
            print(f"{i + 1:>4} {m.scene_id:<12} {m.distance:>9.4f} "
                  f"{m.components[0]:>9.4f} {m.components[1]:>9.4f} "
                  f"{m.components[2]:>9.4f}")
        return 0

    if args.command == "eval":
        from dataclasses import replace
        from .evalbench import EvalConfig, missing_data_sweep, run_sweep
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        config = EvalConfig(methods=methods,
                            min_mask_fraction=args.min_mask_fraction)
        if args.missing:
            fractions = tuple(float(x) for x in args.missing.split(","))
            report = missing_data_sweep(args.corpus, fractions, methods,
                                        config=config)
        else:
            dts = tuple(int(x) for x in args.dt.split(","))
            report = run_sweep(args.corpus, replace(config, dts=dts))
        csv_text = report.to_csv()
        if args.out:
            Path(args.out).write_text(csv_text)
            print(f"wrote {args.out}")
        else:
            sys.stdout.write(csv_text)
        sys.stderr.write(report.to_text() + "\n")
        return 0

    if args.command == "serve":
        from .gapfill import FillerEndpoint
        from .service import ServiceConfig, serve
        filler = (FillerEndpoint(base_url=args.filler_url)
                  if args.filler_url else None)
        serve(ServiceConfig(corpus_root=args.corpus, host=args.host,
                            port=args.port, filler=filler))
        return 0

    raise ValueError(f"unhandled command {args.command!r}")


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return _run(args)
    except Exception as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
