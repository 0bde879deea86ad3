"""Command-line entry point: ``poseanim <subcommand> ...``.

Exit codes: 0 success, 2 validation failure, 3 training divergence, 4 I/O.
Values come from defaults, then flags, then ``--config`` (which wins).
Every subcommand writes ``run.json`` into its ``--out`` directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import io as pio
from . import synthdata as sd
from .core import InvariantError, PoseMap, SilhouetteMask, GarmentMap, UvAtlas

log = logging.getLogger("poseanim")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------- config / provenance


def load_config(path) -> dict:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _hash_path(p: Path) -> str:
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(q for q in p.rglob("*") if q.is_file() and q.name != "run.json")
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _write_run(out: Path, args, cfg: dict, inputs: dict, extra: dict) -> None:
    hashes = {k: _hash_path(Path(v)) for k, v in inputs.items() if isinstance(v, str) and Path(v).exists()}
    rec = {"command": args.cmd, "argv": sys.argv[1:], "args": {k: v for k, v in vars(args).items() if k != "func"},
           "config": cfg, "seed": args.seed, "inputs": hashes, "python": platform.python_version(),
           "result": extra}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(rec, indent=1, sort_keys=True, default=str))


# ---------------------------------------------------------------- source bundles


def write_source(out: Path, scene: sd.SceneSample, background, spec: sd.FigureSpec, pose: sd.PoseParams,
                 view) -> None:
    from .uvwarp import composite

    out.mkdir(parents=True, exist_ok=True)
    pio.save_image(out / "image.png", composite(scene.image, scene.sil, background))
    pio.save_image(out / "background.png", background)
    pio.save_labels(out / "pose.png", scene.pose.data)
    pio.save_labels(out / "sil.png", scene.sil.data)
    pio.save_labels(out / "gar.png", scene.gar.data)
    pio.save_warp(out / "warp.bin", scene.warp)
    meta = {"size": scene.pose.shape[0], "uv_shape": list(scene.atlas.shape), "figure": spec.to_json(),
            "pose": pose.to_json(), "view": view}
    (out / "source.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_source(d: Path):
    from .pipeline import SourceView, SyntheticBody

    meta = json.loads((d / "source.json").read_text())
    atlas = UvAtlas.grid(*meta["uv_shape"])
    view = SourceView(pio.load_image(d / "image.png"), SilhouetteMask(pio.load_labels(d / "sil.png")),
                      GarmentMap(pio.load_labels(d / "gar.png")), PoseMap(pio.load_labels(d / "pose.png")),
                      pio.load_warp(d / "warp.bin", atlas))
    spec = sd.FigureSpec.from_json(meta["figure"])
    extra = {p.name[len("extra_"):]: read_source(p)[0] for p in sorted(d.glob("extra_*")) if p.is_dir()}
    return view, SyntheticBody(spec, meta["size"], atlas), meta, extra


def read_poses(path: Path, body):
    from .pipeline import FramePose

    man = json.loads(path.read_text())
    frames = []
    for f in man["frames"]:
        pose, warp = body(sd.PoseParams.from_json(f["pose"]), f["view"])
        frames.append(FramePose(pose, warp, float(f.get("scale", 1.0))))
    return frames, man


# ---------------------------------------------------------------- subcommands


def cmd_make_dataset(args, cfg):
    m = sd.emit_dataset(args.figures, args.pairs, args.out, args.size, tuple(args.uv), args.seed)
    return {"manifest_sha256": m["sha256"], "pairs": args.figures * args.pairs}


def cmd_make_source(args, cfg):
    spec = sd.generate_figure(args.figure_seed)
    atlas = UvAtlas.grid(*args.uv)
    pose = sd.sample_pose(np.random.default_rng(args.seed), tpose_prob=0.0)
    bg = sd.render_background(args.seed, args.size)
    out = Path(args.out)
    sc = sd.render_scene(spec, pose, args.view, args.size, atlas)
    write_source(out, sc, bg, spec, pose, args.view)
    for v in args.extra_views:
        write_source(out / f"extra_{v}", sd.render_scene(spec, pose, v, args.size, atlas), bg, spec, pose, v)
    return {"figure": spec.figure_id}


def cmd_make_poses(args, cfg):
    src, body, meta, _ = read_source(Path(args.source))
    if args.kind == "clip":
        seq = [(p, yaw) for p, yaw in sd.turntable_clip(args.n, args.seed)]
    elif args.kind == "identity":
        seq = [(sd.PoseParams.from_json(meta["pose"]), meta["view"])] * args.n
    else:
        rng = np.random.default_rng(args.seed)
        seq = [(sd.sample_pose(rng), str(rng.choice(["front", "left", "right", "back"]))) for _ in range(args.n)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = {"frames": [{"pose": p.to_json(), "view": v, "scale": 1.0} for p, v in seq]}
    (out / "poses.json").write_text(json.dumps(man, indent=1))
    if args.gt:
        from .uvwarp import composite

        spec = sd.FigureSpec.from_json(meta["figure"])
        bg = pio.load_image(Path(args.source) / "background.png")
        (out / "gt").mkdir(exist_ok=True)
        for k, (p, v) in enumerate(seq):
            sc = sd.render_scene(spec, p, v, meta["size"], body.atlas)
            pio.save_image(out / "gt" / f"{k:04d}.png", composite(sc.image, sc.sil, bg))
    return {"frames": len(seq)}


def _train_parts(args, cfg):
    from .losses import LossWeights
    from .networks import NetConfig
    from .training import DataConfig, PairBank, TrainConfig

    tc = TrainConfig.from_json({**{"seed": args.seed, "steps": args.steps}, **cfg.get("train", {})})
    if "weights" in cfg:
        tc = TrainConfig.from_json({**tc.to_json(), "weights": cfg["weights"]})
    nc = NetConfig(**cfg.get("net", {}))
    if args.data:
        bank = PairBank.load(args.data)
    else:
        d = cfg.get("data", {})
        if "uv_shape" in d:
            d = {**d, "uv_shape": tuple(d["uv_shape"])}
        bank = PairBank.generate(DataConfig(**d))
    return tc, nc, bank


def cmd_train(args, cfg):
    from . import training as tr

    out = Path(args.out)
    if args.net == "suite":
        dc = tr.DeskConfig()
        ms = tr.train_suite(dc, out)
        return {"dir": str(ms.root)}
    tc, nc, bank = _train_parts(args, cfg)
    if args.net == "extractor":
        tr.train_extractor(bank, cfg.get("extractor_width", 16), tc.steps, tc.seed, out)
        return {"bank_sha256": bank.digest()}
    if args.net == "sil":
        _, rows = tr.train_silnet(tc, bank, nc, out)
    elif args.net == "gar":
        _, rows = tr.train_garnet(tc, bank, nc, out)
    else:
        if not args.extractor:
            raise ValueError("--extractor checkpoint is required to train the render net")
        ex, _ = tr.load_checkpoint(args.extractor, "extractor")
        _, _, rows = tr.train_rendernet(tc, bank, ex, nc, out)
    return {"bank_sha256": bank.digest(), "final": rows[-1] if rows else None}


def _models(args):
    from .training import load_model_set

    return load_model_set(args.ckpt)


def cmd_build_uv(args, cfg):
    from . import pipeline as pl

    src, body, _, extra = read_source(Path(args.source))
    ms = _models(args)
    trace = []
    uni = pl.build_unified_uv(src, ms, body, pl.ablation(args.ablation), extra=extra, trace=trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pio.save_uv(out / "unified.npz", uni.labels, uni.texture)
    pio.save_image(out / "uv_texture.png", uni.texture.texture)
    pio.save_image(out / "uv_labels.png", pio.colorize(uni.labels.labels, "garment"))
    pio.save_labels(out / "uv_valid.png", uni.labels.valid.astype(np.uint8) * 255)
    (out / "views").mkdir(exist_ok=True)
    for view, img, sil, gar in trace:
        pio.save_image(out / "views" / f"{view}_img.png", img)
        pio.save_labels(out / "views" / f"{view}_sil.png", sil.data * 255)
        pio.save_image(out / "views" / f"{view}_gar.png", pio.colorize(gar.data, "garment"))
    res = {"coverage_log": uni.log, "reachable_coverage": uni.reachable_coverage, "sha256": uni.digest()}
    (out / "build.json").write_text(json.dumps(res, indent=1))
    return res


def _animate(args, ablation_id):
    from . import pipeline as pl

    src, body, _, extra = read_source(Path(args.source))
    frames, _ = read_poses(Path(args.poses), body)
    ms = _models(args)
    job = pl.AnimationJob(src, frames, ms, body, pl.ablation(ablation_id), extra)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    try:
        res = pl.animate(job)
    except pl.FrameError as e:
        for k, img in enumerate(e.partial.frames):
            pio.save_image(out / "frames" / f"{k:04d}.png", img)
        (out / "animation.json").write_text(json.dumps({**e.partial.meta, "error": str(e)}, indent=1))
        raise
    for k, img in enumerate(res.frames):
        pio.save_image(out / "frames" / f"{k:04d}.png", img)
    meta = {**res.meta, "ablation": ablation_id, "reachable_coverage": res.unified.reachable_coverage}
    (out / "animation.json").write_text(json.dumps(meta, indent=1))
    return meta, ms


def cmd_animate(args, cfg):
    meta, _ = _animate(args, args.ablation)
    return {"frames": len(meta["frames"]), "unified_sha256": meta["unified_sha256"]}


def _extractor(args):
    from .training import load_checkpoint

    path = Path(args.extractor) if args.extractor else Path(args.ckpt) / "extractor.npz"
    return load_checkpoint(path, "extractor")[0]


def _eval_tables(scores: dict, method: str, stem: Path):
    from .metrics import report

    tabs = {}
    for key in ("perceptual", "cs"):
        t = report({method: {s: v[key] for s, v in scores.items()}}, key)
        t.write(stem.parent / f"{stem.name}_{key}")
        tabs[key] = t.to_markdown()
    return tabs


def cmd_eval(args, cfg):
    from .metrics import evaluate_dirs

    scores = evaluate_dirs(args.pred, args.gt, _extractor(args))
    out = Path(args.out)
    _eval_tables(scores, args.method, out / "report")
    (out / "scores.json").write_text(json.dumps(scores, indent=1))
    return scores


def cmd_ablate(args, cfg):
    from .metrics import evaluate_dirs

    meta, ms = _animate(args, args.id)
    res = {"id": args.id, "frames": len(meta["frames"]), "reachable_coverage": meta["reachable_coverage"]}
    if args.gt:
        scores = evaluate_dirs(Path(args.out) / "frames", args.gt, ms.extractor)
        (Path(args.out) / "scores.json").write_text(json.dumps(scores, indent=1))
        res["scores"] = scores
    return res


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import ABLATIONS

    ap = argparse.ArgumentParser(prog="poseanim", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON or TOML file; its values override flags")
    common.add_argument("--out", required=True)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("make-dataset", parents=[common], help="emit a synthetic pair dataset")
    p.add_argument("--figures", type=int, default=20)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--uv", type=int, nargs=2, default=[256, 384])
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("make-source", parents=[common], help="render a source bundle for one figure")
    p.add_argument("--figure-seed", type=int, required=True)
    p.add_argument("--view", default="front", choices=sd.VIEWS)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--uv", type=int, nargs=2, default=[256, 384])
    p.add_argument("--extra-views", nargs="*", default=[], choices=["back", "left", "right"])
    p.set_defaults(func=cmd_make_source)

    p = sub.add_parser("make-poses", parents=[common], help="write a pose manifest (and ground-truth frames)")
    p.add_argument("--source", required=True)
    p.add_argument("--kind", choices=["clip", "random", "identity"], default="clip")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--gt", action="store_true")
    p.set_defaults(func=cmd_make_poses)

    p = sub.add_parser("train", parents=[common], help="train one network or the whole desk suite")
    p.add_argument("--net", choices=["extractor", "sil", "gar", "render", "suite"], required=True)
    p.add_argument("--data", help="dataset directory with manifest.json (default: generate in memory)")
    p.add_argument("--extractor", help="extractor checkpoint (render net only)")
    p.add_argument("--steps", type=int, default=5000)
    p.set_defaults(func=cmd_train)

    for name, fn, hlp in (("build-uv", cmd_build_uv, "build unified UV maps and dump intermediates"),
                          ("animate", cmd_animate, "synthesise a frame sequence"),
                          ("ablate", cmd_ablate, "animate with one component removed")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--source", required=True)
        p.add_argument("--ckpt", required=True)
        if name != "build-uv":
            p.add_argument("--poses", required=True)
        if name == "ablate":
            p.add_argument("--id", required=True, choices=list(ABLATIONS))
            p.add_argument("--gt", help="ground-truth frame directory to score against")
        else:
            p.add_argument("--ablation", default="SGR", choices=list(ABLATIONS))
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", parents=[common], help="score predicted frames against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ckpt", help="directory holding extractor.npz")
    p.add_argument("--extractor")
    p.add_argument("--method", default="method")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    from .losses import LossDivergence
    from .training import TrainingDiverged

    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        for k, v in cfg.items():
            if not isinstance(v, dict):
                setattr(args, k.replace("-", "_"), v)
        if args.cmd == "eval" and not (args.ckpt or args.extractor):
            raise ValueError("eval needs --ckpt or --extractor")
        t0 = time.time()
        res = args.func(args, cfg)
        inputs = {k: getattr(args, k, None) for k in ("source", "poses", "ckpt", "data", "pred", "gt", "extractor")}
        _write_run(Path(args.out), args, cfg, inputs, {"seconds": time.time() - t0, **(res or {})})
        return EXIT_OK
    except (TrainingDiverged, LossDivergence) as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvariantError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
