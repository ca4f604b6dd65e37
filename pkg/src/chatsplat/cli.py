"""Command-line entry point.

Subcommands: synth | train | render | eval | bench | serve | import-teacher |
export. Every run resolves its config (defaults -> config file -> --set
overrides), writes outputs under --out, and drops a deterministic
manifest.json there; fixed seed + fixed thread count reproduce output trees
byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from .errors import ChatSplatError


class UsageError(Exception):
    """Bad invocation: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


SYNTH_DEFAULTS: Dict = {
    "objects": 2, "per_object": 250, "width": 112, "height": 112, "cameras": 3,
    "d_g": 32, "d_id": 16, "margin": 1.4, "identity": "zeros",
    "teacher": False, "teacher_range": 100.0, "d_tok": 32, "patch": 14,
}

TRAIN_DEFAULTS: Dict = {
    "lr": 0.05, "iterations": 500, "identity_iterations": 0, "batch": 1,
    "optimizer": "adam", "loss_normalization": "mean", "learn_scale_shift": True,
    "alpha_threshold": 0.5, "contrib_cap": 256, "checkpoint_every": 0,
    "d_mid": 64, "d_tok": 32, "patch": 14, "activation": "tanh",
}


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {value!r}")
    if isinstance(like, int):
        return int(float(value))
    if isinstance(like, float):
        return float(value)
    return value


def resolve_config(defaults: Dict, config_path: Optional[str],
                   overrides: List[str]) -> Dict:
    cfg = dict(defaults)

    def apply(key: str, raw) -> None:
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r} (known: {sorted(cfg)})")
        cfg[key] = _coerce(str(raw), cfg[key]) if not isinstance(raw, type(cfg[key])) else raw

    if config_path:
        with open(config_path) as fh:
            text = fh.read()
        try:
            data = json.loads(text)
            if not isinstance(data, dict):
                raise UsageError("structured config must be a JSON object")
            for k, v in data.items():
                apply(k, v)
        except json.JSONDecodeError:
            for line in text.splitlines():
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"config line is not key=value: {line!r}")
                k, _, v = line.partition("=")
                apply(k.strip(), v.strip())
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set needs key=value, got {item!r}")
        k, _, v = item.partition("=")
        apply(k.strip(), v.strip())
    return cfg


def _write_manifest(out_dir: str, command: str, config: Dict, seed: int,
                    threads: int, outputs: List[str]) -> None:
    manifest = {"command": command, "config": config, "seed": seed,
                "threads": threads, "outputs": sorted(outputs)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _apply_threads(threads: Optional[int]) -> int:
    from .rasterizer import set_thread_count

    n = threads if threads else os.cpu_count() or 1
    set_thread_count(n)
    return n


# ---------------------------------------------------------------------------
# subcommand implementations

def _cmd_synth(args) -> int:
    from .scene import export_sidecar
    from .synth import make_synthetic_scene
    from .teacher import make_synthetic_teacher, save_teacher

    cfg = resolve_config(SYNTH_DEFAULTS, args.config, args.set)
    if args.objects is not None:
        cfg["objects"] = args.objects
    if args.teacher:
        cfg["teacher"] = True
    out = _ensure_out(args)
    threads = _apply_threads(args.threads)
    bundle = make_synthetic_scene(
        cfg["objects"], cfg["per_object"], seed=args.seed, width=cfg["width"],
        height=cfg["height"], n_cameras=cfg["cameras"], d_g=cfg["d_g"],
        d_id=cfg["d_id"], margin=cfg["margin"], identity=cfg["identity"])
    scene_path = os.path.join(out, "scene.cstf")
    export_sidecar(bundle, scene_path)
    outputs = ["scene.cstf"]
    if cfg["teacher"]:
        teacher = make_synthetic_teacher(bundle, d_tok=cfg["d_tok"], patch=cfg["patch"],
                                         range_scale=cfg["teacher_range"], seed=args.seed)
        save_teacher(teacher, os.path.join(out, "teacher.cstf"))
        outputs.append("teacher.cstf")
    _write_manifest(out, "synth", cfg, args.seed, threads, outputs + ["manifest.json"])
    print(f"wrote {', '.join(outputs)} to {out}")
    return 0


def _cmd_train(args) -> int:
    from .encoder import EncoderConfig
    from .scene import import_sidecar
    from .teacher import load_teacher
    from .training import (TrainConfig, load_checkpoint, make_train_state,
                           save_checkpoint, train_identity, train_language,
                           write_loss_csv)

    cfg = resolve_config(TRAIN_DEFAULTS, args.config, args.set)
    stage = args.stage
    if stage in ("language", "both") and not args.teacher:
        raise UsageError("train --stage language needs --teacher <teacher.cstf>; "
                         "the teacher token file is missing")
    out = _ensure_out(args)
    threads = _apply_threads(args.threads)

    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
    elif args.scene:
        bundle = import_sidecar(args.scene)
        enc_cfg = EncoderConfig(d_g=bundle.gaussians.d_g, d_mid=cfg["d_mid"],
                                d_tok=cfg["d_tok"], patch=cfg["patch"],
                                activation=cfg["activation"])
        state = make_train_state(bundle, enc_cfg, seed=args.seed)
    else:
        raise UsageError("train needs --scene <scene.cstf> or --checkpoint <ckpt.cstf>")

    tc = TrainConfig(lr=cfg["lr"], iterations=cfg["iterations"], batch=cfg["batch"],
                     optimizer=cfg["optimizer"],
                     loss_normalization=cfg["loss_normalization"],
                     learn_scale_shift=cfg["learn_scale_shift"],
                     alpha_threshold=cfg["alpha_threshold"],
                     contrib_cap=cfg["contrib_cap"], seed=args.seed,
                     checkpoint_every=cfg["checkpoint_every"])
    outputs = []
    if stage in ("identity", "both"):
        id_iters = cfg["identity_iterations"] or cfg["iterations"]
        id_cfg = TrainConfig(**{**tc.__dict__, "iterations": id_iters})
        reports = train_identity(state, id_cfg)
        write_loss_csv(reports, os.path.join(out, "losses_identity.csv"))
        outputs.append("losses_identity.csv")
    if stage in ("language", "both"):
        teacher = load_teacher(args.teacher, expect_t=state.tokens_per_view,
                               expect_d=state.encoder.config.d_tok)
        reports = train_language(state, teacher, tc, checkpoint_dir=out)
        write_loss_csv(reports, os.path.join(out, "losses_language.csv"))
        outputs.append("losses_language.csv")
    ckpt_path = os.path.join(out, "checkpoint.cstf")
    save_checkpoint(state, ckpt_path)
    outputs.append("checkpoint.cstf")
    _write_manifest(out, "train", {**cfg, "stage": stage}, args.seed, threads,
                    outputs + ["manifest.json"])
    print(f"trained stage={stage}; wrote {', '.join(outputs)} to {out}")
    return 0


def _cmd_render(args) -> int:
    from .service import RENDER_CHANNELS, build_engine, render_channel_png

    out = _ensure_out(args)
    threads = _apply_threads(args.threads)
    if args.channel not in RENDER_CHANNELS:
        raise UsageError(f"--channel must be one of {RENDER_CHANNELS}")
    engine = build_engine(scene_path=args.scene, checkpoint_path=args.checkpoint)
    cams = ([int(c) for c in args.cam.split(",")] if args.cam != "all"
            else list(range(len(engine.state.bundle.cameras))))
    outputs = []
    for c in cams:
        png = render_channel_png(engine, c, args.channel)
        name = f"cam{c}_{args.channel}.png"
        with open(os.path.join(out, name), "wb") as fh:
            fh.write(png)
        outputs.append(name)
    _write_manifest(out, "render", {"channel": args.channel, "cams": cams},
                    args.seed, threads, outputs + ["manifest.json"])
    print(f"wrote {len(outputs)} renders to {out}")
    return 0


def _cmd_eval(args) -> int:
    from .chat import save_codebook
    from .service import build_engine, build_object_codebook
    from .teacher import load_teacher
    from .training import evaluate

    out = _ensure_out(args)
    threads = _apply_threads(args.threads)
    engine = build_engine(scene_path=args.scene, checkpoint_path=args.checkpoint)
    teacher = load_teacher(args.teacher) if args.teacher else None
    metrics = evaluate(engine.state, teacher)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = ["metrics.json"]
    if args.codebook_out:
        codebook = build_object_codebook(engine)
        save_codebook(codebook, os.path.join(out, args.codebook_out))
        outputs.append(args.codebook_out)
    _write_manifest(out, "eval", {"teacher": bool(teacher)}, args.seed, threads,
                    outputs + ["manifest.json"])
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def _cmd_bench(args) -> int:
    from .bench import bench_render, write_bench_csv

    out = _ensure_out(args)
    threads = _apply_threads(args.threads)
    sizes = [int(float(s)) for s in args.sizes.split(",")]
    res = [int(r) for r in args.res.split(",")]
    rows = bench_render(sizes, res, repetitions=args.reps, seed=args.seed)
    csv_path = os.path.join(out, "bench.csv")
    write_bench_csv(rows, csv_path)
    _write_manifest(out, "bench", {"sizes": sizes, "res": res, "reps": args.reps},
                    args.seed, threads, ["bench.csv", "manifest.json"])
    for r in rows:
        print(f"{r.config_id} {r.impl}: mean {r.mean_ms:.2f} ms, fps {r.fps:.1f}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    _apply_threads(args.threads)
    app = create_app(scene_path=args.scene, checkpoint_path=args.checkpoint,
                     codebook_path=args.codebook)
    addr = args.addr or os.environ.get("CHATSPLAT_ADDR", "127.0.0.1:8000")
    host, _, port = addr.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return 0


def _cmd_import_teacher(args) -> int:
    from .teacher import import_raw_teacher

    out = _ensure_out(args)
    threads = _apply_threads(args.threads)
    path = os.path.join(out, "teacher.cstf")
    teacher = import_raw_teacher(args.manifest, path)
    _write_manifest(out, "import-teacher", {"manifest": os.path.basename(args.manifest)},
                    args.seed, threads, ["teacher.cstf", "manifest.json"])
    print(f"imported {len(teacher.view_targets)} view and "
          f"{len(teacher.object_targets)} object targets to {path}")
    return 0


def _cmd_export(args) -> int:
    from .scene import export_ply, import_sidecar
    from .training import load_checkpoint

    out = _ensure_out(args)
    threads = _apply_threads(args.threads)
    if args.checkpoint:
        bundle = load_checkpoint(args.checkpoint).bundle
    elif args.scene:
        bundle = import_sidecar(args.scene)
    else:
        raise UsageError("export needs --scene or --checkpoint")
    path = os.path.join(out, "scene.ply")
    export_ply(bundle.gaussians, path)
    _write_manifest(out, "export", {}, args.seed, threads,
                    ["scene.ply", "manifest.json"])
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="chatsplat",
                     description="Conversational Gaussian feature-field engine")
    sub = parser.add_subparsers(dest="subcommand")

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: hardware)")
        p.add_argument("--config", default=None, help="config file (JSON or key=value)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key")

    p = sub.add_parser("synth", help="generate a synthetic scene (and teacher)")
    common(p)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--teacher", action="store_true", help="also write teacher tokens")

    p = sub.add_parser("train", help="run identity and/or language training")
    common(p)
    p.add_argument("--scene", default=None)
    p.add_argument("--checkpoint", default=None, help="resume from a checkpoint")
    p.add_argument("--teacher", default=None)
    p.add_argument("--stage", choices=("identity", "language", "both"), default="both")

    p = sub.add_parser("render", help="render channels to PNG")
    common(p)
    p.add_argument("--scene", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--cam", default="all")
    p.add_argument("--channel", default="rgb")

    p = sub.add_parser("eval", help="write a metrics report")
    common(p)
    p.add_argument("--scene", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--teacher", default=None)
    p.add_argument("--codebook-out", default=None,
                   help="also write a per-object mock codebook (JSON name)")

    p = sub.add_parser("bench", help="benchmark tiled vs reference rasterizer")
    common(p)
    p.add_argument("--sizes", default="10000,100000", help="comma list of scene sizes")
    p.add_argument("--res", default="256,512", help="comma list of resolutions")
    p.add_argument("--reps", type=int, default=3)

    p = sub.add_parser("serve", help="run the HTTP service")
    common(p)
    p.add_argument("--scene", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--addr", default=None, help="host:port (or CHATSPLAT_ADDR)")

    p = sub.add_parser("import-teacher", help="raw float32 blobs + manifest -> CSTF")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("export", help="export geometry as PLY")
    common(p)
    p.add_argument("--scene", default=None)
    p.add_argument("--checkpoint", default=None)
    return parser


_COMMANDS = {
    "synth": _cmd_synth, "train": _cmd_train, "render": _cmd_render,
    "eval": _cmd_eval, "bench": _cmd_bench, "serve": _cmd_serve,
    "import-teacher": _cmd_import_teacher, "export": _cmd_export,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.subcommand:
            parser.print_help()
            return 1
        np.random.seed(args.seed)  # belt and braces; all paths use explicit rngs
        return _COMMANDS[args.subcommand](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ChatSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
