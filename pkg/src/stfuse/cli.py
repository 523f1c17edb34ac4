"""Command-line entry point.

Subcommands: simulate, voxelize, gen-dataset, train, eval, gradcheck,
export-tokens. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure (gradient check). Diagnostics go to stderr; results go to
files or stdout. The FEA_THREADS environment variable caps worker counts.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import MissingCheckpoint, StfuseError

CONFIG_KEYS = frozenset({
    "seed", "image", "patch", "d", "d_tok", "depth", "bins", "alpha0",
    "lr_s1", "lr_s2", "lr_s3", "lr_s4",
    "epochs_s1", "epochs_s2", "epochs_s3", "epochs_s4", "batch_size",
    "use_spatial_cattn", "use_temporal_cattn", "use_matching",
    "vision_input", "use_coord_embedding",
})


def _workers(requested=None) -> int:
    cap = os.environ.get("FEA_THREADS")
    avail = os.cpu_count() or 1
    if cap is not None:
        avail = min(avail, max(1, int(cap)))
    if requested is not None:
        avail = min(avail, requested)
    return avail


def _load_run_config(path):
    from .io_formats import RunConfig, parse_config
    from .pipeline import AblationConfig, ModelConfig, TrainSettings
    cfg = parse_config(path, CONFIG_KEYS) if path else RunConfig({})
    model_cfg = ModelConfig(
        seed=cfg.get_int("seed", 1234),
        image=cfg.get_int("image", 64),
        patch=cfg.get_int("patch", 8),
        d=cfg.get_int("d", 64),
        d_tok=cfg.get_int("d_tok", 64),
        depth=cfg.get_int("depth", 2),
        bins=cfg.get_int("bins", 32),
        alpha0=cfg.get_float("alpha0", 0.1),
    )
    settings = TrainSettings(
        epochs_s1=cfg.get_int("epochs_s1", 3),
        epochs_s2=cfg.get_int("epochs_s2", 3),
        epochs_s3=cfg.get_int("epochs_s3", 8),
        epochs_s4=cfg.get_int("epochs_s4", 1),
        lr_s1=cfg.get_float("lr_s1", 0.05),
        lr_s2=cfg.get_float("lr_s2", 0.05),
        lr_s3=cfg.get_float("lr_s3", 0.05),
        lr_s4=cfg.get_float("lr_s4", 0.01),
        batch_size=cfg.get_int("batch_size", 8),
    )
    ablation = AblationConfig(
        use_spatial_cattn=cfg.get_bool("use_spatial_cattn", "true"),
        use_temporal_cattn=cfg.get_bool("use_temporal_cattn", "true"),
        use_matching=cfg.get_bool("use_matching", "true"),
        vision_input=cfg.get_enum("vision_input",
                                  ("frame", "event", "frame+event"), "frame+event"),
        use_coord_embedding=cfg.get_bool("use_coord_embedding", "true"),
    )
    return model_cfg, settings, ablation


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    from .event_sim import SimConfig, simulate_events
    from .io_formats import read_frames, write_events
    frames = read_frames(args.frames)
    cfg = SimConfig(contrast_threshold=args.threshold, eps=args.eps,
                    refractory=args.refractory)
    stream = simulate_events(frames, cfg)
    write_events(stream, args.out)
    print(f"wrote {len(stream)} events to {args.out}")
    return 0


def cmd_voxelize(args) -> int:
    from .encoders import voxelize
    from .io_formats import read_events, save_checkpoint
    stream = read_events(args.events)
    t0, t1 = args.window
    grid = voxelize(stream, args.bins, t0, t1)
    save_checkpoint({"voxel": grid.counts.astype(np.float32)}, args.out)
    print(f"wrote voxel grid {grid.counts.shape} to {args.out}")
    return 0


def cmd_gen_dataset(args) -> int:
    from .grounding import GenConfig, gen_dataset, save_scenes
    scenes = gen_dataset(args.n, args.seed, GenConfig(),
                         workers=_workers(args.workers))
    save_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .grounding import load_scenes
    from .pipeline import Model, StagePlan, default_plans, run_training
    model_cfg, settings, ablation = _load_run_config(args.config)
    scenes = load_scenes(args.data)
    wanted = args.stages.split(",")
    plans = [p for p in default_plans(settings) if p.stage in wanted]
    known = {p.stage for p in default_plans(settings)}
    bad = [s for s in wanted if s not in known]
    if bad:
        raise StfuseError(f"unknown stages: {bad}")
    model = Model(model_cfg)
    run_training(model, scenes, plans, ablation,
                 log=lambda msg: print(msg, file=sys.stderr))
    model.save(args.out)
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .grounding import load_scenes
    from .pipeline import Model, evaluate
    if not os.path.exists(args.ckpt):
        raise MissingCheckpoint(f"no checkpoint at {args.ckpt}")
    _, _, ablation = _load_run_config(args.config)
    model = Model.load(args.ckpt)
    scenes = load_scenes(args.data)
    report = evaluate(model, scenes, ablation)
    report.write(args.report)
    print(f"mean_s_iou {report.mean_s_iou:.6f} mean_t_iou {report.mean_t_iou:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_grad_suite
    reports = run_grad_suite(bits=args.bits, seed=args.seed)
    for rep in reports:
        print(rep.line())
    return 0 if all(r.passed for r in reports) else 3


def cmd_export_tokens(args) -> int:
    from .grounding import load_scenes
    from .pipeline import Model, make_query
    from .alignment import coord_token
    if not os.path.exists(args.ckpt):
        raise MissingCheckpoint(f"no checkpoint at {args.ckpt}")
    model = Model.load(args.ckpt)
    _, _, ablation = _load_run_config(args.config)
    scenes = load_scenes(args.data)
    with open(args.out, "w", encoding="ascii") as f:
        f.write("TOK1 scene_id kind values...\n")
        for scene in scenes:
            query = make_query(scene.annotation)
            tokens = model.st_tokens(scene)
            f_st = model.fuse(tokens, ablation)
            v_st = model.visual_tokens(f_st)
            fused = model.aligned_tokens(v_st, query, ablation)
            coord = coord_token(query, model.align)
            for kind, tensor in zip(("vs", "vt", "es", "et"), tokens):
                for row in tensor.data:
                    f.write(f"{scene.scene_id} {kind} "
                            + " ".join("%.8g" % v for v in row) + "\n")
            for row in fused.data:
                f.write(f"{scene.scene_id} fused "
                        + " ".join("%.8g" % v for v in row) + "\n")
            f.write(f"{scene.scene_id} coord "
                    + " ".join("%.8g" % v for v in coord.data) + "\n")
    print(f"wrote token dump to {args.out}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stfuse",
        description="Frame-event spatiotemporal fusion engine")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="frames -> event stream")
    p.add_argument("--frames", required=True, help="FRM1 manifest path")
    p.add_argument("--out", required=True, help="EVT1 output path")
    p.add_argument("--threshold", type=float, required=True,
                   help="contrast threshold C (log-intensity units)")
    p.add_argument("--refractory", type=int, default=0, help="microseconds")
    p.add_argument("--eps", type=float, default=1e-3)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("voxelize", help="event stream -> voxel grid tensor")
    p.add_argument("--events", required=True)
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--window", type=int, nargs=2, metavar=("T0", "T1"),
                   required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("gen-dataset", help="write synthetic benchmark scenes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="staged training on a dataset directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--stages", default="S1,S2,S3,S4")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write IoU report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--bits", type=int, choices=(32, 64), default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-tokens", help="dump per-scene feature tokens")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_export_tokens)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = 0 if e.code in (0, None) else 1
        sys.exit(code)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        sys.exit(1)
    try:
        code = args.func(args)
    except StfuseError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(2)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(2)
    sys.exit(code)


if __name__ == "__main__":
    main()
