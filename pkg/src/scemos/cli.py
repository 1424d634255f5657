"""Command-line interface: dataset generation, training, generation, reports."""

import argparse
import json
import os
import sys


def _set_threads():
    import torch

    threads = int(os.environ.get("SCEMOS_THREADS", "1"))
    torch.set_num_threads(max(threads, 1))


def _load_config(path):
    from .config import desk_config, load_config

    return load_config(path) if path else desk_config()


def cmd_gen_data(args):
    from .synth import build_dataset

    cfg = _load_config(args.config)
    manifest = build_dataset(
        args.out,
        n_scenes=cfg.data.n_scenes,
        tasks_per_scene=cfg.data.tasks_per_scene,
        seed=cfg.data.seed,
        window=cfg.data.window,
        stride=cfg.data.stride,
    )
    print(f"wrote {len(manifest.records)} motions across "
          f"{sum(len(v) for v in manifest.splits.values())} scenes to {args.out}")


def cmd_train(args, kind):
    from . import pipeline

    cfg = _load_config(args.config)
    trainer = {
        "tokenizer": pipeline.train_tokenizer,
        "planner": pipeline.train_planner,
        "refiner": pipeline.train_refiner,
    }[kind]
    summary = trainer(cfg, args.data, args.out)
    printable = {k: v for k, v in summary.items() if k != "log"}
    print(f"{kind} trained: {json.dumps(printable, sort_keys=True)}")


def cmd_generate(args):
    from .motion import save_motion
    from .pipeline import GenerationRequest, generate, load_run
    from .scene import load_scene

    parts = [float(v) for v in args.start.split(",")]
    if len(parts) != 3:
        raise SystemExit("--start must be x,y,yaw")
    request = GenerationRequest(
        scene=load_scene(args.scene),
        prompt=args.prompt,
        start=tuple(parts),
        cycles=args.cycles,
        guidance_scale=args.guidance,
        mode="greedy" if args.mode == "greedy" else "categorical",
        seed=args.seed,
        refine=not args.no_refine,
    )
    result = generate(request, load_run(args.run))
    save_motion(args.out, result.motion)
    tokens = [log["tokens"].tolist() for log in result.cycles]
    with open(str(args.out) + ".tokens.json", "w") as fh:
        json.dump(tokens, fh)
    print(f"wrote {result.motion.n_frames} frames to {args.out}")


def cmd_evaluate(args):
    from .pipeline import evaluate_run, run_data_dir

    data = args.data or run_data_dir(args.run)
    report = evaluate_run(
        args.run, data, split=args.split, out_dir=args.out, cycles=args.cycles,
        limit=args.limit,
    )
    for key, value in sorted(report.as_dict().items()):
        print(f"{key}: {value:.6g}")


def cmd_export_report(args):
    from .report import export_report

    written = export_report(args.run)
    for path in written:
        print(f"wrote {path}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scemos",
        description="Two-stage text- and scene-conditioned 3D human motion synthesis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    for kind in ("tokenizer", "planner", "refiner"):
        p = sub.add_parser(f"train-{kind}", help=f"train the {kind}")
        p.add_argument("--config", default=None)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=lambda a, k=kind: cmd_train(a, k))

    p = sub.add_parser("generate", help="synthesize one motion")
    p.add_argument("--run", required=True, help="run directory with checkpoints")
    p.add_argument("--scene", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--start", required=True, help="x,y,yaw")
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--guidance", type=float, default=2.0)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a run on one split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", default=None, help="dataset dir (defaults to the run's)")
    p.add_argument("--split", default="test")
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-report", help="render figures and tables for a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_export_report)

    return parser


def main(argv=None):
    _set_threads()
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
