"""Command-line entry point: ``ctxdesc <command> [options]``.

Commands: gen, verify, train, augment, eval, gradcheck, tune-ratio. Every
command prints its effective configuration before running and exits with 0
on success, 1 on any invariant violation or numerical abort.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ctxdesc.config.logging_config import setup_logging
from ctxdesc.config.settings import RunConfig, load_run_config
from ctxdesc.diagnostics import format_table, run_gradcheck, sweep_steps
from ctxdesc.errors import CtxDescError, SpecError
from ctxdesc.losses import STREAM_CHOICES, Streams
from ctxdesc.matching import (
    DEFAULT_THRESHOLD_PX,
    density_sweep,
    match_scene,
    reports_csv,
    tune_ratio,
    write_report_csv,
)
from ctxdesc.numerics.matrix_io import load_matrix, save_matrix
from ctxdesc.params import ModelParameters
from ctxdesc.pipeline import ContextModel, describe_view, init_model
from ctxdesc.synthetic import gen_scene_pool, load_scene, load_scene_pool, save_scene, verify_scene
from ctxdesc.trainer import train

logger = logging.getLogger(__name__)


def _effective_config(args: argparse.Namespace) -> RunConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "streams", None):
        overrides["streams"] = args.streams
    config = load_run_config(args.config, overrides)
    print("# effective configuration")
    print(config.dump(), end="")
    return config


def _required_path(value: str | None, key: str) -> Path:
    if not value:
        raise SpecError(f"no {key} given on the command line or in the configuration")
    return Path(value)


def _load_model(path: str | None, streams: Streams) -> ContextModel | None:
    if path is None:
        if streams.geo or streams.vis:
            raise SpecError(f"streams {streams} need a trained model (--model)")
        return None
    return ContextModel.from_params(ModelParameters.load(path))


def _provider(model: ContextModel | None, streams: Streams):
    def describe(view_a, view_b):
        if model is None:
            return view_a.descriptors, view_b.descriptors
        return describe_view(model, view_a, streams), describe_view(model, view_b, streams)

    return describe


# ----------------------------------------------------------------------
# commands

def cmd_gen(args: argparse.Namespace, config: RunConfig) -> int:
    out = _required_path(args.out or config.scenes_dir, "scenes_dir")
    failures = 0
    for scene in gen_scene_pool(config.scene_spec()):
        report = verify_scene(scene)
        if not report.ok:
            failures += 1
            logger.error(f"{scene.name} failed verification:\n{report.to_text()}")
        save_scene(scene, out / scene.name)
    logger.info(f"Generated {config.num_scenes} scenes under {out}")
    return 1 if failures else 0


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    root = _required_path(args.scenes or config.scenes_dir, "scenes_dir")
    failures = 0
    for scene in load_scene_pool(root):
        report = verify_scene(scene)
        print(f"[{scene.name}]")
        print(report.to_text(), end="")
        failures += 0 if report.ok else 1
    return 1 if failures else 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    scenes = load_scene_pool(_required_path(args.scenes or config.scenes_dir, "scenes_dir"))
    out = _required_path(args.out or config.model_path, "model_path")
    first = scenes[0].view_a
    init = init_model(config.train_config(), first.grid.depth, np.random.default_rng([config.seed, 1]),
                      local_dim=first.descriptors.shape[1])
    params, log = train(config.train_config(), scenes, init, dump_dir=out.parent)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.save(out)
    log_path = out.with_name(out.name + ".log.csv")
    log.save(log_path)
    logger.info(f"Wrote model {out} and training log {log_path}")
    return 0


def cmd_augment(args: argparse.Namespace, config: RunConfig) -> int:
    streams = Streams.parse(config.streams)
    model = _load_model(args.model, streams)
    scene = load_scene(args.scene)
    out = _required_path(args.out or config.out_dir, "out_dir")
    out.mkdir(parents=True, exist_ok=True)
    desc_a, desc_b = _provider(model, streams)(scene.view_a, scene.view_b)
    save_matrix(out / "desc_a.ctxm", desc_a)
    save_matrix(out / "desc_b.ctxm", desc_b)
    logger.info(f"Wrote {streams} descriptors for {scene.name} to {out}")
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    streams = Streams.parse(config.streams)
    scene = load_scene(args.scene)
    if args.desc_a or args.desc_b:
        if not (args.desc_a and args.desc_b):
            raise SpecError("--desc-a and --desc-b must be given together")
        scene = replace(scene, view_a=replace(scene.view_a, descriptors=load_matrix(args.desc_a)),
                        view_b=replace(scene.view_b, descriptors=load_matrix(args.desc_b)))
        model, method = None, "files"
    else:
        model = _load_model(args.model, streams)
        method = str(streams) if model is not None else "raw"
    provider = _provider(model, streams)

    if args.densities:
        counts = [int(v) for v in args.densities.split(",") if v.strip()]
        reports = density_sweep(scene, provider, counts, seed=config.seed, ratio=args.ratio,
                                mutual=args.mutual, threshold=args.threshold_px, method=method)
    else:
        desc_a, desc_b = provider(scene.view_a, scene.view_b)
        reports = [match_scene(scene, desc_a, desc_b, args.ratio, args.mutual, args.threshold_px, method)]
        print(reports[0].to_text(), end="")

    if args.out:
        write_report_csv(args.out, reports)
    else:
        print(reports_csv(reports), end="")
    return 0


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    rows = run_gradcheck(config.seed)
    print(format_table(rows), end="")
    if args.sweep:
        for h, error in sweep_steps(config.seed):
            print(f"h={h:.0e} max_error={error:.3e}")
    return 0 if all(r.passed for r in rows) else 1


def cmd_tune_ratio(args: argparse.Namespace, config: RunConfig) -> int:
    streams = Streams.parse(config.streams)
    model = _load_model(args.model, streams)
    scenes = load_scene_pool(_required_path(args.scenes or config.scenes_dir, "scenes_dir"))
    provider = _provider(model, streams)
    descriptors = [provider(s.view_a, s.view_b) for s in scenes]
    ratio = tune_ratio(scenes, descriptors, args.target, mutual=args.mutual, threshold=args.threshold_px)
    print(f"ratio={ratio!r}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "verify": cmd_verify,
    "train": cmd_train,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "tune-ratio": cmd_tune_ratio,
}


def _positive(value: str) -> float:
    number = float(value)
    if number <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")

    parser = argparse.ArgumentParser(prog="ctxdesc", description="Context-augmented local descriptors")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic scene pool")
    gen.add_argument("--out", help="output directory (default: scenes_dir)")

    verify = sub.add_parser("verify", parents=[common], help="check every scene invariant")
    verify.add_argument("scenes", nargs="?", help="scene pool directory (default: scenes_dir)")

    trn = sub.add_parser("train", parents=[common], help="train encoders on a scene pool")
    trn.add_argument("--scenes", help="scene pool directory (default: scenes_dir)")
    trn.add_argument("--out", help="model file (default: model_path)")

    aug = sub.add_parser("augment", parents=[common], help="write augmented descriptors for one scene")
    aug.add_argument("scene", help="scene directory")
    aug.add_argument("--model", help="trained model file")
    aug.add_argument("--streams", choices=STREAM_CHOICES)
    aug.add_argument("--out", help="output directory (default: out_dir)")

    ev = sub.add_parser("eval", parents=[common], help="match one scene and report recall and precision")
    ev.add_argument("scene", help="scene directory")
    ev.add_argument("--model", help="trained model file")
    ev.add_argument("--streams", choices=STREAM_CHOICES)
    ev.add_argument("--desc-a", help="precomputed view-A descriptors (CTXM)")
    ev.add_argument("--desc-b", help="precomputed view-B descriptors (CTXM)")
    ev.add_argument("--ratio", type=_positive, help="ratio-test threshold")
    ev.add_argument("--mutual", action="store_true", help="keep mutual nearest neighbors only")
    ev.add_argument("--densities", help="comma-separated keypoint counts")
    ev.add_argument("--threshold-px", type=_positive, default=DEFAULT_THRESHOLD_PX)
    ev.add_argument("--out", help="CSV report path (default: stdout)")

    grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    grad.add_argument("--sweep", action="store_true", help="also report errors for h in 1e-4, 1e-5, 1e-6")

    tune = sub.add_parser("tune-ratio", parents=[common], help="bisect the ratio for a target precision")
    tune.add_argument("--scenes", help="scene pool directory (default: scenes_dir)")
    tune.add_argument("--model", help="trained model file")
    tune.add_argument("--streams", choices=STREAM_CHOICES)
    tune.add_argument("--target", type=float, required=True, help="target mean precision in [0, 1)")
    tune.add_argument("--mutual", action="store_true")
    tune.add_argument("--threshold-px", type=_positive, default=DEFAULT_THRESHOLD_PX)
    return parser


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        config = _effective_config(args)
        return COMMANDS[args.command](args, config)
    except (CtxDescError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
