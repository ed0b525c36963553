import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

from pydantic import ValidationError

from .config.settings import RunConfig, parse_overrides
from .core.evaluation import (
    aggregate_depth_metrics,
    apply_cull_mask,
    covisible_mask,
    depth_metrics,
    match_resolution,
    mesh_metrics,
    points_from_depth_maps,
)
from .core.fusion import FusionInput, TsdfVolume, bench_integration
from .core.geometry import CameraView, Intrinsics
from .core.keyframing import build_keyframe_set
from .core.losses import DepthMap
from .core.synth import generate_scene, generate_trajectory, render_depth
from .core.tinynet import load_checkpoint, save_checkpoint
from .core.training import assemble_samples, render_keyframes, run_ablation_matrix, split_dataset, train
from .exceptions import ContractViolation, DataFormatError, DomainError, EmptyResultError, TrainingError
from .pipeline import ReconstructionPipeline
from .utils.dataset import frame_stem, load_dataset, write_dataset
from .utils.formats import format_table, read_depth_pgm, read_ply, write_latency, write_report, write_text
from .utils.logs import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (e.g. a saved run_config.json)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key"
    )
    common.add_argument("--out", type=Path, help="output directory (default: outputs/<verb>)")

    parser = _Parser(prog="deskrecon", description="Desk-scale multi-view depth and TSDF reconstruction")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="render a synthetic trajectory dataset")

    p = sub.add_parser("sweep", parents=[common], help="estimate keyframe depth maps for a dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--checkpoint", type=Path, help="MLP checkpoint for the mlp reducer")

    for verb, text in (("train", "train the cost-volume MLP"), ("ablate", "run the ablation matrix")):
        p = sub.add_parser(verb, parents=[common], help=text)
        p.add_argument("--data", type=Path, help="dataset directory (default: generate from the config)")

    p = sub.add_parser("fuse", parents=[common], help="fuse depth maps into a mesh")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--depth", type=Path, help="predicted depth directory (default: ground truth)")

    p = sub.add_parser("eval-depth", parents=[common], help="depth metrics of predicted depth maps")
    p.add_argument("--data", type=Path, required=True, help="dataset directory with ground truth")
    p.add_argument("--depth", type=Path, required=True, help="predicted depth directory")
    p.add_argument(
        "--covisible", action="store_true", help="score only pixels every source keyframe also sees"
    )

    p = sub.add_parser("eval-mesh", parents=[common], help="mesh accuracy, completeness and F-score")
    p.add_argument("--pred", type=Path, required=True, help="predicted PLY mesh")
    p.add_argument("--gt", type=Path, help="ground-truth PLY mesh")
    p.add_argument("--data", type=Path, help="dataset whose depth maps give ground-truth points")
    p.add_argument("--cull", action="store_true", help="drop predicted faces no dataset camera saw")

    sub.add_parser("bench", parents=[common], help="time TSDF integration")
    sub.add_parser("info", parents=[common], help="print the resolved configuration")
    return parser


def _out(args) -> Path:
    out = args.out or Path("outputs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pipeline_exit(result: Dict) -> int:
    if result["success"]:
        return EXIT_OK
    logger.error(f"{result.get('error_type', 'Error')}: {result['error']}")
    return EXIT_DATA


def _world(args, config: RunConfig):
    """Scene and trajectory from a dataset when given, else generated from the config."""
    if getattr(args, "data", None) is not None:
        dataset = load_dataset(args.data)
        if dataset.scene_config is None:
            raise DataFormatError(dataset.root / "scene.json", "dataset has no scene description")
        return generate_scene(dataset.scene_config), dataset.trajectory
    scene = generate_scene(config.scene_config())
    trajectory = generate_trajectory(
        scene,
        config.n_frames,
        config.motion,
        config.seed,
        config.intrinsics(),
        config.orbit_radius,
        config.line_step,
    )
    return scene, trajectory


def cmd_synth(args, config: RunConfig) -> int:
    out = _out(args)
    scene, trajectory = _world(args, config)
    keyframes = build_keyframe_set(
        trajectory, config.t_min, config.t_max, config.n_sources, online=config.online_sources
    )
    views = (
        (frame.frame_id, render_depth(scene, CameraView(frame.pose, frame.intrinsics)))
        for frame in trajectory
    )
    write_dataset(out, views, config.intrinsics(), config.scene_config(), keyframes)
    config.save(out)
    return EXIT_OK


def cmd_sweep(args, config: RunConfig) -> int:
    out = _out(args)
    dataset = load_dataset(args.data)
    scene = None
    if config.extractor == "oracle" and dataset.scene_config is not None:
        scene = generate_scene(dataset.scene_config)
    net = load_checkpoint(args.checkpoint) if args.checkpoint else None
    result = asyncio.run(ReconstructionPipeline(config, net=net).sweep_dataset(dataset, out, scene))
    return _pipeline_exit(result)


def cmd_train(args, config: RunConfig) -> int:
    out = _out(args)
    scene, trajectory = _world(args, config)
    train_cfg = config.train_config(reducer="mlp")
    rendered = render_keyframes(scene, trajectory, train_cfg, config.t_min, config.t_max)
    train_set, val_set = split_dataset(
        assemble_samples(rendered, train_cfg), train_cfg.val_fraction, train_cfg.seed
    )
    result = train(train_set, val_set, train_cfg)
    save_checkpoint(out / "checkpoint.bin", result.net)
    write_text(out / "loss_log.txt", result.loss_log())
    write_text(out / "val_log.txt", result.val_log())
    write_report(
        out / "train_summary.txt",
        {
            "seed": train_cfg.seed,
            "steps": train_cfg.steps,
            "best_step": result.best_step,
            "best_val_loss": result.best_val_loss,
            "initial_train_loss": result.curve[0].total,
            "final_train_loss": result.curve[-1].total,
        },
    )
    config.save(out)
    return EXIT_OK


def cmd_ablate(args, config: RunConfig) -> int:
    out = _out(args)
    scene, trajectory = _world(args, config)
    base = config.train_config()
    rendered = render_keyframes(scene, trajectory, base, config.t_min, config.t_max)
    table = run_ablation_matrix(rendered, base, config.ablation_axes, config.ablation_eval_samples)
    write_text(out / "ablation.txt", table.render())
    logger.info("Ablation table:\n" + table.render())
    config.save(out)
    return EXIT_OK


def cmd_fuse(args, config: RunConfig) -> int:
    out = _out(args)
    dataset = load_dataset(args.data)
    result = asyncio.run(ReconstructionPipeline(config).fuse_dataset(dataset, out, args.depth))
    return _pipeline_exit(result)


def _source_views(dataset, frame_id: int):
    """Camera of ``frame_id`` and the (camera, ground truth) of each of its sources."""

    def view(i: int) -> CameraView:
        return CameraView(dataset.trajectory.get(i).pose, dataset.intrinsics)

    sources = [(view(i), dataset.depth(i)) for i in dataset.keyframes.sources_for(frame_id)]
    return view(frame_id), sources


def cmd_eval_depth(args, config: RunConfig) -> int:
    out = _out(args)
    dataset = load_dataset(args.data)
    if args.covisible and dataset.keyframes is None:
        raise ContractViolation("--covisible needs keyframes.txt in the dataset")
    if not args.depth.is_dir():
        raise FileNotFoundError(f"{args.depth}: depth directory not found")
    lines = []
    metrics = []
    for frame in dataset.trajectory:
        path = args.depth / f"{frame_stem(frame.frame_id)}.depth.pgm"
        if not path.is_file():
            continue
        pred = read_depth_pgm(path)
        gt = dataset.depth(frame.frame_id)
        if args.covisible:
            gt = DepthMap(gt.depth, covisible_mask(gt, *_source_views(dataset, frame.frame_id)))
        try:
            m = depth_metrics(pred, match_resolution(gt, pred.shape))
        except EmptyResultError:
            logger.warning(f"Frame {frame.frame_id} has no valid pixels, skipped")
            continue
        metrics.append(m)
        lines.append(f"{frame.frame_id} " + " ".join(repr(float(v)) for v in m.as_dict().values()) + "\n")
    summary = aggregate_depth_metrics(metrics).as_dict()
    write_report(out / "depth_metrics.txt", summary)
    write_text(out / "depth_metrics_per_frame.txt", "".join(lines))
    logger.info("Depth metrics:\n" + format_table(summary, f"{len(metrics)} frames"))
    config.save(out)
    return EXIT_OK


def cmd_eval_mesh(args, config: RunConfig) -> int:
    out = _out(args)
    pred = read_ply(args.pred)
    views = depths = None
    if args.data is not None:
        dataset = load_dataset(args.data)
        frame_ids = dataset.trajectory.frame_ids
        if dataset.keyframes is not None:
            frame_ids = dataset.keyframes.keyframe_ids
        views = [CameraView(dataset.trajectory.get(i).pose, dataset.intrinsics) for i in frame_ids]
        depths = [dataset.depth(i) for i in frame_ids]
    if args.gt is not None:
        gt = read_ply(args.gt)
    elif depths is not None:
        gt = points_from_depth_maps(depths, views)
    else:
        raise ContractViolation("eval-mesh needs --gt or --data")
    if args.cull:
        if views is None:
            raise ContractViolation("--cull needs --data for the camera frusta")
        pred = apply_cull_mask(pred, views, config.cull_far)
    metrics = mesh_metrics(pred, gt, config.mesh_threshold_cm, config.mesh_samples, config.seed)
    write_report(out / "mesh_metrics.txt", metrics.as_dict())
    logger.info("Mesh metrics:\n" + format_table(metrics.as_dict(), "mesh"))
    config.save(out)
    return EXIT_OK


def cmd_bench(args, config: RunConfig) -> int:
    out = _out(args)
    scale_x = config.bench_width / config.image_width
    scale_y = config.bench_height / config.image_height
    intrinsics = Intrinsics(
        config.fx * scale_x,
        config.fy * scale_y,
        (config.cx + 0.5) * scale_x - 0.5,
        (config.cy + 0.5) * scale_y - 0.5,
        config.bench_width,
        config.bench_height,
    )
    scene = generate_scene(config.scene_config())
    trajectory = generate_trajectory(
        scene,
        config.bench_frames,
        config.motion,
        config.seed,
        intrinsics,
        config.orbit_radius,
        config.line_step,
    )
    inputs = []
    for frame in trajectory:
        rendered = render_depth(scene, CameraView(frame.pose, frame.intrinsics))
        inputs.append(FusionInput(frame.frame_id, rendered.depth, frame.pose, intrinsics))
    volume = TsdfVolume.for_room(config.room_extents, config.voxel_size)
    stats = bench_integration(inputs, volume, config.truncation, config.max_weight, config.bench_repeats)
    write_latency(out, stats)
    logger.info(
        f"Integration of {config.bench_width}x{config.bench_height} depth: "
        f"mean {stats.mean:.2f} ms, p50 {stats.p50:.2f} ms, p95 {stats.p95:.2f} ms"
    )
    config.save(out)
    return EXIT_OK


def cmd_info(args, config: RunConfig) -> int:
    print(config.model_dump_json(indent=2))
    return EXIT_OK


COMMANDS: Dict[str, Callable] = {
    "synth": cmd_synth,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "fuse": cmd_fuse,
    "eval-depth": cmd_eval_depth,
    "eval-mesh": cmd_eval_mesh,
    "bench": cmd_bench,
    "info": cmd_info,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config, parse_overrides(args.set))
    except FileNotFoundError as e:
        sys.stderr.write(f"deskrecon: {e}\n")
        return EXIT_DATA
    except json.JSONDecodeError as e:
        sys.stderr.write(f"deskrecon: {args.config} at byte {e.pos}: {e.msg}\n")
        return EXIT_DATA
    except (ValidationError, ValueError) as e:
        sys.stderr.write(f"deskrecon: invalid configuration: {e}\n")
        return EXIT_USAGE

    log_dir = None if args.command == "info" else (args.out or Path("outputs") / args.command)
    configure_logging(config.log_level, log_dir)
    try:
        return COMMANDS[args.command](args, config)
    except (DataFormatError, FileNotFoundError, DomainError, TrainingError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA
    except ContractViolation as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
