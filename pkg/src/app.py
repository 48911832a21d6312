"""
sdfrecon command-line application.

Reconstructs indoor scenes from posed images: generates synthetic datasets,
computes correspondences, approximate depths and plane masks, trains the scene
fields, extracts and evaluates meshes and renders trained views.

Usage:
    python src/app.py synth --out data/room
    python src/app.py train --data data/room --preset desk --out runs/room
    python src/app.py mesh --run runs/room
    python src/app.py eval --run runs/room --gt data/room/gt_points.xyz
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Dict, List, Optional, Sequence

from config import TrainConfig, config, preset, PRESETS
from errors import SdfReconError, UsageError, exit_code_for
from logger import get_logger, setup_logging
from services import (
    MeshingService,
    PlaneSegmentationService,
    RenderingService,
    SparseDepthService,
    SynthService,
    TrainingService,
)
from services.synth_service import default_scene, ring_cameras
from services.sparse_depth_service import filter_window
from utils.dataModel import RunDir, SceneSpec
from utils.geometry import Bounds
from utils.tools import (
    CheckpointStore,
    load_dataset,
    normals_to_rgb,
    read_obj,
    read_xyz,
    save_dataset,
    unit_to_gray8,
    write_ablation,
    write_depth_pgm,
    write_matches,
    write_metrics,
    write_obj,
    write_pgm,
    write_ppm,
    write_segments,
    write_sparse_depth,
    write_xyz,
)


logger = get_logger(__name__)

ABLATION_CONFIGS = ('baseline', 'geo', 'plane', 'full')


class CliParser(argparse.ArgumentParser):
    """Argument parser raising UsageError instead of exiting."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def ablation_config(cfg: TrainConfig, name: str) -> TrainConfig:
    """
    One configuration of the ablation grid.

    ``baseline`` trains with color and Eikonal terms only, ``geo`` adds the
    approximate-depth term, ``plane`` adds the plane term, ``full`` uses both.
    """
    no_geo = {'lambda_geo_start': 0.0, 'lambda_geo_end': 0.0}
    no_plane = {'lambda_j': 0.0}
    if name == 'baseline':
        return cfg.replace(**no_geo, **no_plane)
    if name == 'geo':
        return cfg.replace(**no_plane)
    if name == 'plane':
        return cfg.replace(**no_geo)
    if name == 'full':
        return cfg
    raise UsageError(f"unknown ablation config {name!r}")


class Pipeline:
    """
    Application class orchestrating the services for each subcommand.

    Attributes:
        workers (int): worker cap handed to the services
    """

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or config.threads
        logger.debug(f"Pipeline initialized with {self.workers} workers")

    # ------------------------------------------------------------ helpers

    @staticmethod
    def resolve_config(preset_name: str, config_path: Optional[str], overrides: Sequence[str]) -> TrainConfig:
        """Preset, then config file, then ``key=value`` overrides."""
        cfg = preset(preset_name)
        if config_path:
            cfg = TrainConfig.load(config_path, base=cfg)
        if overrides:
            cfg = TrainConfig.loads('\n'.join(overrides), base=cfg, source='--set')
        cfg.validate()
        return cfg

    @staticmethod
    def run_config(run: RunDir) -> TrainConfig:
        return TrainConfig.load(run.config)

    # ------------------------------------------------------------ subcommands

    def synth(self, args) -> None:
        scene = SceneSpec.load_yaml(args.scene) if args.scene else default_scene()
        cams = ring_cameras(args.views, args.width, args.height)
        service = SynthService(scene, cams, self.workers)
        views = service.render()

        save_dataset(args.out, [v.image for v in views], cams, [v.depth for v in views])
        scene.save_yaml(os.path.join(args.out, 'scene.yaml'))
        write_xyz(os.path.join(args.out, 'gt_points.xyz'), service.gt_points(args.gt_points, args.seed))
        if args.matches > 0:
            matches, _ = service.correspondences(args.matches, args.noise, args.seed + 1, args.window)
            write_matches(os.path.join(args.out, 'matches.txt'), matches)
        logger.info(f"Synthetic dataset written to {args.out}")

    def match(self, args) -> None:
        dataset = load_dataset(args.data)
        service = SparseDepthService(args.max_corners, args.nms_radius, args.window, self.workers)
        matches = service.detect_and_match(dataset.images)
        out = args.out or os.path.join(args.data, 'matches.txt')
        write_matches(out, matches)
        logger.info(f"Wrote {len(matches)} correspondences to {out}")

    def triangulate(self, args) -> None:
        dataset = load_dataset(args.data)
        service = SparseDepthService(window=args.window, workers=self.workers)
        if dataset.matches:
            matches = filter_window(dataset.matches, args.window)
        else:
            logger.warning("Dataset has no matches.txt, detecting correspondences")
            matches = service.detect_and_match(dataset.images)
        max_gap = SparseDepthService.max_gap_for(dataset.bounds.diagonal, args.max_gap_fraction)
        depth_map = service.triangulate(matches, dataset.cameras, max_gap)
        write_sparse_depth(args.out, depth_map)
        stats = depth_map.stats
        logger.info(
            f"Wrote {len(depth_map)} approximate depths to {args.out} "
            f"(discarded: parallel={stats.parallel}, behind={stats.behind}, "
            f"large_gap={stats.large_gap}, outside_image={stats.outside_image})"
        )

    def segment(self, args) -> None:
        dataset = load_dataset(args.data)
        service = PlaneSegmentationService(args.k, args.min_size, args.sigma, args.min_fraction, self.workers)
        segments, masks = service.plane_masks(dataset.images)
        for view, (labels, mask) in enumerate(zip(segments, masks)):
            write_segments(args.out, view, labels, mask)
        logger.info(f"Wrote plane masks of {len(masks)} views to {args.out}")

    def train(self, args) -> None:
        cfg = self.resolve_config(args.preset, args.config, args.overrides)
        dataset = load_dataset(args.data, cfg.scene_radius)
        TrainingService(cfg, self.workers).train(dataset, RunDir(args.out))
        logger.info(f"Training run written to {args.out}")

    def mesh(self, args) -> None:
        run = RunDir(args.run)
        run.read_run_info()
        fields, cfg, bounds, _ = CheckpointStore(run.checkpoints).restore(args.checkpoint)
        resolution = args.resolution or cfg.mesh_resolution
        mesh = MeshingService(bounds, resolution, cfg.mesh_padding).extract(fields)
        write_obj(run.mesh, mesh)
        logger.info(f"Wrote mesh with {len(mesh.faces)} faces to {run.mesh}")

    def eval(self, args) -> None:
        run = RunDir(args.run)
        bounds = Bounds(*run.read_run_info()['bounds'])
        cfg = self.run_config(run)
        threshold = args.threshold or cfg.metric_threshold
        samples = args.samples or cfg.metric_samples

        mesh = read_obj(run.mesh)
        gt = read_xyz(args.gt)
        report, pred = MeshingService(bounds, cfg.mesh_resolution).evaluate(mesh, gt, threshold, samples, args.seed)
        write_metrics(run.file(RunDir.METRICS_CSV), run.file(RunDir.METRICS_TXT), report)
        write_xyz(run.file(RunDir.PRED_POINTS), pred)
        print(report.pretty())

    def render(self, args) -> None:
        run = RunDir(args.run)
        info = run.read_run_info()
        fields, cfg, bounds, _ = CheckpointStore(run.checkpoints).restore(args.checkpoint)
        dataset = load_dataset(args.data or info['data'], cfg.scene_radius)
        if not 0 <= args.view < len(dataset):
            raise UsageError(f"--view must be in [0, {len(dataset)}), got {args.view}")

        service = RenderingService(
            fields, bounds, cfg.near, cfg.samples_per_ray, cfg.far_policy, cfg.far, cfg.density_literal,
            margin=cfg.scene_radius,
        )
        images = service.render_view(dataset.views[args.view].camera)
        out = args.out or run.renders
        os.makedirs(out, exist_ok=True)
        stem = os.path.join(out, f"view_{args.view}")
        write_ppm(f"{stem}_color.ppm", images['color'])
        write_depth_pgm(f"{stem}_depth.pgm", images['depth'])
        write_ppm(f"{stem}_normal.ppm", normals_to_rgb(images['normal']))
        write_pgm(f"{stem}_plane.pgm", unit_to_gray8(images['plane']))
        logger.info(f"Wrote renders of view {args.view} to {out}")

    def ablate(self, args) -> None:
        cfg = self.resolve_config(args.preset, args.config, args.overrides)
        dataset = load_dataset(args.data, cfg.scene_radius)
        gt_path = args.gt or os.path.join(args.data, 'gt_points.xyz')
        gt = read_xyz(gt_path)
        os.makedirs(args.out, exist_ok=True)

        # Approximate depths and plane masks do not depend on the loss weights
        sparse_depth, plane_masks = TrainingService(cfg, self.workers).prepare(dataset)

        reports: Dict[str, object] = {}
        for name in ABLATION_CONFIGS:
            run_cfg = ablation_config(cfg, name)
            logger.info(f"Ablation '{name}': {run_cfg}")
            run = RunDir(os.path.join(args.out, name))
            result = TrainingService(run_cfg, self.workers).train(
                dataset, run, sparse_depth, plane_masks, prepared=True
            )
            meshing = MeshingService(dataset.bounds, run_cfg.mesh_resolution, run_cfg.mesh_padding)
            mesh = meshing.extract(result.fields)
            write_obj(run.mesh, mesh)
            report, pred = meshing.evaluate(mesh, gt, run_cfg.metric_threshold, run_cfg.metric_samples, run_cfg.seed)
            write_metrics(run.file(RunDir.METRICS_CSV), run.file(RunDir.METRICS_TXT), report)
            write_xyz(run.file(RunDir.PRED_POINTS), pred)
            reports[name] = report

        write_ablation(os.path.join(args.out, 'ablation.csv'), os.path.join(args.out, 'ablation.txt'), reports)
        with open(os.path.join(args.out, 'ablation.txt')) as f:
            print(f.read(), end='')


def build_parser() -> CliParser:
    parser = CliParser(prog='sdfrecon', description='Neural SDF reconstruction of indoor scenes')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ERROR or CRITICAL')
    sub = parser.add_subparsers(dest='command', metavar='<subcommand>', parser_class=CliParser)
    sub.required = True

    p = sub.add_parser('synth', help='render a synthetic dataset')
    p.add_argument('--out', required=True)
    p.add_argument('--scene', default=None, help='scene.yaml (default: built-in room)')
    p.add_argument('--views', type=int, default=20)
    p.add_argument('--width', type=int, default=64)
    p.add_argument('--height', type=int, default=64)
    p.add_argument('--gt-points', type=int, default=20000)
    p.add_argument('--matches', type=int, default=0, help='surface points for exact correspondences (0: none)')
    p.add_argument('--noise', type=float, default=0.0, help='pixel noise sigma of the correspondences')
    p.add_argument('--window', type=int, default=2)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('match', help='detect and match corners')
    p.add_argument('--data', required=True)
    p.add_argument('--out', default=None)
    p.add_argument('--window', type=int, default=2)
    p.add_argument('--max-corners', type=int, default=400)
    p.add_argument('--nms-radius', type=int, default=3)

    p = sub.add_parser('triangulate', help='approximate depths from correspondences')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--window', type=int, default=2)
    p.add_argument('--max-gap-fraction', type=float, default=0.005)

    p = sub.add_parser('segment', help='graph-based segmentation and plane masks')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--k', type=float, default=500.0)
    p.add_argument('--min-size', type=int, default=20)
    p.add_argument('--sigma', type=float, default=0.8)
    p.add_argument('--min-fraction', type=float, default=0.01)

    for name, help_text in (('train', 'optimise the scene fields'), ('ablate', 'run the four-configuration ablation')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--data', required=True)
        p.add_argument('--out', required=True)
        p.add_argument('--preset', default='desk', choices=sorted(PRESETS))
        p.add_argument('--config', default=None, help='key = value config file')
        p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
        if name == 'ablate':
            p.add_argument('--gt', default=None, help='ground-truth points (default: <data>/gt_points.xyz)')

    p = sub.add_parser('mesh', help='extract a mesh from the latest checkpoint')
    p.add_argument('--run', required=True)
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--resolution', type=int, default=None)

    p = sub.add_parser('eval', help='score a run mesh against ground-truth points')
    p.add_argument('--run', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--threshold', type=float, default=None)
    p.add_argument('--samples', type=int, default=None)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('render', help='render a dataset view of a trained run')
    p.add_argument('--run', required=True)
    p.add_argument('--view', type=int, required=True)
    p.add_argument('--data', default=None)
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--out', default=None)
    return parser


def run_pipeline(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and run one subcommand.

    Returns:
        Exit status: 0 ok, 1 usage or configuration error, 2 data error,
        3 numerical failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"sdfrecon: error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(log_level=args.log_level or config.log_level)
    try:
        config.validate()
        config.apply_thread_limits()
        handler = getattr(Pipeline(), args.command)
        handler(args)
    except SdfReconError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except ValueError as e:
        logger.error(f"Invalid environment: {e}")
        return 1
    return 0


def main() -> None:
    sys.exit(run_pipeline())


if __name__ == "__main__":
    main()
