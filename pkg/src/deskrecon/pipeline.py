import asyncio
import logging
from collections import deque
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, AsyncIterator, Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .config.settings import RunConfig
from .core.evaluation import (
    DepthMetrics,
    aggregate_depth_metrics,
    apply_cull_mask,
    depth_metrics,
    match_resolution,
    mesh_metrics,
    points_from_depth_maps,
)
from .core.fusion import FusionInput
from .core.geometry import CameraView
from .core.keyframing import build_keyframe_set
from .core.synth import generate_scene, generate_trajectory, render_depth
from .core.tinynet import Mlp
from .exceptions import EmptyResultError
from .stages.depth_estimator import DepthEstimator
from .stages.reconstructor import Reconstructor
from .utils.dataset import TrajectoryDataset, frame_stem
from .utils.formats import (
    read_depth_pgm,
    read_intrinsics,
    write_depth_pgm,
    write_intrinsics,
    write_latency,
    write_ply,
    write_report,
)

logger = logging.getLogger(__name__)


@dataclass
class _Failed:
    error: BaseException


class ReconstructionPipeline:
    def __init__(self, config: RunConfig, net: Optional[Mlp] = None):
        """Initialize the reconstruction pipeline for one run configuration"""
        self.config = config
        self.net = net

        # Pipeline statistics
        self.stats = {
            "runs": 0,
            "successes": 0,
            "failures": 0,
            "last_run": None,
        }

    async def _stream(self, frame_ids: Sequence[int], load: Callable[[int], Any]) -> AsyncIterator:
        """Load frames in worker threads, yielding them in order through a bounded queue"""
        queue: asyncio.Queue = asyncio.Queue(maxsize=self.config.queue_size)

        async def produce():
            for frame_id in frame_ids:
                try:
                    item = await asyncio.to_thread(load, frame_id)
                except Exception as e:
                    await queue.put(_Failed(e))
                    return
                await queue.put((frame_id, item))
            await queue.put(None)

        producer = asyncio.create_task(produce())
        try:
            while True:
                entry = await queue.get()
                if entry is None:
                    break
                if isinstance(entry, _Failed):
                    raise entry.error
                yield entry
        finally:
            producer.cancel()

    def _begin(self) -> datetime:
        start_time = datetime.now()
        self.stats["runs"] += 1
        self.stats["last_run"] = start_time
        return start_time

    def _finish(self, start_time: datetime, result: Dict[str, Any]) -> Dict[str, Any]:
        execution_time = (datetime.now() - start_time).total_seconds()
        self.stats["successes"] += 1
        logger.info(f"Pipeline completed successfully in {execution_time:.2f} seconds")
        return {
            "success": True,
            **result,
            "execution_time_seconds": execution_time,
            "timestamp": start_time.isoformat(),
            "stats": self.stats,
        }

    def _fail(self, start_time: datetime, error: Exception) -> Dict[str, Any]:
        self.stats["failures"] += 1
        execution_time = (datetime.now() - start_time).total_seconds()
        logger.error(f"Pipeline failed after {execution_time:.2f} seconds: {error}")
        return {
            "success": False,
            "error": str(error),
            "error_type": type(error).__name__,
            "execution_time_seconds": execution_time,
            "timestamp": start_time.isoformat(),
            "stats": self.stats,
        }

    async def run_complete_pipeline(self, output_dir: Path) -> Dict[str, Any]:
        """Render a synthetic trajectory, estimate keyframe depth, fuse and evaluate"""
        start_time = self._begin()
        cfg = self.config
        output_dir = Path(output_dir)

        try:
            logger.info("Starting reconstruction pipeline...")

            # Step 1: Build the synthetic scene and camera path
            logger.info("Step 1: Generating scene and trajectory...")
            scene = await asyncio.to_thread(generate_scene, cfg.scene_config())
            trajectory = await asyncio.to_thread(
                generate_trajectory,
                scene,
                cfg.n_frames,
                cfg.motion,
                cfg.seed,
                cfg.intrinsics(),
                cfg.orbit_radius,
                cfg.line_step,
            )

            # Step 2: Select keyframes and their sources
            logger.info("Step 2: Selecting keyframes...")
            keyframes = build_keyframe_set(
                trajectory, cfg.t_min, cfg.t_max, cfg.n_sources, online=cfg.online_sources
            )

            # Step 3: Stream keyframes through depth estimation into fusion
            logger.info(f"Step 3: Estimating depth and fusing {len(keyframes.keyframe_ids)} keyframes...")
            estimator = DepthEstimator(cfg, scene=scene, net=self.net)
            reconstructor = Reconstructor(cfg, trajectory_frames=len(trajectory))

            def render(frame_id: int):
                frame = trajectory.get(frame_id)
                return render_depth(scene, CameraView(frame.pose, frame.intrinsics))

            gt_views: List[CameraView] = []
            gt_depths = []
            per_frame: List[DepthMetrics] = []

            def estimate_and_fuse(frame_id: int, rendered) -> None:
                depth = estimator.estimate(frame_id, keyframes.sources_for(frame_id), rendered.depth)
                if depth is None:
                    return
                try:
                    per_frame.append(depth_metrics(depth, match_resolution(rendered.depth, depth.shape)))
                except EmptyResultError:
                    logger.warning(f"Keyframe {frame_id} has no valid ground truth, not scored")
                intrinsics = estimator.intrinsics_for(frame_id, rendered.intrinsics)
                reconstructor.integrate(FusionInput(frame_id, depth, rendered.pose, intrinsics))

            # offline sources can lie ahead in the stream; keyframes wait, in order, until theirs arrive
            waiting: Deque[Tuple[int, Any]] = deque()
            async for frame_id, rendered in self._stream(keyframes.keyframe_ids, render):
                gt_views.append(rendered.view)
                gt_depths.append(rendered.depth)
                estimator.register(frame_id, rendered.view, rendered.image)
                waiting.append((frame_id, rendered))
                while waiting and estimator.ready(waiting[0][0], keyframes.sources_for(waiting[0][0])):
                    estimate_and_fuse(*waiting.popleft())
            if waiting:
                held = [frame_id for frame_id, _ in waiting]
                logger.warning(f"Keyframes {held} still wait on unregistered sources")
                for item in waiting:
                    estimate_and_fuse(*item)

            if reconstructor.stats["integrated"] == 0:
                raise EmptyResultError("no keyframe produced a depth map to fuse")

            # Step 4: Extract the mesh and cull what no camera saw
            logger.info("Step 4: Extracting mesh...")
            fusion = reconstructor.extract()
            mesh = apply_cull_mask(fusion.mesh, gt_views, cfg.cull_far)

            # Step 5: Evaluate against ground truth
            logger.info("Step 5: Evaluating depth and mesh...")
            depth_summary = aggregate_depth_metrics(per_frame)
            gt_points = points_from_depth_maps(gt_depths, gt_views)
            mesh_summary = None
            if mesh.is_empty:
                logger.warning("Fused mesh is empty, skipping mesh metrics")
            else:
                mesh_summary = await asyncio.to_thread(
                    mesh_metrics, mesh, gt_points, cfg.mesh_threshold_cm, cfg.mesh_samples, cfg.seed
                )

            # Step 6: Write artifacts
            logger.info("Step 6: Writing outputs...")
            output_dir.mkdir(parents=True, exist_ok=True)
            write_ply(output_dir / "mesh.ply", mesh)
            write_latency(output_dir, fusion.latency)
            write_report(output_dir / "depth_metrics.txt", depth_summary.as_dict())
            if mesh_summary is not None:
                write_report(output_dir / "mesh_metrics.txt", mesh_summary.as_dict())
            cfg.save(output_dir)

            return self._finish(
                start_time,
                {
                    "mesh_file": str(output_dir / "mesh.ply"),
                    "keyframes": len(keyframes.keyframe_ids),
                    "fused_frames": reconstructor.stats["integrated"],
                    "depth_metrics": depth_summary.as_dict(),
                    "mesh_metrics": mesh_summary.as_dict() if mesh_summary else None,
                    "latency": fusion.latency.summary(),
                    "estimator_stats": estimator.stats,
                },
            )

        except Exception as e:
            return self._fail(start_time, e)

    async def sweep_dataset(self, dataset: TrajectoryDataset, output_dir: Path, scene=None) -> Dict[str, Any]:
        """Estimate depth for every keyframe of a dataset and write 16-bit PGMs"""
        start_time = self._begin()
        output_dir = Path(output_dir)

        try:
            if dataset.keyframes is None:
                raise EmptyResultError(f"{dataset.root} has no keyframes.txt to sweep")
            keyframe_ids = dataset.keyframes.keyframe_ids

            # Step 1: Register every keyframe, sources may come later in the file
            logger.info(f"Step 1: Extracting features for {len(keyframe_ids)} keyframes...")
            estimator = DepthEstimator(self.config, scene=scene, net=self.net)
            frames = {f.frame_id: f for f in dataset.trajectory}
            async for frame_id, image in self._stream(keyframe_ids, dataset.image):
                frame = frames[frame_id]
                estimator.register(frame_id, CameraView(frame.pose, frame.intrinsics), image)

            # Step 2: Sweep
            logger.info("Step 2: Plane sweeping keyframes...")
            written = []
            intrinsics = None
            for frame_id in keyframe_ids:
                gt = dataset.depth(frame_id) if self.config.depth_source == "gt" else None
                depth = await asyncio.to_thread(
                    estimator.estimate, frame_id, dataset.keyframes.sources_for(frame_id), gt
                )
                if depth is None:
                    continue
                write_depth_pgm(output_dir / f"{frame_stem(frame_id)}.depth.pgm", depth)
                intrinsics = estimator.intrinsics_for(frame_id, dataset.intrinsics)
                written.append(frame_id)

            if not written:
                raise EmptyResultError("no keyframe had sources to sweep against")
            write_intrinsics(output_dir / "intrinsics.txt", intrinsics)
            self.config.save(output_dir)
            return self._finish(start_time, {"depth_maps": len(written), "estimator_stats": estimator.stats})

        except Exception as e:
            return self._fail(start_time, e)

    async def fuse_dataset(
        self, dataset: TrajectoryDataset, output_dir: Path, depth_dir: Optional[Path] = None
    ) -> Dict[str, Any]:
        """Fuse ground-truth or predicted keyframe depths into a mesh"""
        start_time = self._begin()
        output_dir = Path(output_dir)

        try:
            frames = {f.frame_id: f for f in dataset.trajectory}
            if depth_dir is not None:
                depth_dir = Path(depth_dir)
                frame_ids = sorted(
                    fid for fid in frames if (depth_dir / f"{frame_stem(fid)}.depth.pgm").is_file()
                )
                intrinsics_path = depth_dir / "intrinsics.txt"
                intrinsics = dataset.intrinsics
                if intrinsics_path.is_file():
                    intrinsics = read_intrinsics(intrinsics_path)

                def load(frame_id: int):
                    return read_depth_pgm(depth_dir / f"{frame_stem(frame_id)}.depth.pgm")

            else:
                frame_ids = list(dataset.keyframes.keyframe_ids if dataset.keyframes else sorted(frames))
                intrinsics = dataset.intrinsics
                load = dataset.depth

            if not frame_ids:
                raise EmptyResultError("no depth maps to fuse")

            # Step 1: Integrate
            logger.info(f"Step 1: Fusing {len(frame_ids)} depth maps...")
            reconstructor = Reconstructor(self.config, trajectory_frames=len(frames))
            async for frame_id, depth in self._stream(frame_ids, load):
                reconstructor.integrate(FusionInput(frame_id, depth, frames[frame_id].pose, intrinsics))

            # Step 2: Extract
            logger.info("Step 2: Extracting mesh...")
            fusion = reconstructor.extract()
            output_dir.mkdir(parents=True, exist_ok=True)
            write_ply(output_dir / "mesh.ply", fusion.mesh)
            write_latency(output_dir, fusion.latency)
            self.config.save(output_dir)

            return self._finish(
                start_time,
                {
                    "mesh_file": str(output_dir / "mesh.ply"),
                    "fused_frames": reconstructor.stats["integrated"],
                    "triangles": len(fusion.mesh.triangles),
                    "latency": fusion.latency.summary(),
                },
            )

        except Exception as e:
            return self._fail(start_time, e)
