import logging
from typing import Dict, Optional, Sequence

import numpy as np

from ..config.settings import RunConfig
from ..core.features import extract_features
from ..core.geometry import CameraView, Intrinsics
from ..core.losses import DepthMap
from ..core.synth import Scene
from ..core.tinynet import Mlp
from ..core.volume import SweepView, make_depth_planes, predict_depth
from ..exceptions import ContractViolation

logger = logging.getLogger(__name__)


class DepthEstimator:
    def __init__(self, config: RunConfig, scene: Optional[Scene] = None, net: Optional[Mlp] = None):
        """Plane-sweep depth for keyframes, from views registered one at a time"""
        self.config = config
        self.scene = scene
        self.net = net
        self.planes = make_depth_planes(config.d_min, config.d_max, config.n_planes)
        self.channel_config = config.channel_config()
        self.stride = config.feature_stride

        if config.reducer == "mlp" and net is None and config.depth_source == "estimate":
            raise ContractViolation("the mlp reducer needs a trained checkpoint")
        if config.extractor == "oracle" and scene is None and config.depth_source == "estimate":
            raise ContractViolation("oracle features need the scene description")

        self._views: Dict[int, SweepView] = {}

        # Estimator statistics
        self.stats = {"registered": 0, "estimated": 0, "skipped": 0}

    def register(self, frame_id: int, view: CameraView, image: Optional[np.ndarray] = None) -> None:
        """Extract and cache the features of one frame"""
        if frame_id in self._views or self.config.depth_source == "gt":
            return
        features = extract_features(
            self.config.extractor,
            self.config.feature_dim,
            self.config.patch_size,
            view,
            image=image,
            scene=self.scene,
            view_id=frame_id,
        )
        intrinsics = view.intrinsics
        if self.stride > 1:
            features = features.downsample(self.stride)
            intrinsics = intrinsics.subsampled(self.stride)
        self._views[frame_id] = SweepView(features, view.pose, intrinsics)
        self.stats["registered"] += 1

    def ready(self, ref_id: int, source_ids: Sequence[int]) -> bool:
        """Whether ``estimate`` can run for ``ref_id`` with what is registered so far"""
        if self.config.depth_source == "gt":
            return True
        return all(i in self._views for i in (ref_id, *source_ids))

    def estimate(
        self, ref_id: int, source_ids: Sequence[int], gt: Optional[DepthMap] = None
    ) -> Optional[DepthMap]:
        """Depth for ``ref_id``; ``None`` when the reference has no sources"""
        if self.config.depth_source == "gt":
            if gt is None:
                raise ContractViolation(f"ground-truth depth requested but missing for frame {ref_id}")
            self.stats["estimated"] += 1
            return gt

        if not source_ids:
            logger.warning(f"Keyframe {ref_id} has no source views, skipping depth estimation")
            self.stats["skipped"] += 1
            return None

        missing = [i for i in (ref_id, *source_ids) if i not in self._views]
        if missing:
            raise ContractViolation(f"frames {missing} were never registered")

        depth = predict_depth(
            self._views[ref_id],
            [self._views[i] for i in source_ids],
            self.planes,
            reducer=self.config.reducer,
            net=self.net,
            config=self.channel_config,
            max_sources=self.config.n_sources,
            temperature=self.config.temperature,
            rows_per_chunk=self.config.rows_per_chunk,
        )
        self.stats["estimated"] += 1
        logger.debug(f"Estimated depth for keyframe {ref_id} from {len(source_ids)} sources")
        return depth

    def intrinsics_for(self, frame_id: int, full: Intrinsics) -> Intrinsics:
        """Intrinsics matching the resolution of this frame's estimate"""
        if self.config.depth_source == "gt" or self.stride == 1:
            return full
        return self._views[frame_id].intrinsics
