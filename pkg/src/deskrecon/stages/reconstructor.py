import logging

from ..config.settings import RunConfig
from ..core.fusion import FusionInput, FusionResult, IntegrationResult, LatencyStats, TsdfFusion, TsdfVolume

logger = logging.getLogger(__name__)


class Reconstructor:
    def __init__(self, config: RunConfig, trajectory_frames: int = 0):
        """Incremental TSDF fusion over the configured room"""
        self.config = config
        self.fusion = TsdfFusion(
            TsdfVolume.for_room(config.room_extents, config.voxel_size),
            config.truncation,
            config.max_weight,
            trajectory_frames,
        )

        # Fusion statistics
        self.stats = {"integrated": 0, "voxels_updated": 0}

    @property
    def volume(self) -> TsdfVolume:
        return self.fusion.volume

    @property
    def latency(self) -> LatencyStats:
        return self.fusion.latency

    def integrate(self, item: FusionInput) -> IntegrationResult:
        result = self.fusion.integrate(item)
        self.stats["integrated"] += 1
        self.stats["voxels_updated"] += result.voxels_updated
        return result

    def extract(self) -> FusionResult:
        """Mesh of everything integrated so far"""
        return self.fusion.finish()
