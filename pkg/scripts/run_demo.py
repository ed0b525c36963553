#!/usr/bin/env python3
"""
Demo runner: one small synthetic reconstruction, end to end
"""

import asyncio
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))


def check_environment():
    """Report any DESKRECON_* overrides picked up from the environment"""
    overrides = sorted(key for key in os.environ if key.startswith('DESKRECON_'))
    if overrides:
        print("⚙️  Environment overrides:")
        for key in overrides:
            print(f"   - {key}={os.environ[key]}")
    else:
        print("✅ No environment overrides, using defaults")
    return True


async def run_pipeline(output_dir: Path):
    """Render, estimate, fuse and evaluate a short orbit"""
    try:
        print("🧪 Running reconstruction pipeline...")
        from deskrecon.config.settings import RunConfig
        from deskrecon.pipeline import ReconstructionPipeline
        from deskrecon.utils.logs import configure_logging

        config = RunConfig(n_frames=24, n_planes=32, voxel_size=0.08, mesh_samples=20000)
        configure_logging(config.log_level, output_dir)
        result = await ReconstructionPipeline(config).run_complete_pipeline(output_dir)

        if not result['success']:
            print(f"❌ Pipeline failed: {result['error_type']}: {result['error']}")
            return False

        depth = result['depth_metrics']
        print(f"✅ Fused {result['fused_frames']} of {result['keyframes']} keyframes "
              f"in {result['execution_time_seconds']:.1f}s")
        print(f"📏 Depth: abs_rel {depth['abs_rel']:.4f}, δ<1.25 {depth['delta_1_25']:.1f}%")
        if result['mesh_metrics']:
            mesh = result['mesh_metrics']
            print(f"🧊 Mesh: chamfer {mesh['chamfer']:.2f} cm, F-score {mesh['fscore']:.3f}")
        print(f"⏱️  Integration p50 {result['latency']['p50_ms']:.2f} ms")
        print(f"📁 Outputs in {output_dir}")
        return True

    except Exception as e:
        print(f"❌ Pipeline run failed: {e}")
        return False


async def main():
    """Main demo function"""
    print("🎬 deskrecon - Demo Run")
    print("=" * 50)

    load_dotenv()
    check_environment()

    output_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path('outputs') / 'demo'
    if not await run_pipeline(output_dir):
        return 1
    return 0


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        print("\n👋 Demo interrupted")
        sys.exit(0)
