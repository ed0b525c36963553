#!/usr/bin/env python3
"""
Project information and usage guide
"""


def show_project_structure():
    """Show the project structure"""
    print("📁 Project Structure:")
    print("=" * 50)

    structure = """
deskrecon/
├── 📄 pyproject.toml          # Project configuration
├── 📄 .env                    # Optional DESKRECON_* overrides
├── 📄 README.md               # Documentation
├── 📁 src/
│   └── deskrecon/
│       ├── 📄 main.py                 # Command-line entry point
│       ├── 📄 pipeline.py             # Async reconstruction orchestrator
│       ├── 📄 exceptions.py           # Error hierarchy
│       ├── 📁 core/                   # Geometry, cost volume, MLP, fusion, evaluation
│       │   ├── 📄 geometry.py         # Poses, intrinsics, projection
│       │   ├── 📄 features.py         # Oracle and patch feature maps
│       │   ├── 📄 volume.py           # Metadata cost volume and plane sweep
│       │   ├── 📄 tinynet.py          # MLP with manual backprop and AdamW
│       │   ├── 📄 losses.py           # Depth, gradient, normal and multi-view losses
│       │   ├── 📄 keyframing.py       # Keyframe and source selection
│       │   ├── 📄 fusion.py           # TSDF integration and marching cubes
│       │   ├── 📄 evaluation.py       # Depth and mesh metrics
│       │   ├── 📄 synth.py            # Ray-cast synthetic rooms
│       │   └── 📄 training.py         # Training loop and ablations
│       ├── 📁 stages/                 # Depth estimation and fusion stages
│       ├── 📁 config/
│       │   └── 📄 settings.py         # Run configuration
│       └── 📁 utils/                  # File formats, datasets, logging
├── 📁 scripts/                       # Utility scripts
│   ├── 📄 run_demo.py                # One small end-to-end run
│   └── 📄 show_project_info.py       # This guide
├── 📁 docs/
│   └── 📄 formats.md                 # On-disk file formats
└── 📁 tests/                         # Test files
    ├── 📄 test_pipeline.py
    ├── 📄 test_cli.py
    ├── 📁 test_core/
    └── 📁 test_utils/
"""
    print(structure)


def show_commands():
    """Show the command-line verbs"""
    print("\n🔧 Commands:")
    print("=" * 50)

    commands = [
        ("synth", "Render a synthetic trajectory dataset"),
        ("sweep", "Estimate keyframe depth maps for a dataset"),
        ("train", "Train the cost-volume MLP"),
        ("ablate", "Run the ablation matrix"),
        ("fuse", "Fuse depth maps into a mesh"),
        ("eval-depth", "Depth metrics of predicted depth maps"),
        ("eval-mesh", "Mesh accuracy, completeness and F-score"),
        ("bench", "Time TSDF integration"),
        ("info", "Print the resolved configuration"),
    ]

    for name, description in commands:
        print(f"• {name:12} - {description}")


def show_usage():
    """Show a typical session"""
    print("\n⚙️  Typical Session:")
    print("=" * 50)

    usage = """
1. 🔧 Install Dependencies:
   uv sync

2. 🎥 Render a dataset:
   uv run deskrecon synth --out outputs/room

3. 📏 Estimate and score depth:
   uv run deskrecon sweep --data outputs/room --out outputs/depth
   uv run deskrecon eval-depth --data outputs/room --depth outputs/depth --out outputs/scores

4. 🧊 Fuse and score the mesh:
   uv run deskrecon fuse --data outputs/room --depth outputs/depth --out outputs/mesh
   uv run deskrecon eval-mesh --pred outputs/mesh/mesh.ply --data outputs/room --cull --out outputs/scores

5. 🧪 Run the tests:
   uv run pytest -m "not slow"
"""
    print(usage)


def main():
    """Main function"""
    print("🎬 deskrecon")
    print("🧊 Multi-view depth and TSDF reconstruction")
    print("=" * 60)

    show_project_structure()
    show_commands()
    show_usage()

    print("\n💡 Quick Start for Demo:")
    print("=" * 50)
    print("uv run python scripts/run_demo.py")


if __name__ == "__main__":
    main()
