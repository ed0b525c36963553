import numpy as np
import pytest

from deskrecon.core.geometry import CameraView
from deskrecon.core.keyframing import KeyframeSet
from deskrecon.core.synth import SceneConfig, generate_scene, generate_trajectory, render_depth
from deskrecon.exceptions import DataFormatError
from deskrecon.utils.dataset import load_dataset, write_dataset


@pytest.fixture
def written(tmp_path, intrinsics):
    cfg = SceneConfig(seed=1, n_boxes=1, n_spheres=1)
    scene = generate_scene(cfg)
    trajectory = generate_trajectory(scene, 3, "orbit", intrinsics=intrinsics)
    views = [(f.frame_id, render_depth(scene, CameraView(f.pose, f.intrinsics))) for f in trajectory.frames]
    keyframes = KeyframeSet((0, 2), {2: (0,)})
    root = write_dataset(tmp_path / "scene", views, intrinsics, scene_config=cfg, keyframes=keyframes)
    return root, dict(views), cfg


def test_layout_on_disk(written):
    root, _, _ = written
    names = sorted(p.name for p in (root / "frames").iterdir())
    assert names[:3] == ["000000.depth.pgm", "000000.pgm", "000000.pose.txt"]
    assert len(names) == 9
    assert (root / "intrinsics.txt").is_file()
    assert (root / "keyframes.txt").read_text() == "0:\n2: 0\n"


def test_load_restores_everything(written, intrinsics):
    root, views, cfg = written
    dataset = load_dataset(root)
    assert dataset.intrinsics == intrinsics
    assert [f.frame_id for f in dataset.trajectory.frames] == [0, 1, 2]
    for frame in dataset.trajectory.frames:
        assert np.array_equal(frame.pose.matrix(), views[frame.frame_id].pose.matrix())
    assert dataset.keyframes.sources_for(2) == (0,)
    assert dataset.scene_config == cfg

    depth = dataset.depth(1)
    original = views[1].depth
    assert np.array_equal(depth.valid, original.valid)
    assert np.abs(depth.depth - original.depth)[original.valid].max() <= 0.0005 + 1e-12
    assert dataset.image(1).shape == intrinsics.shape
    assert dataset.has_depth(1)


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_directory_without_frames(tmp_path, intrinsics):
    root = write_dataset(tmp_path / "empty", [], intrinsics)
    with pytest.raises(DataFormatError):
        load_dataset(root)


def test_bad_scene_description(written):
    root, _, _ = written
    (root / "scene.json").write_text('{"seed": 1}\n')
    with pytest.raises(DataFormatError) as excinfo:
        load_dataset(root)
    assert "scene.json" in str(excinfo.value)


def test_bad_frame_name(written):
    root, _, _ = written
    (root / "frames" / "first.pose.txt").write_text("")
    with pytest.raises(DataFormatError):
        load_dataset(root)
