import numpy as np
import pytest

from deskrecon.core.features import (
    FeatureMap,
    extract_features,
    extract_oracle_features,
    extract_patch_features,
    feature_dot,
)
from deskrecon.core.geometry import CameraView, Pose
from deskrecon.core.synth import Rect, Scene, spectral_texture
from deskrecon.exceptions import ContractViolation, DomainError


@pytest.fixture
def wall_scene():
    """A single textured square 2 m in front of the origin, smaller than the field of view"""
    wall = Rect(axis=2, offset=2.0, lo=(-0.5, -0.5), hi=(0.5, 0.5), texture_seed=17)
    return Scene(primitives=(wall,), correlation_length=0.25)


def test_oracle_features_are_unit_on_hits_and_zero_on_misses(wall_scene, intrinsics):
    fmap = extract_oracle_features(wall_scene, CameraView(Pose.identity(), intrinsics), 16)
    assert fmap.channels == 16
    norms = np.linalg.norm(fmap.data, axis=-1)
    assert np.allclose(norms[fmap.valid], 1.0)
    assert not fmap.valid[0, 0]
    assert np.all(fmap.data[~fmap.valid] == 0.0)
    assert fmap.valid[24, 32]


def test_oracle_features_are_view_invariant(wall_scene, intrinsics):
    # 0.125 m baseline at 2 m with fx=48 is a disparity of exactly 3 pixels
    ref = extract_oracle_features(wall_scene, CameraView(Pose.identity(), intrinsics), 16)
    src = extract_oracle_features(
        wall_scene, CameraView(Pose(np.eye(3), (0.125, 0.0, 0.0)), intrinsics), 16
    )
    both = ref.valid[:, 3:] & src.valid[:, :-3]
    assert both.sum() > 100
    dots = np.sum(ref.data[:, 3:] * src.data[:, :-3], axis=-1)
    assert np.allclose(dots[both], 1.0, atol=1e-6)


def test_oracle_features_need_two_channels(wall_scene, intrinsics):
    with pytest.raises(DomainError):
        extract_oracle_features(wall_scene, CameraView(Pose.identity(), intrinsics), 1)


def test_texture_discriminates_distant_points(rng):
    length = 0.25
    a = rng.uniform(-2.0, 2.0, size=(10_000, 3))
    direction = rng.normal(size=(10_000, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    b = a + direction * rng.uniform(length, 3 * length, size=(10_000, 1))

    fa = spectral_texture(a, 5, 16, length)
    fb = spectral_texture(b, 5, 16, length)
    fa /= np.linalg.norm(fa, axis=1, keepdims=True)
    fb /= np.linalg.norm(fb, axis=1, keepdims=True)
    assert np.mean(np.sum(fa * fb, axis=1) < 0.9) >= 0.95


def test_texture_is_deterministic(rng):
    points = rng.normal(size=(10, 3))
    assert np.array_equal(spectral_texture(points, 3, 8, 0.25), spectral_texture(points, 3, 8, 0.25))


def test_patch_features_on_constant_image_are_invalid():
    fmap = extract_patch_features(np.full((10, 12), 0.4), 5)
    assert fmap.channels == 25
    assert not fmap.valid.any()
    assert np.all(fmap.data == 0.0)


def test_patch_features_self_dot_is_one(rng):
    fmap = extract_patch_features(rng.uniform(size=(16, 20)), 3)
    dots = np.sum(fmap.data * fmap.data, axis=-1)
    assert fmap.valid.all()
    assert np.allclose(dots, 1.0)


def test_patch_features_affine_invariance(rng):
    image = rng.uniform(size=(16, 20))
    base = extract_patch_features(image, 5)
    scaled = extract_patch_features(3.0 * image + 7.0, 5)
    assert np.array_equal(base.valid, scaled.valid)
    assert np.allclose(base.data, scaled.data, atol=1e-6)


def test_patch_features_on_shifted_ramp():
    # zero-mean patches of a linear ramp do not depend on position away from the border
    ramp = np.tile(np.arange(20, dtype=np.float64), (12, 1))
    fmap = extract_patch_features(ramp, 5)
    inner = fmap.data[2:-2, 2:-2]
    dots = np.sum(inner[:, 1:] * inner[:, :-1], axis=-1)
    assert np.allclose(dots, 1.0)


def test_patch_size_must_be_odd():
    with pytest.raises(DomainError):
        extract_patch_features(np.zeros((8, 8)), 4)


def test_downsample_keeps_every_other_pixel(rng):
    fmap = extract_patch_features(rng.uniform(size=(16, 20)), 3)
    half = fmap.downsample(2)
    assert (half.height, half.width) == (8, 10)
    assert np.allclose(half.data, fmap.data[::2, ::2])


def test_feature_map_rejects_non_finite():
    data = np.zeros((2, 2, 3))
    data[0, 0, 0] = np.nan
    with pytest.raises(DomainError):
        FeatureMap(data, np.ones((2, 2), dtype=bool))
    with pytest.raises(ContractViolation):
        FeatureMap(np.zeros((2, 2, 3)), np.ones((3, 2), dtype=bool))


def test_extract_features_dispatch(wall_scene, intrinsics):
    view = CameraView(Pose.identity(), intrinsics)
    with pytest.raises(ContractViolation):
        extract_features("oracle", 8, 5, view)
    with pytest.raises(ContractViolation):
        extract_features("patch", 8, 5, view)
    with pytest.raises(DomainError):
        extract_features("cnn", 8, 5, view, scene=wall_scene)
    fmap = extract_features("oracle", 8, 5, view, scene=wall_scene, view_id=3)
    assert fmap.view_id == 3


def test_feature_dot():
    unit = np.array([0.6, 0.8])
    assert feature_dot(unit, unit) == pytest.approx(1.0)
    assert feature_dot([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert feature_dot([1.0, 2.0], [3.0, -1.0]) == 1.0
    with pytest.raises(ContractViolation):
        feature_dot([1.0, 2.0], [1.0, 2.0, 3.0])
