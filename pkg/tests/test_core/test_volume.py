import itertools

import numpy as np
import pytest

from deskrecon.core.features import extract_oracle_features
from deskrecon.core.geometry import CameraView, Pose
from deskrecon.core.synth import Rect, Scene
from deskrecon.core.tinynet import IDENTITY, DenseLayer, Mlp
from deskrecon.core.volume import (
    ChannelConfig,
    ChannelLayout,
    CostSlice,
    MetadataVolume,
    SweepView,
    build_metadata_volume,
    channel_count,
    cost_to_depth,
    cost_to_depth_backward,
    load_volume,
    make_depth_planes,
    predict_depth,
    reduce_dot_sum,
    reduce_mlp,
    save_volume,
    zero_cost_volume,
)
from deskrecon.exceptions import ContractViolation, DataFormatError, DomainError


@pytest.fixture
def wall_scene():
    wall = Rect(axis=2, offset=2.0, lo=(-3.0, -3.0), hi=(3.0, 3.0), texture_seed=11)
    return Scene(primitives=(wall,), correlation_length=0.25)


def sweep_view(scene, pose, intrinsics, channels=8):
    features = extract_oracle_features(scene, CameraView(pose, intrinsics), channels)
    return SweepView(features, pose, intrinsics)


@pytest.fixture
def stereo(wall_scene, intrinsics):
    """Reference at the origin and a source 0.125 m to the right, both facing the wall"""
    ref = sweep_view(wall_scene, Pose.identity(), intrinsics)
    src = sweep_view(wall_scene, Pose(np.eye(3), (0.125, 0.0, 0.0)), intrinsics)
    return ref, src


def test_depth_planes_endpoints_and_midpoint():
    planes = make_depth_planes(0.25, 5.0, 64)
    assert planes.depths[0] == 0.25
    assert planes.depths[-1] == 5.0
    assert make_depth_planes(1.0, 3.0, 3).depths[1] == pytest.approx(1.5)


def test_depth_planes_are_increasing(rng):
    for _ in range(100):
        d_min = rng.uniform(0.05, 2.0)
        d_max = d_min + rng.uniform(0.01, 10.0)
        depths = make_depth_planes(d_min, d_max, int(rng.integers(2, 200))).depths
        assert np.all(np.diff(depths) > 0)


@pytest.mark.parametrize("args", [(0.0, 1.0, 4), (2.0, 1.0, 4), (1.0, 2.0, 1)])
def test_depth_planes_reject_bad_ranges(args):
    with pytest.raises(DomainError):
        make_depth_planes(*args)


def test_channel_count_example():
    assert channel_count(4, 2) == 32
    assert ChannelLayout(4, 2, ChannelConfig.dots_only()).width == 2


def test_channel_accounting_matches_built_volume(stereo):
    ref, src = stereo
    planes = make_depth_planes(1.0, 4.0, 2)
    for flags in itertools.product([False, True], repeat=7):
        config = ChannelConfig.from_bits(sum(int(f) << i for i, f in enumerate(flags)))
        volume = build_metadata_volume(ref, [src], planes, config, max_sources=3, window=(30, 20, 2, 2))
        assert volume.channels == channel_count(8, 3, config)
        assert volume.shape == (2, 2, 2, volume.channels)


def test_identical_source_has_unit_dots(stereo):
    ref, _ = stereo
    planes = make_depth_planes(0.5, 4.0, 8)
    volume = build_metadata_volume(ref, [ref], planes, max_sources=2)
    usable = volume.mask[..., 0] & ref.features.valid[None]
    assert usable.any()
    assert np.allclose(volume.dots[..., 0][usable], 1.0)
    # identity warp: source depth equals the plane depth
    z_src = volume.channel("depth_src")[..., 0]
    expected = np.broadcast_to(planes.depths[:, None, None], z_src.shape)
    assert np.allclose(z_src[usable], expected[usable], atol=1e-5)


def test_source_behind_the_planes_is_masked(stereo, wall_scene, intrinsics):
    ref, _ = stereo
    behind = sweep_view(wall_scene, Pose(np.eye(3), (0.0, 0.0, 10.0)), intrinsics)
    volume = build_metadata_volume(ref, [behind], make_depth_planes(0.5, 4.0, 6), max_sources=2)
    assert not volume.mask.any()
    assert np.all(volume.channel("mask") == 0.0)
    assert np.all(volume.channel("feat_src") == 0.0)
    assert np.all(volume.channel("dots") == 0.0)
    assert np.all(volume.channel("ray_src") == 0.0)
    assert np.all(volume.channel("pose_dist") == 0.0)


def test_padding_slots_are_zero(stereo):
    ref, src = stereo
    volume = build_metadata_volume(ref, [src], make_depth_planes(0.5, 4.0, 4), max_sources=4)
    assert volume.n_sources == 1
    assert not volume.mask[..., 1:].any()
    for name in ("dots", "depth_src", "angle", "pose_dist", "mask"):
        assert np.all(volume.channel(name)[..., 1:] == 0.0)


def test_reference_channels_are_filled(stereo):
    ref, src = stereo
    planes = make_depth_planes(0.5, 4.0, 4)
    volume = build_metadata_volume(ref, [src], planes, max_sources=1)
    z_ref = volume.channel("depth_ref")[..., 0]
    assert np.allclose(z_ref, planes.depths[:, None, None])
    assert np.allclose(np.linalg.norm(volume.channel("ray_ref"), axis=-1), 1.0, atol=1e-6)
    pose_dist = volume.channel("pose_dist")[..., 0][volume.mask[..., 0]]
    assert np.allclose(pose_dist, np.sqrt(0.125), atol=1e-6)


def test_build_rejects_bad_inputs(stereo, intrinsics):
    ref, src = stereo
    planes = make_depth_planes(0.5, 4.0, 4)
    with pytest.raises(DomainError):
        build_metadata_volume(ref, [], planes)
    with pytest.raises(DomainError):
        build_metadata_volume(ref, [src, src, src], planes, max_sources=2)
    with pytest.raises(DomainError):
        build_metadata_volume(ref, [src], planes, window=(60, 0, 10, 4))


def test_dot_sum_arithmetic():
    dots = np.array([0.9, 0.3]).reshape(1, 1, 1, 2)
    volume = MetadataVolume(
        data=np.zeros((1, 1, 1, 2), dtype=np.float32),
        dots=dots,
        mask=np.ones((1, 1, 1, 2), dtype=bool),
        planes=make_depth_planes(1.0, 2.0, 2),
        layout=ChannelLayout(1, 2, ChannelConfig.dots_only()),
        n_sources=2,
        window=(0, 0, 1, 1),
    )
    assert reduce_dot_sum(volume).values[0, 0, 0] == pytest.approx(1.2)
    masked = MetadataVolume(**{**volume.__dict__, "mask": np.zeros((1, 1, 1, 2), dtype=bool)})
    assert reduce_dot_sum(masked).values[0, 0, 0] == 0.0


def test_dot_sum_ignores_source_order(stereo, wall_scene, intrinsics):
    ref, src = stereo
    other = sweep_view(wall_scene, Pose(np.eye(3), (-0.1, 0.05, 0.0)), intrinsics)
    planes = make_depth_planes(0.5, 4.0, 8)
    forward = build_metadata_volume(ref, [src, other], planes)
    backward = build_metadata_volume(ref, [other, src], planes)
    assert np.array_equal(reduce_dot_sum(forward).values, reduce_dot_sum(backward).values)

    net = Mlp.create(forward.channels, hidden=8, n_hidden=1, seed=3)
    assert not np.allclose(reduce_mlp(forward, net).values, reduce_mlp(backward, net).values)


def test_dot_sum_peaks_at_the_true_plane(stereo):
    # the wall sits exactly on plane 4 (2 m) where the disparity is a whole 3 pixels
    ref, src = stereo
    planes = make_depth_planes(1.0, 4.0, 7)
    assert planes.depths[4] == pytest.approx(2.0)
    volume = build_metadata_volume(ref, [src], planes, max_sources=1)
    best = np.argmax(reduce_dot_sum(volume).values, axis=0)
    seen = volume.mask[4, ..., 0] & ref.features.valid
    assert seen.sum() > 1000
    assert np.mean(best[seen] == 4) >= 0.99


def test_mlp_selecting_dots_matches_dot_sum(stereo):
    ref, src = stereo
    volume = build_metadata_volume(ref, [src], make_depth_planes(0.5, 4.0, 6), max_sources=2)
    weight = np.zeros((1, volume.channels))
    weight[0, volume.layout.slices["dots"]] = 1.0
    net = Mlp([DenseLayer(weight, np.zeros(1), IDENTITY)])
    assert np.allclose(reduce_mlp(volume, net).values, reduce_dot_sum(volume).values, atol=1e-6)

    zero_net = Mlp([DenseLayer(np.zeros((1, volume.channels)), np.zeros(1), IDENTITY)])
    assert np.all(reduce_mlp(volume, zero_net).values == 0.0)


def test_mlp_reduction_is_deterministic_and_checks_width(stereo):
    ref, src = stereo
    volume = build_metadata_volume(ref, [src], make_depth_planes(0.5, 4.0, 4), max_sources=2)
    net = Mlp.create(volume.channels, hidden=16, n_hidden=2, seed=9)
    first = reduce_mlp(volume, net).values
    assert reduce_mlp(volume, net).values.tobytes() == first.tobytes()
    with pytest.raises(ContractViolation):
        reduce_mlp(volume, Mlp.create(volume.channels + 1, hidden=4, n_hidden=1))


def test_cost_to_depth_examples():
    planes = make_depth_planes(1.0, 4.0, 5)
    one_hot = np.zeros((5, 1, 1))
    one_hot[2] = 1.0
    assert cost_to_depth(CostSlice(one_hot), planes, temperature=1e-3).depth[0, 0] == pytest.approx(
        planes.depths[2]
    )
    uniform = cost_to_depth(CostSlice(np.zeros((5, 2, 3))), planes)
    assert np.allclose(uniform.depth, planes.depths.mean())

    peaks = np.full((5, 1, 1), -50.0)
    peaks[1] = peaks[3] = 0.0
    assert cost_to_depth(CostSlice(peaks), planes).depth[0, 0] == pytest.approx(
        (planes.depths[1] + planes.depths[3]) / 2
    )
    with pytest.raises(DomainError):
        cost_to_depth(CostSlice(peaks), planes, temperature=0.0)


def test_cost_to_depth_backward_matches_finite_differences(rng):
    planes = make_depth_planes(0.5, 4.0, 6)
    values = rng.normal(size=(6, 2, 2))
    upstream = rng.normal(size=(2, 2))
    grad = cost_to_depth_backward(CostSlice(values), planes, upstream, temperature=0.7)

    h = 1e-6
    numeric = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        plus, minus = values.copy(), values.copy()
        plus[index] += h
        minus[index] -= h
        f_plus = np.sum(cost_to_depth(CostSlice(plus), planes, 0.7).depth * upstream)
        f_minus = np.sum(cost_to_depth(CostSlice(minus), planes, 0.7).depth * upstream)
        numeric[index] = (f_plus - f_minus) / (2 * h)
    assert np.allclose(grad, numeric, atol=1e-6)


def test_zero_cost_volume(rng):
    cost = CostSlice(rng.normal(size=(4, 3, 3)))
    zeros = zero_cost_volume(cost)
    assert np.all(zeros.values == 0.0)
    planes = make_depth_planes(1.0, 2.0, 4)
    assert np.allclose(cost_to_depth(zeros, planes).depth, planes.depths.mean())


def test_predict_depth_recovers_the_wall(stereo):
    ref, src = stereo
    planes = make_depth_planes(1.0, 4.0, 7)
    depth = predict_depth(ref, [src], planes, temperature=0.002, rows_per_chunk=5)
    centre = depth.depth[10:38, 10:54]
    assert np.median(np.abs(centre - 2.0)) < 0.05


def test_predict_depth_chunking_does_not_change_the_result(stereo):
    ref, src = stereo
    planes = make_depth_planes(1.0, 4.0, 7)
    banded = predict_depth(ref, [src], planes, rows_per_chunk=7)
    whole = predict_depth(ref, [src], planes, rows_per_chunk=48)
    assert np.allclose(banded.depth, whole.depth)


def test_predict_depth_validates_reducer(stereo):
    ref, src = stereo
    planes = make_depth_planes(1.0, 4.0, 4)
    with pytest.raises(DomainError):
        predict_depth(ref, [src], planes, reducer="mean")
    with pytest.raises(ContractViolation):
        predict_depth(ref, [src], planes, reducer="mlp")


def test_volume_dump_round_trip(tmp_path, stereo):
    ref, src = stereo
    planes = make_depth_planes(0.5, 4.0, 3)
    volume = build_metadata_volume(ref, [src], planes, max_sources=2, window=(0, 0, 6, 4))
    save_volume(tmp_path / "volume.bin", volume)
    dump = load_volume(tmp_path / "volume.bin")
    assert np.array_equal(dump.data, volume.data)
    assert dump.slots == 2
    assert dump.config == ChannelConfig.full()

    (tmp_path / "bad.bin").write_bytes(b"NOTAVOLUME" + bytes(40))
    with pytest.raises(DataFormatError):
        load_volume(tmp_path / "bad.bin")
