import numpy as np
import pytest

from deskrecon.core.geometry import CameraView, Intrinsics, Pose
from deskrecon.core.losses import (
    DepthMap,
    LossBreakdown,
    LossResult,
    LossWeights,
    MultiScaleDepth,
    NormalMap,
    SourceDepth,
    depth_loss,
    grad_loss,
    mv_loss,
    normal_loss,
    normals_backward,
    normals_from_depth,
    supervised_loss,
    total_loss,
)
from deskrecon.core.synth import Rect, Scene, render_depth
from deskrecon.core.tinynet import grad_check
from deskrecon.exceptions import ContractViolation, DomainError


@pytest.fixture
def small():
    return Intrinsics(fx=10.0, fy=10.0, cx=3.5, cy=2.5, width=8, height=6)


def full(depth):
    depth = np.asarray(depth, dtype=np.float64)
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))


def random_normals(rng, shape):
    normals = rng.normal(size=shape + (3,))
    return NormalMap(normals / np.linalg.norm(normals, axis=-1, keepdims=True), np.ones(shape, dtype=bool))


def test_depth_map_validation():
    with pytest.raises(ContractViolation):
        DepthMap(np.ones((2, 3)), np.ones((3, 2), dtype=bool))
    wrapped = DepthMap.from_array([[1.0, 0.0], [np.nan, 2.0]])
    assert wrapped.valid.tolist() == [[True, False], [False, True]]
    with pytest.raises(DomainError):
        DepthMap(np.array([[-1.0]]), np.array([[True]])).check_positive()


def test_depth_loss_is_zero_on_ground_truth(rng):
    gt = rng.uniform(0.5, 4.0, size=(8, 8))
    value, _ = depth_loss(MultiScaleDepth.from_single(gt), full(gt))
    # coarse scales are pooled, so only the finest matches exactly
    constant = np.full((8, 8), 2.0)
    assert depth_loss(MultiScaleDepth.from_single(constant), full(constant))[0] == 0.0
    assert value > 0.0


def test_depth_loss_scale_weights():
    gt = full([[1.7]])
    pred = MultiScaleDepth(tuple(np.array([[1.7 * np.e]]) for _ in range(4)))
    value, _ = depth_loss(pred, gt)
    assert value == pytest.approx(1 + 1 / 4 + 1 / 9 + 1 / 16, abs=1e-6)
    assert value == pytest.approx(1.423611, abs=1e-6)


def test_depth_loss_is_scale_invariant(rng):
    pred = rng.uniform(0.5, 4.0, size=(8, 8))
    gt = rng.uniform(0.5, 4.0, size=(8, 8))
    base, _ = depth_loss(MultiScaleDepth.from_single(pred), full(gt))
    scaled, _ = depth_loss(MultiScaleDepth.from_single(3.0 * pred), full(3.0 * gt))
    assert scaled == pytest.approx(base)


def test_depth_loss_skips_invalid_pixels(rng):
    gt_values = rng.uniform(1.0, 2.0, size=(8, 8))
    valid = np.ones((8, 8), dtype=bool)
    valid[0, 0] = False
    gt = DepthMap(gt_values, valid)
    pred = gt_values.copy()
    pred[0, 0] = 100.0
    _, grads = depth_loss(MultiScaleDepth((pred, pred[::2, ::2], pred[::4, ::4], pred[::8, ::8])), gt)
    assert grads[0][0, 0] == 0.0
    with pytest.raises(DomainError):
        depth_loss(MultiScaleDepth.from_single(-gt_values), gt)


def test_depth_loss_gradient(rng):
    gt = full(rng.uniform(0.5, 4.0, size=(8, 8)))

    def objective(flat):
        pyramid = MultiScaleDepth.from_single(flat.reshape(8, 8))
        value, grads = depth_loss(pyramid, gt)
        return value, pyramid.backward(grads)

    assert grad_check(objective, rng.uniform(0.5, 4.0, size=64), h=1e-6) < 1e-4


def test_grad_loss_vanishes_for_constants_and_offsets(rng):
    assert grad_loss(full(np.full((6, 8), 2.0)), full(np.full((6, 8), 3.5))).value == 0.0
    gt = rng.uniform(1.0, 3.0, size=(6, 8))
    assert grad_loss(full(gt + 0.7), full(gt)).value == pytest.approx(0.0, abs=1e-12)


def test_grad_loss_ramp_matches_direct_summation():
    a, b = 0.3, 0.1
    cols = np.arange(4, dtype=np.float64)
    pred = np.tile(a * cols, (4, 1))
    gt = np.tile(b * cols, (4, 1))

    # 12 full-resolution x-differences of |a-b| and 2 half-resolution ones of 2|a-b|, over 16 pixels
    direct = (12 * abs(a - b) + 2 * 2 * abs(a - b)) / 16
    assert grad_loss(full(pred), full(gt)).value == pytest.approx(direct)
    assert direct == pytest.approx(abs(a - b))


def test_grad_loss_gradient(rng):
    # every prediction difference exceeds its target by at least 0.2, away from the kinks of |.|
    rows, cols = np.mgrid[0:8, 0:6]
    gt = full(2.0 + 0.01 * rng.uniform(size=(8, 6)))
    pred = 1.0 + 0.3 * cols + 0.25 * rows + 0.01 * rng.uniform(size=(8, 6))

    def objective(flat):
        result = grad_loss(full(flat.reshape(8, 6)), gt)
        return result.value, result.grad

    assert grad_check(objective, pred.ravel(), h=1e-2) < 1e-4


def test_grad_loss_requires_matching_shapes():
    with pytest.raises(ContractViolation):
        grad_loss(full(np.ones((4, 4))), full(np.ones((4, 5))))


def test_normals_of_fronto_parallel_plane(small):
    normals = normals_from_depth(full(np.full((6, 8), 2.0)), small)
    assert normals.valid[:-1, :-1].all()
    assert not normals.valid[-1].any() and not normals.valid[:, -1].any()
    assert np.allclose(normals.normals[normals.valid], [0.0, 0.0, -1.0])


def test_normals_of_tilted_plane(intrinsics):
    # plane y + z = 2 seen from the origin
    v = (np.arange(intrinsics.height) - intrinsics.cy) / intrinsics.fy
    depth = np.tile((2.0 / (1.0 + v))[:, None], (1, intrinsics.width))
    normals = normals_from_depth(full(depth), intrinsics)
    s = np.sqrt(0.5)
    assert np.allclose(normals.normals[normals.valid], [0.0, -s, -s], atol=1e-3)
    norms = np.linalg.norm(normals.normals[normals.valid], axis=-1)
    assert np.allclose(norms, 1.0, atol=1e-6)


def test_normals_with_offset_match_the_full_map(rng, intrinsics):
    depth = full(rng.uniform(1.0, 3.0, size=intrinsics.shape))
    whole = normals_from_depth(depth, intrinsics)
    window = (10, 5, 12, 9)
    crop = normals_from_depth(depth.crop(window), intrinsics, offset=(10, 5))
    assert np.allclose(crop.normals[:-1, :-1], whole.normals[5:13, 10:21])


def test_normal_loss_examples():
    shape = (3, 4)
    up = np.zeros(shape + (3,))
    up[..., 2] = -1.0
    side = np.zeros(shape + (3,))
    side[..., 0] = 1.0
    mask = np.ones(shape, dtype=bool)
    assert normal_loss(NormalMap(up, mask), NormalMap(up, mask)).value == 0.0
    assert normal_loss(NormalMap(up, mask), NormalMap(-up, mask)).value == pytest.approx(1.0)
    assert normal_loss(NormalMap(up, mask), NormalMap(side, mask)).value == pytest.approx(0.5)


def test_normal_loss_gradient_through_depth(rng, small):
    gt = random_normals(rng, (6, 8))

    def objective(flat):
        depth = full(flat.reshape(6, 8))
        result = normal_loss(normals_from_depth(depth, small), gt)
        return result.value, normals_backward(depth, small, result.grad)

    assert grad_check(objective, 2.0 + 0.2 * rng.uniform(size=48), h=1e-6) < 1e-4


def test_mv_loss_scaled_prediction_with_identical_source(small):
    gt = full(np.full((6, 8), 1.5))
    source = SourceDepth(Pose.identity(), small, gt)
    result = mv_loss(full(np.full((6, 8), 1.5 * np.e)), Pose.identity(), small, [source])
    assert result.value == pytest.approx(1.0)


def test_mv_loss_identical_source_is_per_pixel_log_error(rng, small):
    pred = rng.uniform(1.0, 3.0, size=(6, 8))
    gt = rng.uniform(1.0, 3.0, size=(6, 8))
    source = SourceDepth(Pose.identity(), small, full(gt))
    result = mv_loss(full(pred), Pose.identity(), small, [source])
    assert result.value == pytest.approx(np.mean(np.abs(np.log(pred) - np.log(gt))))

    def objective(flat):
        out = mv_loss(full(flat.reshape(6, 8)), Pose.identity(), small, [source])
        return out.value, out.grad

    assert grad_check(objective, pred.ravel(), h=1e-6) < 1e-4


def test_mv_loss_is_zero_for_consistent_geometry(intrinsics):
    wall = Rect(axis=2, offset=2.0, lo=(-3.0, -3.0), hi=(3.0, 3.0), texture_seed=1)
    scene = Scene(primitives=(wall,))
    ref = render_depth(scene, CameraView(Pose.identity(), intrinsics))
    src = render_depth(scene, CameraView(Pose(np.eye(3), (0.07, -0.02, 0.0)), intrinsics))
    result = mv_loss(ref.depth, ref.pose, intrinsics, [SourceDepth(src.pose, intrinsics, src.depth)])
    assert result.value == pytest.approx(0.0, abs=1e-12)


def test_mv_loss_ignores_sources_behind_the_camera(small):
    behind = SourceDepth(Pose(np.eye(3), (0.0, 0.0, 10.0)), small, full(np.ones((6, 8))))
    result = mv_loss(full(np.full((6, 8), 2.0)), Pose.identity(), small, [behind])
    assert result.value == 0.0
    assert np.all(result.grad == 0.0)


def test_total_loss_weights():
    ones = LossResult(1.0, np.ones((2, 2)))
    breakdown, grad = total_loss(ones, ones, ones, ones)
    assert breakdown.total == pytest.approx(3.2)
    assert np.allclose(grad, 3.2)
    zero = LossResult(0.0, np.zeros((2, 2)))
    assert total_loss(zero, zero, zero, zero)[0].total == 0.0
    custom, _ = total_loss(ones, zero, ones, ones, LossWeights(grad=0.0, normals=2.0, mv=0.0))
    assert custom.total == pytest.approx(3.0)


def test_loss_log_line():
    line = LossBreakdown(total=1.5, depth=1.0, grad=0.25, normals=0.125, mv=0.625).as_log_line(7)
    assert line == "7 1.5 1.0 0.25 0.125 0.625"


def test_supervised_loss_is_zero_on_ground_truth(intrinsics):
    wall = Rect(axis=2, offset=2.0, lo=(-3.0, -3.0), hi=(3.0, 3.0), texture_seed=1)
    rendered = render_depth(Scene(primitives=(wall,)), CameraView(Pose.identity(), intrinsics))
    breakdown, grad = supervised_loss(
        rendered.depth.depth, rendered.depth, rendered.normals, rendered.pose, intrinsics, []
    )
    assert breakdown.total == pytest.approx(0.0, abs=1e-9)
    assert grad.shape == intrinsics.shape
