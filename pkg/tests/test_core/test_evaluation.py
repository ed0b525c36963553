import numpy as np
import pytest
from scipy.spatial import cKDTree

from deskrecon.core import evaluation
from deskrecon.core.evaluation import (
    DepthMetrics,
    SpatialHashGrid,
    aggregate_depth_metrics,
    apply_cull_mask,
    brute_force_nearest,
    covisible_mask,
    depth_metrics,
    frustum_visibility,
    match_resolution,
    mesh_metrics,
    points_from_depth_maps,
    sample_surface,
)
from deskrecon.core.fusion import TriangleMesh
from deskrecon.core.geometry import CameraView, Pose
from deskrecon.core.losses import DepthMap
from deskrecon.exceptions import ContractViolation, DomainError, EmptyResultError


def full(depth):
    depth = np.asarray(depth, dtype=np.float64)
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))


def square(z: float, half: float = 0.5) -> TriangleMesh:
    vertices = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return TriangleMesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


def test_perfect_depth(rng):
    gt = full(rng.uniform(0.5, 4.0, size=(6, 8)))
    metrics = depth_metrics(gt, gt)
    assert (metrics.abs_diff, metrics.abs_rel, metrics.sq_rel, metrics.rmse) == (0.0, 0.0, 0.0, 0.0)
    assert metrics.delta_1_05 == 100.0
    assert metrics.delta_1_25 == 100.0
    assert metrics.valid_pixel_count == 48


def test_uniformly_scaled_prediction(rng):
    gt = rng.uniform(0.5, 4.0, size=(6, 8))
    metrics = depth_metrics(full(1.1 * gt), full(gt))
    assert metrics.abs_rel == pytest.approx(0.1)
    assert metrics.delta_1_05 == 0.0
    assert metrics.delta_1_25 == 100.0


def test_single_pixel_arithmetic():
    metrics = depth_metrics(full([[2.2]]), full([[2.0]]))
    assert metrics.abs_diff == pytest.approx(0.2)
    assert metrics.sq_rel == pytest.approx(0.02)
    assert metrics.rmse == pytest.approx(0.2)


def test_metrics_use_mutually_valid_pixels_only():
    pred = DepthMap(np.array([[2.0, 9.0]]), np.array([[True, True]]))
    gt = DepthMap(np.array([[2.0, 1.0]]), np.array([[True, False]]))
    metrics = depth_metrics(pred, gt)
    assert metrics.valid_pixel_count == 1
    assert metrics.abs_diff == 0.0


def test_no_overlap_is_an_empty_result():
    pred = DepthMap(np.ones((2, 2)), np.array([[True, False], [False, False]]))
    gt = DepthMap(np.ones((2, 2)), np.array([[False, True], [True, True]]))
    with pytest.raises(EmptyResultError):
        depth_metrics(pred, gt)
    with pytest.raises(ContractViolation):
        depth_metrics(full(np.ones((2, 2))), full(np.ones((2, 3))))


def test_delta_thresholds_are_ordered(rng):
    for _ in range(1000):
        pred = full(rng.uniform(0.5, 4.0, size=(3, 4)))
        gt = full(rng.uniform(0.5, 4.0, size=(3, 4)))
        metrics = depth_metrics(pred, gt)
        assert 0.0 <= metrics.delta_1_05 <= metrics.delta_1_25 <= 100.0


def test_aggregate_is_a_per_frame_mean():
    a = DepthMetrics(0.1, 0.2, 0.3, 0.4, 50.0, 90.0, 10)
    b = DepthMetrics(0.3, 0.4, 0.5, 0.6, 70.0, 100.0, 30)
    mean = aggregate_depth_metrics([a, b])
    assert mean.abs_diff == pytest.approx(0.2)
    assert mean.delta_1_05 == pytest.approx(60.0)
    assert mean.valid_pixel_count == 40
    with pytest.raises(EmptyResultError):
        aggregate_depth_metrics([])


def test_samples_stay_inside_a_single_triangle():
    mesh = TriangleMesh(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([[0, 1, 2]]))
    points = sample_surface(mesh, 2000, seed=3)
    assert np.all(points[:, 0] >= -1e-12)
    assert np.all(points[:, 1] >= -1e-12)
    assert np.all(points.sum(axis=1) - points[:, 2] <= 1.0 + 1e-12)
    assert np.allclose(points[:, 2], 0.0)


def test_samples_follow_triangle_area():
    small = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    large = [[5.0, 0.0, 0.0], [8.0, 0.0, 0.0], [5.0, 1.0, 0.0]]
    mesh = TriangleMesh(np.array(small + large), np.array([[0, 1, 2], [3, 4, 5]]))
    n = 10_000
    points = sample_surface(mesh, n, seed=5)
    on_large = int((points[:, 0] >= 5.0).sum())
    expected = 0.75 * n
    sigma = np.sqrt(n * 0.75 * 0.25)
    assert abs(on_large - expected) <= 3 * sigma


def test_sampling_is_seeded():
    mesh = square(1.0)
    assert np.array_equal(sample_surface(mesh, 100, seed=8), sample_surface(mesh, 100, seed=8))
    with pytest.raises(DomainError):
        sample_surface(TriangleMesh.empty(), 10)
    with pytest.raises(DomainError):
        sample_surface(mesh, 0)


@pytest.mark.parametrize("cell_size", [0.05, 0.2, 0.001])
def test_hash_grid_matches_brute_force(rng, cell_size):
    points = rng.uniform(0.0, 1.0, size=(400, 3))
    queries = rng.uniform(-0.2, 1.2, size=(300, 3))
    grid_d, grid_i = SpatialHashGrid(points, cell_size).query(queries)
    brute_d, brute_i = brute_force_nearest(queries, points)
    assert np.array_equal(grid_i, brute_i)
    assert np.allclose(grid_d, brute_d, rtol=0.0, atol=1e-15)

    tree_d, _ = cKDTree(points).query(queries)
    assert np.allclose(grid_d, tree_d)


def test_hash_grid_ties_pick_the_lowest_index():
    points = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    distance, index = SpatialHashGrid(points, 0.5).query(np.array([[0.0, 0.0, 0.1]]))
    assert index.tolist() == [1]
    assert distance[0] == pytest.approx(0.1)


def test_hash_grid_rejects_bad_input():
    with pytest.raises(DomainError):
        SpatialHashGrid(np.zeros((0, 3)), 0.1)
    with pytest.raises(DomainError):
        SpatialHashGrid(np.zeros((2, 3)), 0.0)


def test_brute_force_chunks_agree_with_a_single_pass(rng):
    points = rng.uniform(size=(50, 3))
    points[7] = points[3]
    queries = rng.uniform(size=(37, 3))
    queries[0] = points[3]

    whole_d, whole_i = brute_force_nearest(queries, points)
    # two queries per chunk
    chunk_d, chunk_i = brute_force_nearest(queries, points, max_pairs=120)

    assert np.array_equal(whole_i, chunk_i)
    assert np.array_equal(whole_d, chunk_d)
    assert whole_i[0] == 3


def test_queries_far_from_the_cloud_fall_back_to_brute_force(rng, mocker):
    points = rng.uniform(0.0, 1.0, size=(20_000, 3))
    queries = rng.uniform(-0.5, 0.5, size=(600, 3)) + np.array([10.0, 0.0, 0.0])
    fallback = mocker.spy(evaluation, "brute_force_nearest")

    distance, index = SpatialHashGrid(points, 0.05).query(queries)

    assert fallback.call_count == 1
    tree_d, tree_i = cKDTree(points).query(queries)
    assert np.array_equal(index, tree_i)
    assert np.allclose(distance, tree_d)


@pytest.mark.slow
def test_far_queries_against_a_dense_cloud_stay_in_memory(rng):
    # a single broadcast over these sizes would need several GiB
    points = rng.uniform(0.0, 5.0, size=(58_565, 3))
    queries = rng.uniform(0.0, 5.0, size=(4_808, 3)) + np.array([0.0, 0.0, 8.0])

    distance, index = SpatialHashGrid(points, 0.05).query(queries)

    tree_d, tree_i = cKDTree(points).query(queries)
    assert np.array_equal(index, tree_i)
    assert np.allclose(distance, tree_d)

def test_identical_point_sets_score_perfectly(rng):
    points = rng.uniform(size=(500, 3))
    metrics = mesh_metrics(points, points)
    assert (metrics.acc, metrics.comp, metrics.chamfer) == (0.0, 0.0, 0.0)
    assert (metrics.prec, metrics.recall, metrics.fscore) == (1.0, 1.0, 1.0)


@pytest.mark.parametrize(
    "offset_m, chamfer_cm, score",
    [(0.03, 3.0, 1.0), (0.10, 10.0, 0.0)],
)
def test_singleton_points(offset_m, chamfer_cm, score):
    metrics = mesh_metrics(np.array([[0.0, 0.0, 0.0]]), np.array([[offset_m, 0.0, 0.0]]), threshold_cm=5.0)
    assert metrics.chamfer == pytest.approx(chamfer_cm)
    assert metrics.acc == pytest.approx(chamfer_cm)
    assert (metrics.prec, metrics.recall, metrics.fscore) == (score, score, score)
    assert metrics.threshold == 5.0


def test_swapping_prediction_and_ground_truth(rng):
    pred = rng.uniform(size=(300, 3))
    gt = rng.uniform(size=(200, 3)) + 0.02
    forward = mesh_metrics(pred, gt)
    backward = mesh_metrics(gt, pred)
    assert forward.acc == pytest.approx(backward.comp)
    assert forward.comp == pytest.approx(backward.acc)
    assert forward.prec == pytest.approx(backward.recall)
    assert forward.chamfer == pytest.approx(backward.chamfer)
    assert forward.fscore == pytest.approx(backward.fscore)
    assert forward.chamfer == pytest.approx((forward.acc + forward.comp) / 2)


def test_mesh_against_itself_scores_one():
    metrics = mesh_metrics(square(1.0), square(1.0), n_samples=20_000)
    assert metrics.fscore == 1.0
    assert metrics.chamfer < 1.0


def test_empty_sets_are_rejected():
    with pytest.raises(DomainError):
        mesh_metrics(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(DomainError):
        mesh_metrics(TriangleMesh.empty(), np.zeros((4, 3)))


def test_frustum_visibility(intrinsics):
    views = [CameraView(Pose.identity(), intrinsics)]
    points = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0], [10.0, 0.0, 2.0], [0.0, 0.0, 9.0]])
    assert frustum_visibility(points, views, d_max=5.0).tolist() == [True, False, False, False]


def test_cull_mask_keeps_observed_triangles(intrinsics):
    views = [CameraView(Pose.identity(), intrinsics)]
    mesh = square(2.0)
    culled = apply_cull_mask(mesh, views, d_max=5.0)
    assert np.array_equal(culled.vertices, mesh.vertices)
    assert np.array_equal(culled.triangles, mesh.triangles)
    assert apply_cull_mask(TriangleMesh.empty(), views, 5.0).is_empty


def test_cull_mask_removes_unobserved_surfaces(intrinsics):
    views = [CameraView(Pose.identity(), intrinsics)]
    visible, hidden = square(2.0), square(-2.0)
    pred = TriangleMesh(
        np.vstack([visible.vertices, hidden.vertices]),
        np.vstack([visible.triangles, hidden.triangles + 4]),
    )
    culled = apply_cull_mask(pred, views, d_max=5.0)
    assert len(culled.triangles) == 2
    assert np.all(culled.vertices[:, 2] == 2.0)

    gt = sample_surface(visible, 5000, seed=1)
    before = mesh_metrics(pred, gt, n_samples=20_000)
    after = mesh_metrics(culled, gt, n_samples=20_000)
    assert after.acc < before.acc
    assert after.comp == pytest.approx(before.comp, abs=0.5)


def test_points_from_depth_maps(intrinsics):
    depth = DepthMap(np.full(intrinsics.shape, 2.0), np.ones(intrinsics.shape, dtype=bool))
    pose = Pose(np.eye(3), (1.0, 0.0, 0.0))
    points = points_from_depth_maps([depth], [CameraView(pose, intrinsics)], stride=2)
    assert points.shape == (24 * 32, 3)
    assert np.allclose(points[:, 2], 2.0)
    assert points_from_depth_maps([], []).shape == (0, 3)


def test_covisible_mask_follows_the_source_frustum(intrinsics):
    wall = full(np.full(intrinsics.shape, 2.0))
    ref = CameraView(Pose.identity(), intrinsics)
    # 0.5 m to the right: a wall point at column u lands on column u - 12
    right = CameraView(Pose(np.eye(3), (0.5, 0.0, 0.0)), intrinsics)

    assert covisible_mask(wall, ref, [(ref, wall)]).all()
    mask = covisible_mask(wall, ref, [(right, wall)])
    assert mask[:, 13:].all()
    assert not mask[:, :12].any()
    both = covisible_mask(wall, ref, [(ref, wall), (right, wall)])
    assert np.array_equal(both, mask)


def test_covisible_mask_respects_occlusion_and_validity(intrinsics):
    wall = full(np.full(intrinsics.shape, 2.0))
    ref = CameraView(Pose.identity(), intrinsics)
    blocked = full(np.full(intrinsics.shape, 1.0))
    assert not covisible_mask(wall, ref, [(ref, blocked)]).any()
    assert not covisible_mask(wall, ref, []).any()

    holes = DepthMap(wall.depth, np.arange(wall.depth.size).reshape(wall.shape) % 2 == 0)
    assert np.array_equal(covisible_mask(holes, ref, [(ref, wall)]), holes.valid)
    with pytest.raises(ContractViolation):
        covisible_mask(full(np.ones((4, 4))), ref, [(ref, wall)])


def test_match_resolution(rng):
    gt = full(rng.uniform(1.0, 2.0, size=(48, 64)))
    assert match_resolution(gt, (48, 64)) is gt
    half = match_resolution(gt, (24, 32))
    assert np.array_equal(half.depth, gt.depth[::2, ::2])
    with pytest.raises(ContractViolation):
        match_resolution(gt, (20, 30))
