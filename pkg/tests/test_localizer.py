import math

import numpy as np
import pytest

from semloc.geometry import (
    CameraIntrinsics,
    PoseEstimate,
    camera_center,
    pose_error,
    project,
    quat_to_rot,
)
from semloc.localizer import (
    LocalizerConfig,
    ScoredCandidate,
    ViewingRay,
    assign_weights,
    localize_query,
    semantic_score,
    temporary_pose,
    visible,
    visible_mask,
    weighted_ransac_pnp,
    weighted_sample_without_replacement,
    WeightedMatch,
)
from semloc.matching import Match2D3D
from semloc.model_ingest import ClassTable, LabelRaster, VOID_ID, load_ground_truth
from semloc.semantic_map import SemanticMap, SemanticPoint, compute_visibility_stats
from semloc.model_ingest import RawPoint3D
import oracles

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
TABLE = ClassTable(names=tuple(f"c{i}" for i in range(10)), dynamic_ids=frozenset())
THETA_MIN = math.radians(5.0)


def make_point(pid, position, label=1, d_lower=1.0, d_upper=100.0,
               v_mid=(0.0, 0.0, -1.0), theta=math.pi / 2, track_len=2):
    return SemanticPoint(
        id=pid,
        position=np.asarray(position, dtype=float),
        label=label,
        d_lower=d_lower,
        d_upper=d_upper,
        v_mid=np.asarray(v_mid, dtype=float),
        theta=theta,
        track_len=track_len,
    )


def stats_point(pid, X, centers, label=1):
    raw = RawPoint3D(np.asarray(X, dtype=float), [(i, 0) for i in range(len(centers))])
    poses = [PoseEstimate(np.eye(3), -np.asarray(c, dtype=float)) for c in centers]
    d_lower, d_upper, v_mid, theta = compute_visibility_stats(raw, poses)
    return make_point(pid, X, label=label, d_lower=d_lower, d_upper=d_upper,
                      v_mid=v_mid, theta=theta, track_len=len(centers))


class TestVisible:
    def test_collinear_band(self):
        p = stats_point(1, [0, 0, 0], [[0, 0, 2], [0, 0, 6]])
        assert p.theta == 0.0
        assert visible(p, np.array([0.0, 0.0, 4.0]), THETA_MIN)

    def test_beyond_upper_distance(self):
        p = stats_point(1, [0, 0, 0], [[0, 0, 2], [0, 0, 6]])
        assert not visible(p, np.array([0.0, 0.0, 8.0]), THETA_MIN)

    def test_inclusive_at_database_camera(self):
        p = stats_point(1, [0, 0, 0], [[0, 0, 2], [0, 0, 6]])
        assert visible(p, np.array([0.0, 0.0, 2.0]), THETA_MIN)
        assert visible(p, np.array([0.0, 0.0, 6.0]), THETA_MIN)

    def test_outside_cone(self):
        p = stats_point(1, [0, 0, 0], [[0, 0, 2], [0, 0, 6]])
        assert not visible(p, np.array([4.0, 0.0, 0.1]), THETA_MIN)

    def test_at_point_is_invisible(self):
        p = stats_point(1, [0, 0, 0], [[0, 0, 2], [0, 0, 6]])
        assert not visible(p, np.zeros(3), THETA_MIN)

    def test_matches_rederivation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            X = rng.uniform(-3, 3, size=3)
            centers = X + rng.normal(0, 1, size=(6, 3)) * [2, 2, 0.5] + [0, 0, 8]
            p = stats_point(1, X, centers)
            for _ in range(10):
                c_q = X + rng.normal(0, 4, size=3) + [0, 0, 6]
                got = visible(p, c_q, THETA_MIN)
                want = oracles.visible_from_cameras(
                    [c.tolist() for c in centers], X.tolist(), c_q.tolist(), THETA_MIN
                )
                assert got == want

    def test_mask_agrees_with_scalar(self):
        rng = np.random.default_rng(1)
        points = [
            stats_point(i, rng.uniform(-3, 3, 3), rng.uniform(-3, 3, (4, 3)) + [0, 0, 9])
            for i in range(40)
        ]
        smap = SemanticMap(points, TABLE)
        for _ in range(10):
            c_q = rng.uniform(-5, 5, size=3) + [0, 0, 7]
            mask = visible_mask(smap, c_q, THETA_MIN)
            for i, p in enumerate(points):
                assert mask[i] == visible(p, c_q, THETA_MIN)

    def test_viewing_ray_norm(self):
        ray = ViewingRay.between(np.array([3.0, 4.0, 0.0]), np.zeros(3))
        assert np.isclose(ray.norm, 5.0)
        assert np.allclose(ray.v, [3.0, 4.0, 0.0])


def synthetic_matches(rng, pose, n, smap_points, outlier_fraction=0.0):
    """Matches consistent with pose, optionally with gross pixel outliers."""
    matches = []
    n_out = int(round(outlier_fraction * n))
    for i, p in enumerate(smap_points[:n]):
        px = project(pose, K, p.position)
        assert px is not None
        if i < n_out:
            px = rng.uniform([0, 0], [K.width, K.height])
        matches.append(Match2D3D(query_kp=i, query_px=px, point3d=p.id, source_image=1))
    return matches


def grid_map_points(rng, pose, n, label=1, start_id=1):
    """Points in front of the pose, inside the frame, with generous stats."""
    pts = []
    for i in range(n):
        px = rng.uniform([40, 40], [K.width - 40, K.height - 40])
        depth = rng.uniform(6, 14)
        ray = np.array([(px[0] - K.cx) / K.fx, (px[1] - K.cy) / K.fy, 1.0]) * depth
        X = pose.rotation.T @ (ray - pose.translation)
        pts.append(make_point(start_id + i, X, label=label))
    return pts


class TestTemporaryPose:
    def test_below_min_matches_fails(self):
        rng = np.random.default_rng(2)
        pose = PoseEstimate.identity()
        points = grid_map_points(rng, pose, 11)
        smap = SemanticMap(points, TABLE)
        matches = synthetic_matches(rng, pose, 11, points)
        cfg = LocalizerConfig(temp_pose_min_matches=12)
        assert temporary_pose(matches, smap, K, cfg, np.random.default_rng(0)) is None

    def test_recovers_noiseless_pose(self):
        rng = np.random.default_rng(3)
        gt = PoseEstimate(quat_to_rot(rng.normal(size=4)), rng.normal(size=3))
        points = grid_map_points(rng, gt, 50)
        smap = SemanticMap(points, TABLE)
        matches = synthetic_matches(rng, gt, 50, points)
        got = temporary_pose(matches, smap, K, LocalizerConfig(), np.random.default_rng(4))
        assert got is not None
        t_err, r_err = pose_error(got, gt)
        assert t_err < 1e-4 and r_err < 1e-4

    def test_survives_sixty_percent_outliers(self):
        rng = np.random.default_rng(5)
        gt = PoseEstimate(quat_to_rot(rng.normal(size=4)), rng.normal(size=3))
        points = grid_map_points(rng, gt, 50)
        smap = SemanticMap(points, TABLE)
        matches = synthetic_matches(rng, gt, 50, points, outlier_fraction=0.6)
        got = temporary_pose(matches, smap, K, LocalizerConfig(), np.random.default_rng(6))
        assert got is not None
        t_err, _ = pose_error(got, gt)
        assert t_err < 0.01


def splat(raster, px, label, radius=3):
    ix, iy = int(np.floor(px[0] + 0.5)), int(np.floor(px[1] + 0.5))
    h, w = raster.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius and 0 <= ix + dx < w and 0 <= iy + dy < h:
                raster[iy + dy, ix + dx] = label


class TestSemanticScore:
    def _grid_scene(self):
        """Widely spaced grid, every point visible from the identity pose."""
        pose = PoseEstimate.identity()
        points = []
        raster = np.full((K.height, K.width), VOID_ID, dtype=np.uint8)
        pid = 1
        for gx in range(8):
            for gy in range(6):
                px = np.array([60.0 + gx * 74.0, 40.0 + gy * 80.0])
                depth = 10.0
                ray = np.array([(px[0] - K.cx) / K.fx, (px[1] - K.cy) / K.fy, 1.0]) * depth
                label = (gx + gy) % 5
                points.append(
                    make_point(pid, ray, label=label, d_lower=5.0, d_upper=50.0,
                               v_mid=-ray / np.linalg.norm(ray), theta=math.radians(60))
                )
                splat(raster, px, label)
                pid += 1
        return pose, points, raster

    def test_ground_truth_pose_counts_all_visible(self):
        pose, points, raster = self._grid_scene()
        smap = SemanticMap(points, TABLE)
        labels = LabelRaster(K.width, K.height, raster)
        cfg = LocalizerConfig()
        mask = visible_mask(smap, camera_center(pose), cfg.theta_min)
        assert mask.all()
        assert semantic_score(smap, labels, pose, K, cfg) == len(points)

    def test_off_image_projections_score_zero(self):
        pose, points, raster = self._grid_scene()
        smap = SemanticMap(points, TABLE)
        labels = LabelRaster(K.width, K.height, raster)
        # shift sideways: band still passes (d_upper=50) but pixels leave the frame
        displaced = PoseEstimate(np.eye(3), np.array([-30.0, 0.0, 0.0]))
        assert semantic_score(smap, labels, displaced, K, LocalizerConfig()) == 0

    def test_matches_double_loop_oracle_under_corruption(self):
        rng = np.random.default_rng(7)
        pose, points, raster = self._grid_scene()
        smap = SemanticMap(points, TABLE)
        flip = rng.random(raster.shape) < 0.3
        scrambled = np.where(
            flip, rng.integers(0, len(TABLE.names), size=raster.shape).astype(np.uint8), raster
        )
        labels = LabelRaster(K.width, K.height, scrambled)
        cfg = LocalizerConfig()
        for trial in range(20):
            jitter = PoseEstimate(
                quat_to_rot(np.array([1.0, *rng.normal(0, 0.01, 3)])),
                rng.normal(0, 0.3, 3),
            )
            got = semantic_score(smap, labels, jitter, K, cfg)
            want = oracles.semantic_score_loop(
                points,
                scrambled.tolist(),
                VOID_ID,
                jitter.rotation.tolist(),
                jitter.translation.tolist(),
                K.fx, K.fy, K.cx, K.cy,
                cfg.theta_min,
            )
            assert got == want

    def test_void_pixels_never_count(self):
        pose, points, raster = self._grid_scene()
        smap = SemanticMap(points, TABLE)
        all_void = LabelRaster(K.width, K.height, np.full_like(raster, VOID_ID))
        assert semantic_score(smap, all_void, pose, K, LocalizerConfig()) == 0

    def test_ground_truth_beats_far_displaced_pose(self, clean_scene, clean_dataset, clean_map):
        gt_poses = load_ground_truth(clean_scene.root / "ground_truth.txt")
        cfg = LocalizerConfig()
        spec = clean_scene.spec
        radius = 2.0 * (spec.ring_radius + spec.extent)
        for query in clean_dataset.queries:
            gt_pose = gt_poses[query.name]
            displaced = PoseEstimate(
                gt_pose.rotation, gt_pose.translation - gt_pose.rotation @ np.array([radius, 0, 0])
            )
            gt_score = semantic_score(clean_map, query.labels, gt_pose, query.camera, cfg)
            far_score = semantic_score(clean_map, query.labels, displaced, query.camera, cfg)
            assert gt_score >= far_score
            assert gt_score > 0


def match_stub(query_kp, point3d):
    return Match2D3D(query_kp=query_kp, query_px=np.zeros(2), point3d=point3d, source_image=0)


class TestAssignWeights:
    def test_worked_example(self):
        a = ScoredCandidate(1, [match_stub(i, 100 + i) for i in range(10)], PoseEstimate.identity(), 100)
        b = ScoredCandidate(2, [match_stub(20 + i, 200 + i) for i in range(5)], PoseEstimate.identity(), 50)
        weighted, fallback = assign_weights([a, b])
        assert not fallback
        assert len(weighted) == 15
        for wm in weighted[:10]:
            assert wm.weight == 100.0 / 1250.0  # 0.08
        for wm in weighted[10:]:
            assert wm.weight == 50.0 / 1250.0  # 0.04
        assert np.isclose(sum(wm.weight for wm in weighted), 1.0, atol=1e-9)

    def test_all_zero_scores_fall_back_to_uniform(self):
        a = ScoredCandidate(1, [match_stub(i, i) for i in range(5)], None, 0)
        b = ScoredCandidate(2, [match_stub(10 + i, 10 + i) for i in range(3)], None, 0)
        weighted, fallback = assign_weights([a, b])
        assert fallback
        assert len(weighted) == 8
        assert all(wm.weight == 0.125 for wm in weighted)

    def test_shared_match_merges_raw_weights(self):
        shared = match_stub(3, 33)
        a = ScoredCandidate(1, [shared, match_stub(0, 1)], PoseEstimate.identity(), 100)
        b = ScoredCandidate(2, [match_stub(3, 33)], PoseEstimate.identity(), 50)
        weighted, _ = assign_weights([a, b])
        assert len(weighted) == 2
        by_key = {wm.match.key(): wm.weight for wm in weighted}
        total = 150.0 + 100.0
        assert by_key[(3, 33)] == 150.0 / total
        assert by_key[(0, 1)] == 100.0 / total

    def test_monotonic_in_candidate_score(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            cands = [
                ScoredCandidate(
                    i,
                    [match_stub(int(k), int(k)) for k in rng.choice(30, size=8, replace=False)],
                    PoseEstimate.identity(),
                    int(rng.integers(0, 50)),
                )
                for i in range(4)
            ]
            base, _ = assign_weights(cands)
            base_w = {wm.match.key(): wm.weight for wm in base}
            boosted = [ScoredCandidate(c.image_id, c.matches, c.temp_pose, c.score) for c in cands]
            boosted[1] = ScoredCandidate(
                boosted[1].image_id, boosted[1].matches, boosted[1].temp_pose, boosted[1].score + 25
            )
            after, _ = assign_weights(boosted)
            after_w = {wm.match.key(): wm.weight for wm in after}
            for m in boosted[1].matches:
                assert after_w[m.key()] >= base_w[m.key()] - 1e-15

    def test_scale_invariance_is_bit_exact(self):
        rng = np.random.default_rng(9)
        cands = [
            ScoredCandidate(
                i,
                [match_stub(int(k), int(k)) for k in rng.choice(40, size=10, replace=False)],
                PoseEstimate.identity(),
                int(rng.integers(1, 200)),
            )
            for i in range(5)
        ]
        base, _ = assign_weights(cands)
        for c in (2, 7, 0.5, 256):
            scaled = [
                ScoredCandidate(x.image_id, x.matches, x.temp_pose, x.score * c) for x in cands
            ]
            got, _ = assign_weights(scaled)
            for wm_a, wm_b in zip(base, got):
                assert wm_a.weight == wm_b.weight  # bitwise


class TestWeightedSampler:
    def test_first_draw_follows_weights(self):
        rng = np.random.default_rng(10)
        weights = np.array([0.5, 0.25, 0.25])
        counts = np.zeros(3)
        n = 20000
        for _ in range(n):
            counts[weighted_sample_without_replacement(rng, weights, 3)[0]] += 1
        freq = counts / n
        assert np.max(np.abs(freq - weights)) < 0.01

    def test_zero_weight_never_drawn(self):
        rng = np.random.default_rng(11)
        weights = np.array([0.5, 0.0, 0.3, 0.2, 0.0])
        for _ in range(500):
            idx = weighted_sample_without_replacement(rng, weights, 3)
            assert 1 not in idx and 4 not in idx
            assert len(set(idx)) == 3

    def test_too_few_positive_weights(self):
        with pytest.raises(ValueError):
            weighted_sample_without_replacement(
                np.random.default_rng(0), np.array([1.0, 1.0, 0.0]), 3
            )


class TestWeightedRansacPnp:
    def _cluster(self, rng, pose, n, weight_total, start_id, start_kp):
        points = grid_map_points(rng, pose, n, start_id=start_id)
        weighted = []
        for i, p in enumerate(points):
            px = project(pose, K, p.position)
            weighted.append(
                WeightedMatch(
                    Match2D3D(start_kp + i, px, p.point3d if hasattr(p, "point3d") else p.id, 0),
                    weight_total / n,
                )
            )
        return points, weighted

    def test_outlier_free_any_weights(self):
        rng = np.random.default_rng(12)
        gt = PoseEstimate(quat_to_rot(rng.normal(size=4)), rng.normal(size=3))
        points, weighted = self._cluster(rng, gt, 30, 1.0, 1, 0)
        # arbitrary positive weights, renormalized
        raw = rng.uniform(0.1, 5.0, size=30)
        raw /= raw.sum()
        weighted = [WeightedMatch(wm.match, w) for wm, w in zip(weighted, raw)]
        smap = SemanticMap(points, TABLE)
        pose, inliers = weighted_ransac_pnp(weighted, smap, K, LocalizerConfig(), np.random.default_rng(13))
        assert pose is not None and inliers == 30
        assert pose_error(pose, gt)[0] < 1e-4

    def test_two_cluster_weights_beat_majority(self):
        rng = np.random.default_rng(14)
        gt = PoseEstimate.identity()
        decoy = PoseEstimate(np.eye(3), np.array([-8.0, 0.0, 0.0]))
        gt_points, gt_weighted = self._cluster(rng, gt, 40, 0.9, 1, 0)
        decoy_points, decoy_weighted = self._cluster(rng, decoy, 60, 0.1, 1000, 1000)
        smap = SemanticMap(gt_points + decoy_points, TABLE)
        weighted = gt_weighted + decoy_weighted
        cfg = LocalizerConfig()

        pose, _ = weighted_ransac_pnp(weighted, smap, K, cfg, np.random.default_rng(15))
        assert pose is not None
        assert pose_error(pose, gt)[0] < 0.05  # semantic weights pick the GT cluster

        uniform = [WeightedMatch(wm.match, 1.0 / len(weighted)) for wm in weighted]
        pose_u, _ = weighted_ransac_pnp(uniform, smap, K, cfg, np.random.default_rng(15))
        assert pose_u is not None
        assert pose_error(pose_u, decoy)[0] < 0.05  # majority cluster wins uniformly
        assert pose_error(pose_u, gt)[0] > 1.0

    def test_too_few_matches(self):
        smap = SemanticMap([], TABLE)
        assert weighted_ransac_pnp([], smap, K, LocalizerConfig(), np.random.default_rng(0)) == (None, 0)


class TestLocalizeQuery:
    def test_end_to_end_on_clean_scene(self, clean_scene, clean_dataset, clean_map):
        from semloc.retrieval import RetrievalConfig

        gt_poses = load_ground_truth(clean_scene.root / "ground_truth.txt")
        cfg = LocalizerConfig()
        for query in clean_dataset.queries[:2]:
            result = localize_query(
                query, clean_map, clean_dataset, RetrievalConfig(), cfg, np.random.default_rng(16)
            )
            assert result.pose is not None
            assert result.inliers >= 4
            t_err, r_err = pose_error(result.pose, gt_poses[query.name])
            assert t_err < 1e-3 and r_err < 0.01
            assert not result.used_fallback
            assert all(c.score > 0 for c in result.candidates)

    def test_uniform_baseline_matches_sanity_floor_on_clean_scene(
        self, clean_scene, clean_dataset, clean_map
    ):
        # zero corruption, zero pixel noise: both weighting modes localize
        # every query to the millimeter floor
        from semloc.retrieval import RetrievalConfig

        gt_poses = load_ground_truth(clean_scene.root / "ground_truth.txt")
        for uniform in (False, True):
            for query in clean_dataset.queries:
                result = localize_query(
                    query, clean_map, clean_dataset, RetrievalConfig(), LocalizerConfig(),
                    np.random.default_rng(21), uniform_weights=uniform,
                )
                assert result.pose is not None
                assert pose_error(result.pose, gt_poses[query.name])[0] <= 1e-3

    def test_all_candidates_below_min_matches_uses_fallback(self, clean_scene, clean_dataset, clean_map):
        from semloc.retrieval import RetrievalConfig

        cfg = LocalizerConfig(temp_pose_min_matches=10**6)
        query = clean_dataset.queries[0]
        result = localize_query(
            query, clean_map, clean_dataset, RetrievalConfig(), cfg, np.random.default_rng(17)
        )
        assert result.used_fallback
        assert all(c.temp_pose is None and c.score == 0 for c in result.candidates)
        assert result.pose is not None  # uniform RANSAC still solves the clean scene

    def test_zero_lifted_matches_fails(self, clean_dataset):
        from semloc.retrieval import RetrievalConfig

        empty_map = SemanticMap([], clean_dataset.class_table)
        query = clean_dataset.queries[0]
        result = localize_query(
            query, empty_map, clean_dataset, RetrievalConfig(), LocalizerConfig(),
            np.random.default_rng(18),
        )
        assert result.pose is None
        assert result.inliers == 0

    def test_seeded_determinism(self, clean_dataset, clean_map):
        from semloc.retrieval import RetrievalConfig

        query = clean_dataset.queries[1]
        runs = []
        for _ in range(2):
            result = localize_query(
                query, clean_map, clean_dataset, RetrievalConfig(), LocalizerConfig(),
                np.random.default_rng(19),
            )
            runs.append(result)
        assert np.array_equal(runs[0].pose.rotation, runs[1].pose.rotation)
        assert np.array_equal(runs[0].pose.translation, runs[1].pose.translation)
        assert runs[0].inliers == runs[1].inliers
        assert [c.score for c in runs[0].candidates] == [c.score for c in runs[1].candidates]

    def test_uniform_weights_keeps_diagnostic_scores(self, clean_dataset, clean_map):
        from semloc.retrieval import RetrievalConfig

        query = clean_dataset.queries[0]
        result = localize_query(
            query, clean_map, clean_dataset, RetrievalConfig(), LocalizerConfig(),
            np.random.default_rng(20), uniform_weights=True,
        )
        assert result.pose is not None
        assert not result.used_fallback
        assert any(c.score > 0 for c in result.candidates)  # real scores, weights uniform
