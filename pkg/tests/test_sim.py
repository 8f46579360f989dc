import hashlib
import json

import numpy as np
import pytest

from swarmloc import geom, sim


def small_config(**kw):
    base = dict(n_robots=4, n_frames=60, n_trees=20, seed=7, speed=0.8)
    base.update(kw)
    return sim.SceneConfig(**base)


def synthetic_scene(obs_pose, tgt_pose, trees=None, fov_deg=180.0):
    """One-frame scene with two hand-placed robots, for visibility contracts."""
    cfg = sim.SceneConfig(n_robots=2, n_frames=1, n_trees=0, fov_deg=fov_deg)
    trees = np.zeros((0, 3)) if trees is None else np.asarray(trees, float).reshape(-1, 3)
    traj_q = np.stack([[obs_pose.q, tgt_pose.q]])
    traj_t = np.stack([[obs_pose.t, tgt_pose.t]])
    return sim.Scene(config=cfg, trees=trees, traj_q=traj_q, traj_t=traj_t)


class TestSceneConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            sim.SceneConfig(n_robots=1)
        with pytest.raises(ValueError):
            sim.SceneConfig(fov_deg=0.0)
        with pytest.raises(ValueError):
            sim.SceneConfig(uwb_sigma=-0.1)

    def test_round_trip(self):
        cfg = small_config()
        assert sim.SceneConfig.from_dict(cfg.to_dict()) == cfg

    def test_infeasible_formation(self):
        with pytest.raises(ValueError):
            sim.generate_scene(sim.SceneConfig(formation_radius=40.0))

    def test_path_too_long(self):
        with pytest.raises(ValueError):
            sim.generate_scene(sim.SceneConfig(n_frames=5000, speed=1.0))


class TestGenerateScene:
    def test_deterministic(self):
        a = sim.generate_scene(small_config())
        b = sim.generate_scene(small_config())
        assert np.array_equal(a.trees, b.trees)
        assert np.array_equal(a.traj_q, b.traj_q)
        assert np.array_equal(a.traj_t, b.traj_t)

    def test_inside_world_bounds(self):
        scene = sim.generate_scene(small_config(n_robots=8, n_frames=300))
        wx, wy, wz = scene.config.world
        t = scene.traj_t
        assert t[..., 0].min() >= 0 and t[..., 0].max() <= wx
        assert t[..., 1].min() >= 0 and t[..., 1].max() <= wy
        assert t[..., 2].min() >= 0 and t[..., 2].max() <= wz

    def test_robots_never_intersect_trees(self):
        scene = sim.generate_scene(small_config(n_trees=40, n_frames=200))
        pts = scene.traj_t[:, :, :2].reshape(-1, 2)
        for x, y, r in scene.trees:
            assert np.min(np.hypot(pts[:, 0] - x, pts[:, 1] - y)) > r

    def test_16_robots_min_pairwise_distance(self):
        cfg = small_config(n_robots=16, n_frames=100)
        scene = sim.generate_scene(cfg)
        chord = 2.0 * cfg.formation_radius * np.sin(np.pi / cfg.n_robots)
        worst = np.inf
        for f in range(cfg.n_frames):
            t = scene.traj_t[f]
            d = np.linalg.norm(t[:, None, :] - t[None, :, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            worst = min(worst, d.min())
        assert worst >= chord - 1e-9


class TestVisibility:
    def test_target_ahead_true(self):
        obs = geom.identity_pose()
        tgt = geom.Pose(q=[1, 0, 0, 0], t=[5.0, 0.0, 0.0])
        assert sim.visibility(synthetic_scene(obs, tgt), 0, 0, 1)

    def test_target_behind_false(self):
        obs = geom.identity_pose()
        tgt = geom.Pose(q=[1, 0, 0, 0], t=[-5.0, 0.0, 0.0])
        assert not sim.visibility(synthetic_scene(obs, tgt), 0, 0, 1)

    def test_emitter_wedge_blocks_head_on_approach(self):
        # observer sits straight ahead of the target (within the target's
        # silent front sector) -> not visible even though FOV is fine
        obs = geom.identity_pose()
        tgt = geom.Pose(q=geom.quat_from_axis_angle([0, 0, np.pi]), t=[5.0, 0.0, 0.0])
        assert not sim.visibility(synthetic_scene(obs, tgt), 0, 0, 1)

    def test_tree_on_los_blocks(self):
        obs = geom.identity_pose()
        tgt = geom.Pose(q=[1, 0, 0, 0], t=[6.0, 0.0, 0.0])
        scene = synthetic_scene(obs, tgt, trees=[[3.0, 0.0, 0.4]])
        assert not sim.visibility(scene, 0, 0, 1)

    def test_occlusion_matches_dense_sampling_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            p = rng.uniform(0, 10, size=3)
            q = rng.uniform(0, 10, size=3)
            tree = np.array([[rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0.1, 1.0)]])
            blocked = sim._segment_blocked(p, q, tree)
            samples = p[None, :2] + np.linspace(0, 1, 4001)[:, None] * (q[:2] - p[:2])
            oracle = bool(
                np.any(np.hypot(samples[:, 0] - tree[0, 0], samples[:, 1] - tree[0, 1]) < tree[0, 2] - 1e-6)
            )
            if oracle:
                assert blocked
            d_min = np.min(np.hypot(samples[:, 0] - tree[0, 0], samples[:, 1] - tree[0, 1]))
            if d_min > tree[0, 2] + 1e-6:
                assert not blocked

    def test_no_trees_visibility_is_fov_and_wedge(self):
        cfg = small_config(n_trees=0, n_frames=30)
        scene = sim.generate_scene(cfg)
        cos_half = np.cos(np.deg2rad(cfg.fov_deg) / 2)
        for f in range(0, 30, 7):
            for i in range(cfg.n_robots):
                for j in range(cfg.n_robots):
                    if i == j:
                        continue
                    d = scene.traj_t[f, j] - scene.traj_t[f, i]
                    d = d / np.linalg.norm(d)
                    fov_ok = geom.quat_rotate_inv(scene.traj_q[f, i], d)[0] >= cos_half
                    back = geom.quat_rotate_inv(scene.traj_q[f, j], -d)
                    wedge_ok = abs(np.arctan2(back[1], back[0])) >= np.pi / 4
                    assert sim.visibility(scene, f, i, j) == (fov_ok and wedge_ok)


class TestSampleFrame:
    def test_zero_noise_exact(self):
        cfg = sim.zero_noise(small_config(n_trees=10, n_frames=40))
        scene = sim.generate_scene(cfg)
        for f in (0, 17, 39):
            fr = sim.sample_frame(scene, f)
            for i in range(cfg.n_robots):
                for k, j in enumerate(fr.det_src[i]):
                    expected = geom.bearing_to(fr.gt[i], fr.gt[j].t)
                    assert np.allclose(fr.det[i][k], expected, atol=1e-12)
                assert (fr.det_src[i] >= 0).all()
            for i in range(cfg.n_robots):
                for j in range(i + 1, cfg.n_robots):
                    true_d = np.linalg.norm(fr.gt[i].t - fr.gt[j].t)
                    assert fr.uwb[i, j] == pytest.approx(true_d, abs=1e-12)
                    assert fr.uwb[i, j] == fr.uwb[j, i]

    def test_zero_noise_pvo_is_true_delta(self):
        cfg = sim.zero_noise(small_config(n_frames=30))
        scene = sim.generate_scene(cfg)
        fr = sim.sample_frame(scene, 12)
        for i in range(cfg.n_robots):
            true_delta = geom.relative(scene.gt_pose(11, i), scene.gt_pose(12, i))
            assert geom.poses_close(fr.pvo[i], true_delta, tol=1e-12)

    def test_fake_prob_one_appends_exactly_one(self):
        cfg = small_config(fake_prob=1.0, n_trees=10, n_frames=30)
        scene = sim.generate_scene(cfg)
        for f in (3, 11, 25):
            fr = sim.sample_frame(scene, f)
            for i in range(cfg.n_robots):
                n_visible = sum(
                    sim.visibility(scene, f, i, j)
                    for j in range(cfg.n_robots)
                    if j != i
                )
                assert len(fr.det[i]) == min(n_visible + 1, cfg.max_detections)
                assert (fr.det_src[i] == -1).sum() == 1

    def test_detections_unit_norm_and_in_fov(self):
        cfg = small_config(fake_prob=0.7, n_frames=50)
        scene = sim.generate_scene(cfg)
        cos_half = np.cos(np.deg2rad(cfg.fov_deg) / 2)
        for f in range(0, 50, 5):
            fr = sim.sample_frame(scene, f)
            for i in range(cfg.n_robots):
                if len(fr.det[i]) == 0:
                    continue
                norms = np.linalg.norm(fr.det[i], axis=1)
                assert np.abs(norms - 1.0).max() < 1e-9
                assert (fr.det[i][:, 0] >= cos_half - np.sin(3 * cfg.bearing_sigma) - 1e-9).all()

    def test_uwb_sigma_statistics(self):
        cfg = small_config(
            n_robots=2, n_frames=10_000, speed=0.05, n_trees=0, uwb_sigma=0.1, uwb_dropout=0.0
        )
        scene = sim.generate_scene(cfg)
        errs = []
        for f in range(cfg.n_frames):
            fr = sim.sample_frame(scene, f)
            true_d = np.linalg.norm(fr.gt[0].t - fr.gt[1].t)
            errs.append(fr.uwb[0, 1] - true_d)
        assert abs(np.std(errs) - 0.1) < 0.01

    def test_frame_rng_order_independent(self):
        cfg = small_config()
        scene = sim.generate_scene(cfg)
        a = sim.sample_frame(scene, 33)
        sim.sample_frame(scene, 5)
        b = sim.sample_frame(scene, 33)
        assert np.array_equal(a.uwb, b.uwb, equal_nan=True)
        for x, y in zip(a.det, b.det):
            assert np.array_equal(x, y)


class TestDatasetIO:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = small_config(n_frames=100)
        scene, frames = sim.generate_dataset(cfg)
        path = tmp_path / "d.jsonl"
        sim.write_dataset(scene, frames, path)
        cfg2, trees2, frames2 = sim.read_dataset(path)
        assert cfg2 == cfg
        assert np.array_equal(trees2, scene.trees)
        assert len(frames2) == len(frames)
        for a, b in zip(frames, frames2):
            assert a.t == b.t
            assert np.array_equal(a.uwb, b.uwb, equal_nan=True)
            for pa, pb in zip(a.gt, b.gt):
                assert np.array_equal(pa.q, pb.q) and np.array_equal(pa.t, pb.t)
            for pa, pb in zip(a.pvo, b.pvo):
                assert np.array_equal(pa.q, pb.q) and np.array_equal(pa.t, pb.t)
            for da, db in zip(a.det, b.det):
                assert np.array_equal(da, db)
            for sa, sb in zip(a.det_src, b.det_src):
                assert np.array_equal(sa, sb)

    def test_truncated_file_names_last_good_line(self, tmp_path):
        cfg = small_config(n_frames=5)
        scene, frames = sim.generate_dataset(cfg)
        path = tmp_path / "d.jsonl"
        sim.write_dataset(scene, frames, path)
        text = path.read_text()
        path.write_text(text[: int(len(text) * 0.8)])
        with pytest.raises(sim.DatasetError, match=r"last good line"):
            sim.read_dataset(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"format": "nope"}) + "\n")
        with pytest.raises(sim.DatasetError):
            sim.read_dataset(path)

    def test_digest_deterministic(self, tmp_path):
        digests = []
        for name in ("a.jsonl", "b.jsonl"):
            scene, frames = sim.generate_dataset(small_config(seed=7, n_frames=30))
            p = tmp_path / name
            sim.write_dataset(scene, frames, p)
            digests.append(hashlib.sha256(p.read_bytes()).hexdigest())
        assert digests[0] == digests[1]
