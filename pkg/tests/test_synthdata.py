"""Synthetic capsule-figure dataset: analytic raytracer oracle, blend-weight
oracle, deterministic generation and manifest round-trips."""

import json
import os

import numpy as np
import pytest

from deformfield.geometry import look_at_camera
from deformfield.skeleton import Pose, default_humanoid
from deformfield.synthdata import (
    Capsule,
    FigureSpec,
    SynthConfig,
    _intersect_capsule,
    generate_dataset,
    load_manifest,
    make_figure,
    oracle_blend_weights,
    render_oracle,
    ring_camera,
    sample_pose,
)


def _camera(width=48, height=48):
    return look_at_camera([0.0, 0.85, 2.2], [0.0, 0.85, 0.0], [0, 1, 0],
                          fx=1.15 * width, fy=1.15 * height,
                          cx=width / 2, cy=height / 2, width=width, height=height)


class TestCapsuleIntersection:
    def test_sphere_hit_by_hand(self):
        # degenerate capsule (a == b) = sphere of radius 1 at z = 5
        a = b = np.array([0.0, 0.0, 5.0])
        t = _intersect_capsule(np.zeros(3), np.array([[0.0, 0.0, 1.0]]), a, b, 1.0)
        np.testing.assert_allclose(t, [4.0])

    def test_cylinder_body_hit_by_hand(self):
        # vertical capsule on the z-axis... axis along y, ray along +z
        a = np.array([0.0, -1.0, 5.0])
        b = np.array([0.0, 1.0, 5.0])
        t = _intersect_capsule(np.zeros(3), np.array([[0.0, 0.0, 1.0]]), a, b, 0.5)
        np.testing.assert_allclose(t, [4.5])

    def test_miss_is_inf(self):
        a = np.array([10.0, 0.0, 5.0])
        b = np.array([10.0, 1.0, 5.0])
        t = _intersect_capsule(np.zeros(3), np.array([[0.0, 0.0, 1.0]]), a, b, 0.5)
        assert np.isinf(t[0])

    def test_matches_sphere_marching(self):
        # brute-force check against dense sampling along the ray
        rng = np.random.default_rng(0)
        a = rng.normal(size=3)
        b = rng.normal(size=3)
        r = 0.7
        o = np.array([0.0, 0.0, -6.0])
        d = np.array([0.05, -0.02, 1.0])
        d = d / np.linalg.norm(d)
        t = _intersect_capsule(o, d[None], a, b, r)[0]
        ts = np.linspace(0.0, 15.0, 400000)
        pts = o + ts[:, None] * d
        from deformfield.synthdata import _segment_distance
        inside = _segment_distance(pts, a, b) < r
        if inside.any():
            t_march = ts[np.argmax(inside)]
            assert abs(t - t_march) < 1e-3
        else:
            assert np.isinf(t)


class TestFigure:
    def test_deterministic_per_seed(self):
        f1, f2 = make_figure(7), make_figure(7)
        for c1, c2 in zip(f1.capsules, f2.capsules):
            np.testing.assert_array_equal(c1.a, c2.a)
            np.testing.assert_array_equal(c1.albedo, c2.albedo)

    def test_zero_jitter_reproduces_base(self):
        from deformfield.synthdata import BASE_CAPSULES
        f = make_figure(3, jitter=0.0)
        for cap, (bone, a, b, r) in zip(f.capsules, BASE_CAPSULES):
            np.testing.assert_allclose(cap.a, a)
            np.testing.assert_allclose(cap.b, b)
            np.testing.assert_allclose(cap.radius, r)

    def test_palette_leaves_headroom_for_mask(self):
        f = make_figure(11)
        for c in f.capsules:
            assert np.all(c.albedo <= 0.95)

    def test_roundtrip_dict(self):
        f = make_figure(5)
        f2 = FigureSpec.from_dict(f.to_dict())
        for c1, c2 in zip(f.capsules, f2.capsules):
            np.testing.assert_array_equal(c1.b, c2.b)

    def test_capsule_validation(self):
        with pytest.raises(ValueError):
            Capsule(0, np.zeros(3), np.ones(3), -0.1, np.zeros(3))
        with pytest.raises(ValueError):
            Capsule(0, np.zeros(3), np.ones(3), 0.1, np.array([0.5, 1.5, 0.5]))


class TestOracleRenderer:
    def test_figure_visible_and_background_white(self):
        sample = render_oracle(make_figure(0), Pose.identity(9), _camera())
        cover = sample.mask.mean()
        assert 0.05 < cover < 0.6
        assert np.all(sample.image[sample.mask == 0] == 1.0)

    def test_nearest_capsule_wins(self):
        # two overlapping spheres; the closer one's albedo shows at center
        near = Capsule(0, [0.0, 0.85, 0.5], [0.0, 0.85, 0.5], 0.2, [0.9, 0.1, 0.1])
        far = Capsule(0, [0.0, 0.85, -0.5], [0.0, 0.85, -0.5], 0.3, [0.1, 0.9, 0.1])
        fig = FigureSpec(identity=0, seed=0, capsules=[far, near])
        sample = render_oracle(fig, Pose.identity(9), _camera())
        center = sample.image[24, 24]
        np.testing.assert_allclose(center, [0.9, 0.1, 0.1])

    def test_posed_render_differs(self):
        fig = make_figure(0)
        cam = _camera()
        s0 = render_oracle(fig, Pose.identity(9), cam)
        rot = np.zeros((9, 3))
        rot[3] = [0.0, 0.0, 0.9]
        s1 = render_oracle(fig, Pose(np.zeros(3), rot), cam)
        assert np.abs(s0.image - s1.image).max() > 0.1

    def test_supersample_shape(self):
        s = render_oracle(make_figure(0), Pose.identity(9), _camera(32, 32),
                          supersample=True)
        assert s.image.shape == (32, 32, 3)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}


class TestOracleBlendWeights:
    def test_rows_sum_to_one(self):
        fig = make_figure(1)
        x = np.random.default_rng(0).uniform(-1, 1.8, size=(200, 3))
        w = oracle_blend_weights(fig, x, Pose.identity(9))
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_surface_point_dominated_by_its_bone(self):
        # weights peak where the signed surface distance is zero, so probe a
        # point on the head capsule's top surface, far from every other bone
        fig = make_figure(1, jitter=0.0)
        head = next(c for c in fig.capsules if c.bone == 2)
        axis = head.b - head.a
        axis = axis / np.linalg.norm(axis)
        top = head.b + axis * head.radius
        w = oracle_blend_weights(fig, top[None], Pose.identity(9))
        assert w[0].argmax() == 2
        assert w[0, 2] > 0.9


class TestDatasetGeneration:
    def test_counts_and_files(self, tmp_path):
        cfg = SynthConfig(num_identities=2, num_views=3, num_poses=2,
                          image_size=24, seed=5)
        man = generate_dataset(cfg, str(tmp_path))
        n = sum(len(r.samples) for r in man.identities)
        assert len(man.identities) == 2
        assert n == 2 * 3 * 2
        assert os.path.exists(tmp_path / "manifest.json")
        pngs = [f for f in os.listdir(tmp_path) if f.endswith(".png")]
        assert len(pngs) == 2 * n  # image + mask each

    def test_manifest_roundtrip(self, tmp_path):
        cfg = SynthConfig(num_identities=1, num_views=3, image_size=24, seed=2)
        man = generate_dataset(cfg, str(tmp_path))
        man2 = load_manifest(str(tmp_path / "manifest.json"))
        s1 = man.load_sample(0, 1)
        s2 = man2.load_sample(0, 1)
        # 8-bit PNG quantization bounds the round-trip error
        assert np.abs(s1.image - s2.image).max() <= 1.0 / 255.0 + 1e-12
        np.testing.assert_allclose(s1.camera.rotation, s2.camera.rotation)
        np.testing.assert_allclose(s1.pose.joint_rotation, s2.pose.joint_rotation)

    def test_generation_deterministic(self, tmp_path):
        cfg = SynthConfig(num_identities=1, num_views=2, image_size=24, seed=9)
        m1 = generate_dataset(cfg, str(tmp_path / "a"))
        m2 = generate_dataset(cfg, str(tmp_path / "b"))
        i1 = m1.load_sample(0, 0).image
        i2 = m2.load_sample(0, 0).image
        np.testing.assert_array_equal(i1, i2)

    def test_test_views_split(self, tmp_path):
        cfg = SynthConfig(num_identities=1, num_views=4, image_size=24, seed=0,
                          test_views=(3,))
        man = generate_dataset(cfg, str(tmp_path))
        splits = [s.split for s in man.identities[0].samples]
        assert splits.count("test") == 1
        assert man.identities[0].samples[3].split == "test"

    def test_ring_cameras_all_see_figure(self, tmp_path):
        cfg = SynthConfig(num_identities=1, num_views=6, image_size=24, seed=1)
        man = generate_dataset(cfg, str(tmp_path))
        for j in range(6):
            assert man.load_sample(0, j).mask.mean() > 0.03

    def test_pose_angle_bound(self):
        sk = default_humanoid()
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = sample_pose(rng, sk, max_angle_deg=30.0)
            norms = np.linalg.norm(pose.joint_rotation, axis=1)
            assert norms.max() <= np.deg2rad(30.0) + 1e-9


class TestFigureEnvelope:
    def test_hundred_seeds_within_jitter_envelope(self):
        from deformfield.synthdata import BASE_CAPSULES
        base_r = {i: r for i, (bone, a, b, r) in enumerate(BASE_CAPSULES)}
        for seed in range(100):
            fig = make_figure(seed)
            for i, cap in enumerate(fig.capsules):
                lo, hi = 0.7 * base_r[i], 1.3 * base_r[i]
                assert lo - 1e-12 <= cap.radius <= hi + 1e-12


class TestOracleRendererEdgeCases:
    def test_empty_figure_all_white(self):
        fig = FigureSpec(identity=0, seed=0, capsules=[])
        sample = render_oracle(fig, Pose.identity(9), _camera())
        np.testing.assert_allclose(sample.image, 1.0)
        np.testing.assert_allclose(sample.mask, 0.0)

    def test_front_back_views_differ(self, tmp_path):
        cfg = SynthConfig(num_identities=1, num_views=2, image_size=32, seed=3)
        man = generate_dataset(cfg, str(tmp_path))
        front = man.load_sample(0, 0).image
        back = man.load_sample(0, 1).image
        assert np.abs(front - back).max() > 0.05

    def test_supersampled_consistency(self):
        # the supersampled render (2x grid box-filtered down) matches the
        # one-ray-per-pixel render within the anti-aliasing tolerance
        fig = make_figure(0)
        pose = Pose.identity(9)
        cam = _camera()
        lo = render_oracle(fig, pose, cam).image
        aa = render_oracle(fig, pose, cam, supersample=True).image
        assert np.abs(aa - lo).mean() < 2.0 / 255.0

    def test_mask_equals_nonwhite_pixels(self):
        sample = render_oracle(make_figure(2), Pose.identity(9), _camera())
        nonwhite = np.any(sample.image < 1.0, axis=-1)
        np.testing.assert_array_equal(sample.mask > 0.5, nonwhite)


class TestOracleWeightsEdgeCases:
    def test_deep_inside_isolated_capsule_one_hot(self):
        caps = [Capsule(0, [0.0, 0.0, 0.0], [0.0, 0.4, 0.0], 0.2,
                        [0.5, 0.5, 0.5]),
                Capsule(1, [3.0, 0.0, 0.0], [3.0, 0.4, 0.0], 0.2,
                        [0.5, 0.5, 0.5])]
        fig = FigureSpec(identity=0, seed=0, capsules=caps)
        center = np.array([[0.0, 0.2, 0.0]])
        w = oracle_blend_weights(fig, center, Pose.identity(9))
        assert w[0, 0] > 1.0 - 1e-3

    def test_equidistant_between_identical_capsules(self):
        caps = [Capsule(0, [-1.0, 0.0, 0.0], [-1.0, 0.5, 0.0], 0.2,
                        [0.5, 0.5, 0.5]),
                Capsule(1, [1.0, 0.0, 0.0], [1.0, 0.5, 0.0], 0.2,
                        [0.5, 0.5, 0.5])]
        fig = FigureSpec(identity=0, seed=0, capsules=caps)
        w = oracle_blend_weights(fig, np.array([[0.0, 0.25, 0.0]]),
                                 Pose.identity(9))
        np.testing.assert_allclose(w[0, 0], w[0, 1], atol=1e-12)

    def test_lipschitz_continuity(self):
        fig = make_figure(4)
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.5, 1.5, size=(300, 3))
        delta = 1e-4
        w0 = oracle_blend_weights(fig, x, Pose.identity(9))
        w1 = oracle_blend_weights(fig, x + [delta, 0.0, 0.0],
                                  Pose.identity(9))
        # finite empirical Lipschitz bound for a small step; the sharpest
        # transitions live at soft decision boundaries between capsules,
        # whose width scales with sigma^2, so the constant is large but finite
        assert np.abs(w1 - w0).max() < 500.0 * delta
