"""Ray sampling, compositing closed forms and the scalar brute-force
verification of the full production render."""

import numpy as np
import pytest

from deformfield.autodiff import F, Tensor, set_precision
from deformfield.geometry import generate_rays, look_at_camera
from deformfield.model import Model, ModelConfig
from deformfield.renderer import (
    RenderError,
    composite,
    composite_with_background,
    render,
    render_rays,
    sample_along_ray,
)
from deformfield.skeleton import Pose
from deformfield.synthdata import SynthConfig, generate_dataset

import oracles


@pytest.fixture(autouse=True)
def _double():
    set_precision("double")
    yield
    set_precision("single")


class TestSampling:
    def _ray(self):
        from deformfield.geometry import Ray
        return Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)

    def test_midpoints_without_rng(self):
        s = sample_along_ray([self._ray()], 4)
        np.testing.assert_allclose(s.t[0], [1.25, 1.75, 2.25, 2.75])

    def test_stratified_one_per_bin(self):
        rng = np.random.default_rng(0)
        s = sample_along_ray([self._ray()], 8, rng=rng)
        edges = np.linspace(1.0, 3.0, 9)
        assert np.all(s.t[0] >= edges[:-1]) and np.all(s.t[0] <= edges[1:])
        assert np.all(np.diff(s.t[0]) > 0)

    def test_deterministic_per_generator(self):
        s1 = sample_along_ray([self._ray()], 8, rng=np.random.default_rng(5))
        s2 = sample_along_ray([self._ray()], 8, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(s1.t, s2.t)

    def test_points_on_ray(self):
        s = sample_along_ray([self._ray()], 4)
        np.testing.assert_allclose(s.points[0, :, 2], s.t[0])

    def test_zero_samples_rejected(self):
        with pytest.raises(RenderError):
            sample_along_ray([self._ray()], 0)


class TestCompositeClosedForms:
    def test_half_half_weights(self):
        # alphas (0.5, 0.5): weights (0.5, 0.25), W = 0.75
        alphas = Tensor(np.array([[0.5, 0.5]]))
        colors = Tensor(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]))
        c_r, W = composite(alphas, colors)
        np.testing.assert_allclose(c_r.data[0], [0.5, 0.25, 0.0], atol=1e-12)
        np.testing.assert_allclose(W.data[0], 0.75, atol=1e-12)

    def test_opaque_first_sample_wins(self):
        alphas = Tensor(np.array([[1.0, 0.7, 0.3]]))
        colors = Tensor(np.ones((1, 3, 3)) * np.array([[[0.2], [0.9], [0.4]]]))
        c_r, W = composite(alphas, colors)
        np.testing.assert_allclose(c_r.data[0], 0.2, atol=1e-12)
        np.testing.assert_allclose(W.data[0], 1.0, atol=1e-12)

    def test_all_zero_alphas(self):
        c_r, W = composite(Tensor(np.zeros((2, 4))), Tensor(np.ones((2, 4, 3))))
        np.testing.assert_allclose(c_r.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(W.data, 0.0, atol=1e-12)

    def test_white_background_fill(self):
        c_px = composite_with_background(np.zeros((2, 3)), np.zeros(2))
        np.testing.assert_allclose(c_px, 1.0)

    def test_matches_scalar_composite(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, size=(4, 6))
        c = rng.uniform(0, 1, size=(4, 6, 3))
        c_r, W = composite(Tensor(a), Tensor(c))
        for r in range(4):
            cs, ws = oracles.scalar_composite(a[r], c[r])
            np.testing.assert_allclose(c_r.data[r], cs, atol=1e-12)
            np.testing.assert_allclose(W.data[r], ws, atol=1e-12)


def _tiny_setup(tmp_path, num_views=3, image_size=16):
    cfg = SynthConfig(num_identities=1, num_views=num_views,
                      image_size=image_size, seed=4)
    man = generate_dataset(cfg, str(tmp_path))
    model = Model(ModelConfig(num_identities=1, code_dim=6,
                              weight_volume_resolution=12, feature_channels=4,
                              feature_resolution=8, encoder_widths=(2, 3, 4),
                              embed_dim=6, inter_dim=6, head_hidden=8,
                              posenc_octaves=3, decoder_channels=(4, 3), seed=0))
    return man, model


class TestProductionVsScalarOracle:
    def test_patch_matches_brute_force(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1), man.load_sample(0, 2)]

        code = model.shape_table.row(0)
        volume = model.decode_volume(code)
        M2can = model.transforms_to_canonical(target.pose)
        src_views = [model.make_source_view(s, target.pose) for s in sources]

        from deformfield.deformation import pose_aabb
        aabb_box = pose_aabb(model.skeleton, target.pose)
        # center 4x4 patch
        jj, ii = np.meshgrid(np.arange(6, 10), np.arange(6, 10), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
        rays = generate_rays(target.camera, pixels, aabb_box)
        M = 8

        out, _ = render_rays(model, volume, M2can, src_views, rays, M)

        # fully independent source features via the scalar encoder
        scalar_sources = []
        for s in sources:
            fvals = oracles.scalar_encode(
                s.image, [w.data for w in model.encoder.weights],
                [b.data for b in model.encoder.biases])
            scalar_sources.append(
                (s.camera, s.image, fvals,
                 model.transforms_to_source(target.pose, s.pose)))

        for r, ray in enumerate(rays):
            expected = oracles.scalar_render_ray(
                model, volume.values.data, volume.aabb, M2can,
                scalar_sources, ray, M)
            np.testing.assert_allclose(out.data[r], expected, atol=1e-5)

    def test_fg_gate_zero_matches_gated(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        code = model.shape_table.row(0)
        img_a = render(model, code, target.camera, target.pose, sources,
                       samples_per_ray=8, fg_gate=0.0)
        img_b = render(model, code, target.camera, target.pose, sources,
                       samples_per_ray=8, fg_gate=1e-3)
        # gating only skips samples whose occupancy is numerically negligible
        assert np.abs(img_a - img_b).max() < 1e-3

    def test_miss_rays_render_white(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        code = model.shape_table.row(0)
        volume = model.decode_volume(code)
        M2can = model.transforms_to_canonical(target.pose)
        src_views = [model.make_source_view(s, target.pose) for s in sources]
        from deformfield.geometry import Ray
        miss = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0, 1.0, miss=True)
        hit = Ray(target.camera.center,
                  -target.camera.center / np.linalg.norm(target.camera.center),
                  1.0, 3.0)
        out, aux = render_rays(model, volume, M2can, src_views, [miss, hit], 4)
        np.testing.assert_allclose(out.data[0], 1.0)
        assert aux["live"] == [1]

    def test_render_requires_sources(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        with pytest.raises(RenderError):
            render(model, model.shape_table.row(0), target.camera, target.pose, [])

    def test_full_frame_shape_and_range(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        img = render(model, model.shape_table.row(0), target.camera,
                     target.pose, sources, samples_per_ray=4)
        assert img.shape == (16, 16, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0 + 1e-9

    def test_render_deterministic(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        code = model.shape_table.row(0)
        a = render(model, code, target.camera, target.pose, sources,
                   samples_per_ray=4)
        b = render(model, code, target.camera, target.pose, sources,
                   samples_per_ray=4)
        np.testing.assert_array_equal(a, b)


class TestCompositeInvariants:
    def test_weights_nonneg_and_sum_le_one(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(0, 1, size=(20, 9))
        _, W = composite(Tensor(a), Tensor(rng.uniform(size=(20, 9, 3))))
        # per-sample weights via the closed form
        trans = np.cumprod(np.concatenate(
            [np.ones((20, 1)), 1.0 - a[:, :-1]], axis=1), axis=1)
        wgt = a * trans
        assert np.all(wgt >= 0)
        np.testing.assert_allclose(W.data, wgt.sum(axis=1), atol=1e-12)
        assert np.all(W.data <= 1.0 + 1e-12)

    def test_constant_color_gives_W_times_v(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, size=(5, 6))
        v = np.array([0.2, 0.7, 0.4])
        colors = np.broadcast_to(v, (5, 6, 3)).copy()
        c_r, W = composite(Tensor(a), Tensor(colors))
        np.testing.assert_allclose(c_r.data, W.data[:, None] * v, atol=1e-12)

    def test_increasing_alpha_never_decreases_W(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(0, 0.9, size=(1, 8))
        _, W0 = composite(Tensor(a), Tensor(np.ones((1, 8, 3))))
        for j in range(8):
            a2 = a.copy()
            a2[0, j] = min(1.0, a2[0, j] + 0.05)
            _, W1 = composite(Tensor(a2), Tensor(np.ones((1, 8, 3))))
            assert W1.data[0] >= W0.data[0] - 1e-12

    def test_background_formula(self):
        c_px = composite_with_background(np.array([[0.75, 0.0, 0.0]]),
                                         np.array([0.75]))
        np.testing.assert_allclose(c_px[0], [1.0, 0.25, 0.25], atol=1e-12)


class TestEmptyField:
    def test_zero_weight_volume_renders_white(self, tmp_path):
        # foreground score ~0 everywhere forces occupancy to ~0: white frame
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        from deformfield.deformation import CanonicalWeightVolume
        code = model.shape_table.row(0)
        volume = model.decode_volume(code)
        empty = CanonicalWeightVolume(
            values=Tensor(np.full(volume.values.shape, 1e-12)),
            aabb=volume.aabb)
        M2can = model.transforms_to_canonical(target.pose)
        src_views = [model.make_source_view(s, target.pose) for s in sources]
        from deformfield.deformation import pose_aabb
        box = pose_aabb(model.skeleton, target.pose)
        jj, ii = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
        rays = generate_rays(target.camera, pixels, box)
        out, _ = render_rays(model, empty, M2can, src_views, rays, 4)
        np.testing.assert_allclose(out.data, 1.0, atol=1e-9)


class TestForegroundWeightOutput:
    def test_weight_map_shape_range_and_background(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        img, weight = render(model, model.shape_table.row(0), target.camera,
                             target.pose, sources, samples_per_ray=4,
                             return_weight=True)
        assert img.shape == (16, 16, 3)
        assert weight.shape == (16, 16)
        assert weight.min() >= 0.0 and weight.max() <= 1.0 + 1e-9
        # color identity: c = c_fg + (1 - W) means c >= 1 - W channelwise
        assert np.all(img >= (1.0 - weight)[..., None] - 1e-6)

    def test_weight_map_rejected_with_grad(self, tmp_path):
        man, model = _tiny_setup(tmp_path)
        target = man.load_sample(0, 0)
        sources = [man.load_sample(0, 1)]
        with pytest.raises(RenderError):
            render(model, model.shape_table.row(0), target.camera,
                   target.pose, sources, samples_per_ray=4,
                   return_weight=True, with_grad=True)
