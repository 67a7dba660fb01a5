"""Registered gradient-check battery: every differentiable primitive plus
the composite paths (deformation, image conditioning, field heads, pixel
compositing), each verified over multiple random seeds."""

from __future__ import annotations

import numpy as np

from .autodiff import F, Tensor, default_dtype, gradcheck, set_precision


def _t(rng, shape, scale=1.0, shift=0.0):
    return Tensor(rng.normal(size=shape) * scale + shift, requires_grad=True)


def _primitive_checks(rng):
    """-> list of (name, scalar function, input tensors)."""
    a = _t(rng, (3, 4))
    b = _t(rng, (3, 4))
    pos = _t(rng, (3, 4), scale=0.3, shift=2.0)  # bounded away from 0
    sq = lambda x: F.sum(x * x)
    checks = [
        ("add", lambda x, y: sq(x + y), [a, b]),
        ("sub", lambda x, y: sq(x - y), [a, b]),
        ("mul", lambda x, y: sq(x * y), [a, b]),
        ("div", lambda x, y: sq(x / y), [a, pos]),
        ("pow", lambda x: sq(x ** 3), [a]),
        ("exp", lambda x: sq(F.exp(x)), [_t(rng, (5,), scale=0.5)]),
        ("log", lambda x: sq(F.log(x)), [pos]),
        ("sin", lambda x: sq(F.sin(x)), [a]),
        ("cos", lambda x: sq(F.cos(x)), [a]),
        ("relu", lambda x: sq(F.relu(x)), [_t(rng, (7,), shift=0.3)]),
        ("softplus", lambda x: sq(F.softplus(x)), [a]),
        ("sigmoid", lambda x: sq(F.sigmoid(x)), [a]),
        ("clamp", lambda x: sq(F.clamp(x, -0.5, 0.5)),
         [_t(rng, (9,), scale=0.6, shift=0.05)]),
        ("softmax", lambda x: F.sum(F.softmax(x, axis=-1) ** 2), [a]),
        ("sum_axis", lambda x: F.sum(F.sum(x, axis=0) ** 2), [a]),
        ("mean", lambda x: F.mean(x * x), [a]),
        ("reshape", lambda x: sq(F.reshape(x, (4, 3))), [a]),
        ("transpose", lambda x: sq(F.transpose(x, (1, 0))), [a]),
        ("concat", lambda x, y: sq(F.concat([x, y], axis=1)), [a, b]),
        ("getitem_basic", lambda x: sq(x[1:, ::2]), [a]),
        ("getitem_fancy", lambda x: sq(x[np.array([0, 2, 2])]), [a]),
        ("pad", lambda x: sq(F.pad(x, ((1, 2), (0, 1)))), [a]),
        ("flip", lambda x: sq(F.flip(x, (0, 1)) * b.data), [a]),
        ("zero_interleave", lambda x: sq(F.zero_interleave(x, axes=(0, 1))), [a]),
        ("matmul", lambda x, y: sq(x @ y), [_t(rng, (3, 4)), _t(rng, (4, 2))]),
        ("conv2d", lambda x, w, bb: sq(F.conv2d(x, w, bb, stride=2, padding=1)),
         [_t(rng, (1, 2, 5, 5)), _t(rng, (3, 2, 3, 3), scale=0.4), _t(rng, (3,))]),
        ("conv3d", lambda x, w, bb: sq(F.conv3d(x, w, bb, stride=1, padding=1)),
         [_t(rng, (1, 2, 3, 3, 3)), _t(rng, (2, 2, 3, 3, 3), scale=0.4),
          _t(rng, (2,))]),
        ("conv3d_transpose",
         lambda x, w: sq(F.conv3d_transpose(x, w, stride=2, padding=1)),
         [_t(rng, (1, 2, 3, 3, 3)), _t(rng, (2, 2, 4, 4, 4), scale=0.4)]),
        ("bilinear_sample", lambda g, uv: sq(F.bilinear_sample(g, uv)),
         [_t(rng, (2, 5, 6)),
          Tensor(rng.uniform(-0.5, 6.0, size=(7, 2)), requires_grad=True)]),
        ("trilinear_sample", lambda v, p: sq(F.trilinear_sample(v, p)),
         [_t(rng, (2, 4, 4, 4)),
          Tensor(rng.uniform(0.3, 2.7, size=(6, 3)), requires_grad=True)]),
        ("composite", lambda al, co: sq(F.composite(F.sigmoid(al), F.sigmoid(co))),
         [_t(rng, (3, 5)), _t(rng, (3, 5, 3))]),
        ("scatter_rows", lambda v: sq(F.scatter_rows(v, np.array([1, 3, 4]), 6)),
         [_t(rng, (3, 2))]),
        ("mean_pool", lambda x, y: sq(F.mean_pool([x, y])), [a, b]),
    ]
    return checks


def _composite_checks(rng):
    """End-to-end paths through the package modules, tiny configurations."""
    from .model import Model, ModelConfig
    from .deformation import target_blend_weights, to_canonical
    from .renderer import composite, composite_with_background
    from .skeleton import Pose

    cfg = ModelConfig(num_identities=1, code_dim=4, weight_volume_resolution=8,
                      feature_channels=3, feature_resolution=8,
                      encoder_widths=(2, 3, 4), embed_dim=4, inter_dim=4,
                      head_hidden=6, posenc_octaves=2, decoder_channels=(4, 3),
                      seed=int(rng.integers(1 << 31)))
    model = Model(cfg)
    pose = Pose.identity(model.skeleton.num_joints)
    rot = rng.uniform(-0.3, 0.3, size=pose.joint_rotation.shape)
    pose = Pose(root_translation=np.zeros(3), joint_rotation=rot)
    M = model.transforms_to_canonical(pose)
    pts = rng.uniform(-0.3, 0.3, size=(4, 3)) + np.array([0.0, 0.9, 0.0])
    img = rng.uniform(0.0, 1.0, size=(8, 8, 3))

    class _Sample:
        pass

    from .geometry import look_at_camera
    cam = look_at_camera(np.array([0.0, 0.9, 2.0]), np.array([0.0, 0.9, 0.0]),
                         up=np.array([0.0, 1.0, 0.0]), fx=10.0, fy=10.0,
                         cx=4.0, cy=4.0, width=8, height=8)
    sample = _Sample()
    sample.image = img
    sample.camera = cam
    sample.pose = pose

    def deform_path(code):
        vol = model.decode_volume(code)
        w, fg = target_blend_weights(vol, pts, M)
        xc = to_canonical(pts, w, M)
        return F.sum(xc * xc) + F.sum(fg * fg)

    def pixel_path(code):
        vol = model.decode_volume(code)
        src = model.make_source_view(sample, pose)
        alpha, color, _ = model.eval_points(pts, vol, M, [src])
        c_r, W = composite(F.reshape(alpha, (1, 4)), F.reshape(color, (1, 4, 3)))
        c_px = composite_with_background(c_r, W)
        return F.sum(c_px * c_px)

    code = Tensor(rng.normal(size=(cfg.code_dim,)) * 0.1, requires_grad=True)
    code2 = Tensor(code.data.copy(), requires_grad=True)
    return [
        ("composite_deformation", deform_path, [code]),
        ("composite_pixel", pixel_path, [code2]),
    ]


def run_suite(seeds=range(10), tol=None, include_composites=True):
    """Run the full battery; -> list of (name, seed, GradcheckReport)."""
    prev = "double" if default_dtype() == np.float64 else "single"
    set_precision("double")
    if tol is None:
        tol = 1e-4
    results = []
    try:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            checks = _primitive_checks(rng)
            if include_composites:
                checks = checks + _composite_checks(rng)
            for name, fn, inputs in checks:
                report = gradcheck(fn, inputs, tol=tol)
                results.append((name, seed, report))
    finally:
        set_precision(prev)
    return results
