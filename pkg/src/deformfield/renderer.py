"""Stratified ray sampling and front-to-back alpha compositing over the
implicit field, with white-background compositing outside the network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import F, Tensor, no_grad
from .deformation import pose_aabb
from .geometry import Camera, generate_rays
from .skeleton import Pose


@dataclass
class RaySampleSet:
    t: np.ndarray  # (R, M) strictly increasing depths per ray
    points: np.ndarray  # (R, M, 3)
    seed: int = 0


class RenderError(Exception):
    pass


def sample_along_ray(rays, M, rng=None) -> RaySampleSet:
    """Stratified depths: one sample per bin, uniform within the bin when a
    generator is given, bin midpoints otherwise. Deterministic per generator."""
    if M < 1:
        raise RenderError("need at least one sample per ray")
    R = len(rays)
    t = np.zeros((R, M))
    pts = np.zeros((R, M, 3))
    offsets = rng.uniform(0.0, 1.0, size=(R, M)) if rng is not None \
        else np.full((R, M), 0.5)
    for i, ray in enumerate(rays):
        edges = np.linspace(ray.t_near, ray.t_far, M + 1)
        t[i] = edges[:-1] + offsets[i] * (edges[1:] - edges[:-1])
        pts[i] = ray.origin + t[i][:, None] * ray.direction
    return RaySampleSet(t=t, points=pts)


def composite(alphas, colors):
    """Eq-style alpha compositing; returns (c_r (R,3), W (R,)) tensors."""
    packed = F.composite(alphas, colors)
    return packed[:, :3], packed[:, 3]


def composite_with_background(c_r, W):
    """White background behind the accumulated foreground."""
    if isinstance(c_r, Tensor) or isinstance(W, Tensor):
        Wt = W if isinstance(W, Tensor) else Tensor(np.asarray(W))
        one_m = (1.0 - Wt).reshape(-1, 1)
        return c_r + one_m
    return np.asarray(c_r) + (1.0 - np.asarray(W))[..., None]


def render_rays(model, volume, M_trg2can, sources, rays, samples_per_ray,
                rng=None, fg_gate=0.0):
    """Differentiable render of a ray list -> (colors Tensor (R,3), aux dict).

    ``fg_gate`` > 0 skips the network for samples whose graph-free
    foreground score is below the gate (their occupancy is exactly 0).
    """
    R = len(rays)
    live = [i for i, r in enumerate(rays) if not r.miss]
    out_white = np.ones((R, 3))
    aux = {"alphas": None, "weight_sum": None}
    if not live:
        return Tensor(out_white), aux
    sub = [rays[i] for i in live]
    sset = sample_along_ray(sub, samples_per_ray, rng=rng)
    P = len(sub) * samples_per_ray
    pts = sset.points.reshape(P, 3)

    if fg_gate > 0.0:
        fg_np = model.foreground_score_np(pts, volume, M_trg2can)
        active = np.where(fg_np > fg_gate)[0]
    else:
        active = np.arange(P)

    if active.size:
        alpha_a, color_a, _ = model.eval_points(pts[active], volume, M_trg2can, sources)
        alpha = F.scatter_rows(alpha_a, active, P).reshape(len(sub), samples_per_ray)
        color = F.scatter_rows(color_a, active, P).reshape(len(sub), samples_per_ray, 3)
    else:
        alpha = Tensor(np.zeros((len(sub), samples_per_ray)))
        color = Tensor(np.zeros((len(sub), samples_per_ray, 3)))

    c_r, W = composite(alpha, color)
    c_px = composite_with_background(c_r, W)
    full = F.scatter_rows(c_px, np.asarray(live), R) + _miss_background(R, live)
    aux["alphas"] = alpha
    aux["weight_sum"] = W
    aux["live"] = live
    return full, aux


def _miss_background(R, live):
    bg = np.ones((R, 3))
    bg[live] = 0.0
    return bg


def render(model, code, target_camera: Camera, target_pose: Pose, source_samples,
           pixels=None, samples_per_ray=64, rng=None, fg_gate=0.0,
           aabb_dilate=0.2, chunk=8192, with_grad=False, return_weight=False):
    """Render an image region (or full frame) -> ((H,W,3) or (Npix,3) array.

    ``source_samples`` are SceneSample-likes (image, camera, pose). When
    ``with_grad`` is False the graph is suppressed and a plain array returned.
    ``return_weight`` (graph-free only) additionally returns the accumulated
    foreground compositing weight per pixel, the soft silhouette.
    """
    if return_weight and with_grad:
        raise RenderError("return_weight is only available without gradients")
    if len(source_samples) == 0:
        raise RenderError("source set must be nonempty")
    H, W = target_camera.height, target_camera.width
    full_frame = pixels is None
    if full_frame:
        jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pixels = np.asarray(pixels)

    def _run():
        volume = model.decode_volume(code)
        M_trg2can = model.transforms_to_canonical(target_pose)
        sources = [model.make_source_view(s, target_pose) for s in source_samples]
        aabb = pose_aabb(model.skeleton, target_pose, dilate=aabb_dilate)
        rays = generate_rays(target_camera, pixels, aabb)
        outs = []
        weights = []
        for start in range(0, len(rays), chunk):
            part, aux = render_rays(model, volume, M_trg2can, sources,
                                    rays[start:start + chunk], samples_per_ray,
                                    rng=rng, fg_gate=fg_gate)
            outs.append(part if with_grad else part.data)
            if return_weight:
                w = np.zeros(len(outs[-1]))
                if aux["weight_sum"] is not None:
                    ws = aux["weight_sum"]
                    w[aux["live"]] = ws.data if isinstance(ws, Tensor) else ws
                weights.append(w)
        if with_grad:
            return F.concat(outs, axis=0)
        colors = np.concatenate(outs, axis=0)
        if return_weight:
            return colors, np.concatenate(weights, axis=0)
        return colors

    if with_grad:
        result = _run()
        return result
    with no_grad():
        result = _run()
    if return_weight:
        colors, w = result
        if full_frame:
            return colors.reshape(H, W, 3), w.reshape(H, W)
        return colors, w
    return result.reshape(H, W, 3) if full_frame else result
