"""Convolutional source-image encoder and pose-aware pixel-aligned sampling.

The encoder has exactly three stride-2 stages; each stage output is
bilinearly upsampled back to the input resolution and channel-concatenated
into one full-resolution feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import F, Tensor, parameter
from .deformation import to_source
from .geometry import Camera

WHITE = np.array([1.0, 1.0, 1.0])


class EncoderError(Exception):
    pass


@dataclass
class FeatureMap:
    values: Tensor  # (C, H, W) at full input resolution
    camera: Camera = None


class ImageEncoder:
    """Three stride-2 conv stages with multi-scale upsample-and-concat output."""

    def __init__(self, rng=None, widths=(16, 32, 64), kernel=3):
        rng = rng or np.random.default_rng(0)
        self.widths = tuple(widths)
        if len(self.widths) != 3:
            raise EncoderError("encoder is fixed at three downsampling stages")
        self.kernel = kernel
        chans = (3,) + self.widths
        self.weights = []
        self.biases = []
        for i in range(3):
            fan_in = chans[i] * kernel * kernel
            self.weights.append(parameter(
                rng.normal(0, np.sqrt(2.0 / fan_in),
                           size=(chans[i + 1], chans[i], kernel, kernel))))
            self.biases.append(parameter(np.zeros(chans[i + 1])))

    @property
    def out_channels(self):
        return sum(self.widths)

    def encode(self, image, camera: Camera = None) -> FeatureMap:
        """image: (H,W,3) array in [0,1] -> FeatureMap at (sum(widths), H, W)."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise EncoderError(f"expected (H,W,3) image, got {img.shape}")
        H, W = img.shape[:2]
        x = Tensor(img.transpose(2, 0, 1)[None])  # (1,3,H,W)
        stages = []
        pad = self.kernel // 2
        for w, b in zip(self.weights, self.biases):
            x = F.relu(F.conv2d(x, w, b, stride=2, padding=pad))
            stages.append(x)
        ups = [_upsample_to(s, H, W) for s in stages]
        return FeatureMap(values=F.concat(ups, axis=0), camera=camera)

    def params(self, prefix="encoder"):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.conv{i}.weight"] = w
            out[f"{prefix}.conv{i}.bias"] = b
        return out


def _upsample_to(stage, H, W):
    """Bilinear upsample of a (1,C,h,w) stage to (C,H,W)."""
    _, C, h, w = stage.shape
    grid = stage.reshape(C, h, w)
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    uv = np.stack([(ii.ravel() + 0.5) * (w / W),
                   (jj.ravel() + 0.5) * (h / H)], axis=1)
    sampled = F.bilinear_sample(grid, Tensor(uv))  # (H*W, C)
    return sampled.transpose(1, 0).reshape(C, H, W)


def pixel_aligned_sample(fmap: FeatureMap, uv) -> Tensor:
    """Bilinear feature lookup at continuous pixel coords uv (P,2), zero padding."""
    if not isinstance(uv, Tensor):
        uv = Tensor(np.asarray(uv))
    return F.bilinear_sample(fmap.values, uv)


@dataclass
class SourceView:
    """One conditioning image with its camera, pose transforms and features."""

    camera: Camera
    image: np.ndarray  # (H,W,3)
    fmap: FeatureMap
    M_trg2src: np.ndarray  # (K,4,4)


def project_diff(camera: Camera, x: Tensor):
    """Differentiable pinhole projection of points (P,3).

    Returns (uv Tensor (P,2), in_front mask (P,1) ndarray). Depth is clamped
    at 1e-9 so behind-camera points stay finite; the mask flags them.
    """
    xc = F.matmul(x, Tensor(camera.rotation.T)) + camera.translation
    z = xc[:, 2:3]
    in_front = (z.data > 1e-9).astype(x.dtype)
    zs = F.clamp(z, lo=1e-9)
    u = xc[:, 0:1] * camera.fx / zs + camera.cx
    v = xc[:, 1:2] * camera.fy / zs + camera.cy
    return F.concat([u, v], axis=1), in_front


def source_condition(x, w, sources):
    """Pose-aware pixel-aligned conditioning for each source view.

    For each source: map target points into that source's pose space with
    the blended rigid transforms, project, and sample both the feature map
    and the raw image. Behind-camera points get zero features and white rgb.
    Output order matches input order.
    """
    if len(sources) == 0:
        raise EncoderError("at least one source view is required")
    out = []
    for src in sources:
        x_src = to_source(x, w, src.M_trg2src)
        uv, in_front = project_diff(src.camera, x_src)
        feat = pixel_aligned_sample(src.fmap, uv) * in_front
        img_grid = Tensor(np.asarray(src.image).transpose(2, 0, 1))
        rgb = F.bilinear_sample(img_grid, uv) * in_front + (1.0 - in_front) * WHITE
        out.append((feat, rgb))
    return out
