"""Image-quality metrics, unseen-identity shape-code fitting and
pose-sequence synthesis on top of a trained model."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import F, Tensor
from .renderer import render


class MetricError(Exception):
    pass


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse <= 0.0:
        return 99.0
    return min(99.0, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 2:
        return img
    raise MetricError(f"expected HxW or HxWx3 image, got shape {img.shape}")


def _window_filter(img, win):
    """'valid' correlation of a 2D image with a small window."""
    k = win.shape[0]
    H, W = img.shape
    s0, s1 = img.strides
    patches = np.lib.stride_tricks.as_strided(
        img, (H - k + 1, W - k + 1, k, k), (s0, s1, s0, s1))
    return np.einsum("ijkl,kl->ij", patches, win)


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Single-scale structural similarity on grayscale-converted images."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise MetricError(f"ssim: shape mismatch {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window_size:
        raise MetricError("ssim: image smaller than the window")
    win = _gaussian_window(window_size, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a = _window_filter(ga, win)
    mu_b = _window_filter(gb, win)
    var_a = _window_filter(ga * ga, win) - mu_a ** 2
    var_b = _window_filter(gb * gb, win) - mu_b ** 2
    cov = _window_filter(ga * gb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class PoseSequence:
    """Ordered pose list with a frame-rate tag."""
    poses: list
    fps: float = 24.0

    def __post_init__(self):
        if not self.poses:
            raise ValueError("pose sequence must be nonempty")

    def __len__(self):
        return len(self.poses)


@dataclass
class MetricReport:
    psnr_frames: list = field(default_factory=list)
    ssim_frames: list = field(default_factory=list)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_frames)) if self.psnr_frames else 0.0

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim_frames)) if self.ssim_frames else 0.0

    def to_dict(self):
        return {"psnr": self.psnr_frames, "ssim": self.ssim_frames,
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim}

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


# -- unseen-identity shape-code fitting ------------------------------------


@dataclass
class ShapeFitResult:
    code: Tensor
    initial_mse: float
    final_mse: float
    mse_history: list
    renders: list  # fitted render per source sample


def _source_mse(model, code, samples, samples_per_ray, fg_gate):
    """Full-frame MSE between renders at the source cameras/poses and the
    source images (graph-free)."""
    total, n = 0.0, 0
    for s in samples:
        img = render(model, code, s.camera, s.pose, samples,
                     samples_per_ray=samples_per_ray, fg_gate=fg_gate)
        total += float(np.sum((img - s.image) ** 2))
        n += s.image.size
    return total / n


def _foreground_pixels(image, thresh=0.98):
    """Pixel coords where the image is not plain white background."""
    mask = np.any(np.asarray(image) < thresh, axis=-1)
    jj, ii = np.nonzero(mask)
    return np.stack([ii, jj], axis=1)


def optimize_shape_code(model, samples, steps=200, lr=1e-2,
                        samples_per_ray=32, pixels_per_step=512,
                        fg_fraction=0.6, fg_gate=1e-3, seed=0,
                        trained_steps=None, log_every=0) -> ShapeFitResult:
    """Fit a fresh shape code for an unseen identity against its source images.

    The code starts at the columnwise mean of the trained table; every other
    parameter stays frozen. Each step minimizes the MSE between stochastic
    pixel renders (at the source cameras and poses) and the source images.
    """
    if not samples:
        raise ValueError("need at least one source sample")
    if trained_steps == 0:
        warnings.warn("optimizing a shape code against an untrained model")
    from .training import Adam

    code = Tensor(model.shape_table.mean_code().copy(), requires_grad=True)
    if steps == 0:
        return ShapeFitResult(code=code, initial_mse=0.0, final_mse=0.0,
                              mse_history=[], renders=[])

    rng = np.random.default_rng(seed)
    opt = Adam({"code": code}, lr=lr)
    fg_pix = [_foreground_pixels(s.image) for s in samples]
    H, W = samples[0].camera.height, samples[0].camera.width

    initial_mse = _source_mse(model, code, samples, samples_per_ray, fg_gate)
    history = []
    for step in range(steps):
        si = int(rng.integers(len(samples)))
        s = samples[si]
        n_fg = int(pixels_per_step * fg_fraction)
        parts = []
        if len(fg_pix[si]) and n_fg:
            parts.append(fg_pix[si][rng.integers(len(fg_pix[si]), size=n_fg)])
        n_uni = pixels_per_step - (len(parts[0]) if parts else 0)
        parts.append(np.stack([rng.integers(W, size=n_uni),
                               rng.integers(H, size=n_uni)], axis=1))
        pixels = np.concatenate(parts, axis=0)

        colors = render(model, code, s.camera, s.pose, samples, pixels=pixels,
                        samples_per_ray=samples_per_ray, rng=rng,
                        fg_gate=fg_gate, with_grad=True)
        gt = np.asarray(s.image)[pixels[:, 1], pixels[:, 0]]
        loss = F.mean((colors - gt) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            history.append({"step": step + 1, "mse": float(loss.data)})

    final_mse = _source_mse(model, code, samples, samples_per_ray, fg_gate)
    renders = [render(model, code, s.camera, s.pose, samples,
                      samples_per_ray=samples_per_ray, fg_gate=fg_gate)
               for s in samples]
    return ShapeFitResult(code=code, initial_mse=initial_mse,
                          final_mse=final_mse, mse_history=history,
                          renders=renders)


# -- pose-sequence synthesis and multiview evaluation -----------------------


def synthesize(model, code, samples, target_camera, sequence: PoseSequence,
               samples_per_ray=64, fg_gate=1e-3):
    """Render one frame per pose in the sequence; deterministic per frame."""
    return [render(model, code, target_camera, pose, samples,
                   samples_per_ray=samples_per_ray, fg_gate=fg_gate)
            for pose in sequence.poses]


def save_frames(frames, out_dir, prefix="frame"):
    import os
    from .synthdata import save_png
    paths = []
    for i, frame in enumerate(frames):
        path = os.path.join(out_dir, f"{prefix}_{i:04d}.png")
        save_png(path, frame)
        paths.append(path)
    return paths


def _ring_source_indices(num_views, num_sources):
    """Evenly spaced ring views: 2 sources at 0/180 degrees, 3 at 0/120/240."""
    return [round(i * num_views / num_sources) % num_views
            for i in range(num_sources)]


def evaluate_multiview(model, manifest, num_sources, samples_per_ray=32,
                       fg_gate=1e-3, identity_indices=None) -> MetricReport:
    """Render held-back ring views from evenly spaced sources per identity."""
    report = MetricReport()
    idents = identity_indices if identity_indices is not None \
        else range(len(manifest.identities))
    for ident_idx in idents:
        rec = manifest.identities[ident_idx]
        n = len(rec.samples)
        src_idx = _ring_source_indices(n, num_sources)
        sources = [manifest.load_sample(ident_idx, j) for j in src_idx]
        code = model.shape_table.row(rec.identity)
        for j in range(n):
            if j in src_idx:
                continue
            target = manifest.load_sample(ident_idx, j)
            img = render(model, code, target.camera, target.pose, sources,
                         samples_per_ray=samples_per_ray, fg_gate=fg_gate)
            report.psnr_frames.append(psnr(img, target.image))
            report.ssim_frames.append(ssim(img, target.image))
    return report
