"""Skeletal deformation core: per-identity shape codes decoded into canonical
blend-weight volumes, target-space blend weights by inverse mapping, and the
weighted rigid transforms into canonical / source space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import F, Tensor, parameter
from .skeleton import Pose, Skeleton, forward_kinematics

EPS_DENOM = 1e-9


class DeformationError(Exception):
    pass


def canonical_aabb(skeleton: Skeleton, pad=0.35):
    """Fixed canonical-space bounding box around the rest skeleton."""
    pts = np.concatenate([skeleton.rest_joint_positions(), _bone_segments(skeleton)[1]])
    return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def _bone_segments(skeleton: Skeleton):
    """Per-bone (start, end) canonical segments: joint -> mean of children,
    or a short extrapolation along the joint's own offset for leaves."""
    joints = skeleton.rest_joint_positions()
    K = skeleton.num_joints
    starts = joints.copy()
    ends = np.zeros_like(joints)
    children = [[] for _ in range(K)]
    for k in range(1, K):
        children[skeleton.parent[k]].append(k)
    for k in range(K):
        if getattr(skeleton, "bone_tip", None) is not None:
            ends[k] = skeleton.bone_tip[k]
        elif children[k]:
            ends[k] = joints[children[k]].mean(axis=0)
        else:
            off = skeleton.rest_offset[k]
            n = np.linalg.norm(off)
            ends[k] = joints[k] + (off / n * 0.15 if n > 1e-9 else np.zeros(3))
    return starts, ends


def skeleton_prior(skeleton: Skeleton, aabb, resolution, sigma=0.12, amplitude=1.0):
    """Softplus pre-activation bias per bone: amplitude - (d_k / sigma)^2,
    d_k = voxel-center distance to bone k's canonical segment.

    Biases the freshly initialized decoder toward a coherent skeleton-shaped
    weight field instead of an incoherent random one.
    """
    lo, hi = aabb
    R = resolution
    axes = [np.linspace(lo[a], hi[a], R) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    starts, ends = _bone_segments(skeleton)
    K = skeleton.num_joints
    prior = np.zeros((K, R, R, R))
    for k in range(K):
        ba = ends[k] - starts[k]
        denom = float(ba @ ba)
        if denom < 1e-16:
            d = np.linalg.norm(pts - starts[k], axis=1)
        else:
            t = np.clip(((pts - starts[k]) @ ba) / denom, 0.0, 1.0)
            d = np.linalg.norm(pts - (starts[k] + t[:, None] * ba), axis=1)
        prior[k] = (amplitude - (d / sigma) ** 2).reshape(R, R, R)
    # floor keeps softplus(prior) strictly positive in single precision
    return np.maximum(prior, -30.0)


@dataclass
class CanonicalWeightVolume:
    """Strictly positive K-channel blend-weight volume over the canonical AABB."""

    values: Tensor  # (K, R, R, R), softplus output
    aabb: tuple  # (lo, hi)

    @property
    def resolution(self):
        return self.values.shape[1]

    @property
    def num_bones(self):
        return self.values.shape[0]


class ShapeCodeTable:
    """L x D table of learnable per-identity shape codes.

    Codes for new identities at inference time are separate appended
    parameters; trained rows are never mutated outside training.
    """

    def __init__(self, num_identities, code_dim, rng=None, init_scale=0.1):
        rng = rng or np.random.default_rng(0)
        self.codes = parameter(rng.normal(0.0, init_scale, size=(num_identities, code_dim)))

    @property
    def num_identities(self):
        return self.codes.shape[0]

    @property
    def code_dim(self):
        return self.codes.shape[1]

    def row(self, identity_id) -> Tensor:
        if not (0 <= identity_id < self.num_identities):
            raise DeformationError(
                f"identity {identity_id} out of range (L={self.num_identities})")
        return self.codes[identity_id]

    def mean_code(self):
        """Columnwise mean of trained codes; the init for unseen identities."""
        return self.codes.data.mean(axis=0).copy()

    def params(self, prefix="shape_table"):
        return {f"{prefix}.codes": self.codes}


class WeightVolumeDecoder:
    """Shape code -> canonical blend-weight volume.

    Dense layer to a coarse (R/4)^3 grid, two stride-2 transposed-conv
    upsampling stages, then softplus over conv output plus the fixed
    skeleton prior.
    """

    def __init__(self, code_dim, num_bones, resolution, aabb, skeleton,
                 rng=None, hidden_channels=(24, 16), prior_sigma=0.12):
        if resolution % 4 != 0:
            raise DeformationError("volume resolution must be a multiple of 4")
        rng = rng or np.random.default_rng(0)
        self.num_bones = num_bones
        self.resolution = resolution
        self.aabb = tuple(np.asarray(a, dtype=np.float64) for a in aabb)
        self.base = resolution // 4
        c1, c2 = hidden_channels
        self.c1 = c1
        self.w_lin = parameter(rng.normal(0, np.sqrt(2.0 / code_dim),
                                          size=(code_dim, c1 * self.base ** 3)))
        self.b_lin = parameter(np.zeros(c1 * self.base ** 3))
        self.w_t1 = parameter(rng.normal(0, np.sqrt(2.0 / (c1 * 64)),
                                         size=(c1, c2, 4, 4, 4)))
        self.b_t1 = parameter(np.zeros(c2))
        self.w_t2 = parameter(rng.normal(0, 0.01, size=(c2, num_bones, 4, 4, 4)))
        self.b_t2 = parameter(np.zeros(num_bones))
        self.prior = skeleton_prior(skeleton, self.aabb, resolution, sigma=prior_sigma)

    def decode(self, code: Tensor) -> CanonicalWeightVolume:
        h = F.matmul(code.reshape(1, -1), self.w_lin) + self.b_lin
        h = F.relu(h).reshape(1, self.c1, self.base, self.base, self.base)
        h = F.relu(F.conv3d_transpose(h, self.w_t1, self.b_t1, stride=2, padding=1))
        h = F.conv3d_transpose(h, self.w_t2, self.b_t2, stride=2, padding=1)
        raw = h.reshape(self.num_bones, self.resolution, self.resolution,
                        self.resolution) + self.prior
        return CanonicalWeightVolume(values=F.softplus(raw), aabb=self.aabb)

    def params(self, prefix="weight_decoder"):
        return {f"{prefix}.w_lin": self.w_lin, f"{prefix}.b_lin": self.b_lin,
                f"{prefix}.w_t1": self.w_t1, f"{prefix}.b_t1": self.b_t1,
                f"{prefix}.w_t2": self.w_t2, f"{prefix}.b_t2": self.b_t2}


def decode_weight_volume(table: ShapeCodeTable, identity_id,
                         decoder: WeightVolumeDecoder) -> CanonicalWeightVolume:
    return decoder.decode(table.row(identity_id))


def world_to_index(aabb, resolution, pts):
    """Continuous voxel-index coordinates for world points (node-centered grid)."""
    lo, hi = aabb
    if isinstance(pts, Tensor):
        return (pts - lo) * ((resolution - 1.0) / (hi - lo))
    return (np.asarray(pts) - lo) * ((resolution - 1.0) / (hi - lo))


def canonical_weights_at(volume: CanonicalWeightVolume, x_c) -> Tensor:
    """Trilinear K-channel sample at canonical points (P,3), clamp-to-edge."""
    idx = world_to_index(volume.aabb, volume.resolution, x_c)
    if not isinstance(idx, Tensor):
        idx = Tensor(idx, dtype=volume.values.dtype)
    return F.trilinear_sample(volume.values, idx)


def _transform_all_bones(M, x):
    """Apply K rigid maps to points (P,3) -> (K,P,3), numpy only."""
    x = np.asarray(x, dtype=np.float64)
    return np.einsum("kab,pb->kpa", M[:, :3, :3], x) + M[:, None, :3, 3]


def target_blend_weights(volume: CanonicalWeightVolume, x, M_trg2can):
    """Blend weights in the target space plus the foreground score.

    n_i = w^c_i(M_i x) sampled per bone; w = n / (sum + eps) renormalized to
    sum exactly 1 (softplus keeps the sum positive); fg = min(1, sum n).
    """
    y = _transform_all_bones(np.asarray(M_trg2can), x)  # (K,P,3)
    K = volume.num_bones
    cols = []
    for k in range(K):
        idx = world_to_index(volume.aabb, volume.resolution, y[k])
        cols.append(F.trilinear_sample(volume.values[k:k + 1], Tensor(idx)))
    n = F.concat(cols, axis=1)  # (P,K)
    s = F.sum(n, axis=1, keepdims=True)  # (P,1)
    fg = F.clamp(s.reshape(-1), hi=1.0)
    w = n / (s + EPS_DENOM)
    w = w / (F.sum(w, axis=1, keepdims=True) + 1e-20)
    return w, fg


def _blend_transformed(x, w, M):
    """sum_k w_k * (M_k x); w may be a Tensor or an array."""
    y = _transform_all_bones(np.asarray(M), x)  # (K,P,3)
    yT = np.transpose(y, (1, 0, 2))  # (P,K,3)
    if isinstance(w, Tensor):
        return F.sum(w.reshape(w.shape[0], w.shape[1], 1) * yT, axis=1)
    return (np.asarray(w)[:, :, None] * yT).sum(axis=1)


def to_canonical(x, w, M_trg2can):
    """Weighted blend of rigidly transformed points into canonical space."""
    return _blend_transformed(x, w, M_trg2can)


def to_source(x, w, M_trg2src):
    """Same contract as to_canonical, with source-directed transforms."""
    return _blend_transformed(x, w, M_trg2src)


def target_blend_weights_np(volume_values, aabb, x, M_trg2can):
    """Graph-free twin of target_blend_weights for gating decisions."""
    y = _transform_all_bones(np.asarray(M_trg2can), x)
    K, R = volume_values.shape[0], volume_values.shape[1]
    lo, hi = aabb
    n = np.empty((x.shape[0], K))
    for k in range(K):
        idx = (y[k] - lo) * ((R - 1.0) / (hi - lo))
        n[:, k] = _trilinear_np(volume_values[k], idx)
    s = n.sum(axis=1)
    fg = np.minimum(s, 1.0)
    w = n / (s[:, None] + EPS_DENOM)
    w /= w.sum(axis=1, keepdims=True)
    return w, fg


def _trilinear_np(vol, idx):
    dims = vol.shape
    c = [np.clip(idx[:, a], 0.0, dims[a] - 1.0) for a in range(3)]
    lo = [np.minimum(np.floor(ci).astype(np.int64), dims[a] - 2) if dims[a] > 1
          else np.zeros(len(ci), np.int64) for a, ci in enumerate(c)]
    f = [c[a] - lo[a] for a in range(3)]
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                out = out + vol[np.clip(lo[0] + dx, 0, dims[0] - 1),
                                np.clip(lo[1] + dy, 0, dims[1] - 1),
                                np.clip(lo[2] + dz, 0, dims[2] - 1)] * w
    return out


def pose_aabb(skeleton: Skeleton, pose: Pose, radius_pad=0.25, dilate=0.2):
    """Scene AABB: canonical bone segments rigidly moved to the pose, padded
    by a generous body radius and dilated (ray bounds are a declared choice)."""
    starts, ends = _bone_segments(skeleton)
    G_can = forward_kinematics(skeleton, Pose.identity(skeleton.num_joints))
    G_trg = forward_kinematics(skeleton, pose)
    pts = []
    for k in range(skeleton.num_joints):
        M = G_trg[k] @ np.linalg.inv(G_can[k])
        for p in (starts[k], ends[k]):
            pts.append(M[:3, :3] @ p + M[:3, 3])
    pts = np.asarray(pts)
    lo = pts.min(axis=0) - radius_pad
    hi = pts.max(axis=0) + radius_pad
    pad = dilate * (hi - lo).max() * 0.5
    return lo - pad, hi + pad
