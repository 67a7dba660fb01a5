"""The implicit network: canonical voxel-aligned features, per-view embedding
(G1), mean-pooled aggregation with occupancy + intermediate color (G2), and
softmax blending of sampled source colors with the predicted color (G3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import F, Tensor, parameter
from .deformation import world_to_index
from .nn import MLP

POSENC_OCTAVES = 6


class FieldError(Exception):
    pass


class CanonicalFeatureGrid:
    """Learnable dense feature grid over the canonical AABB."""

    def __init__(self, aabb, channels=16, resolution=32, rng=None, init_scale=0.05):
        rng = rng or np.random.default_rng(0)
        self.aabb = tuple(np.asarray(a, dtype=np.float64) for a in aabb)
        self.values = parameter(rng.normal(0, init_scale,
                                           size=(channels, resolution, resolution,
                                                 resolution)))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def resolution(self):
        return self.values.shape[1]

    def params(self, prefix="feature_grid"):
        return {f"{prefix}.values": self.values}


def voxel_feature(grid: CanonicalFeatureGrid, x_c) -> Tensor:
    """Trilinear sample of the learnable grid at canonical points (P,3)."""
    idx = world_to_index(grid.aabb, grid.resolution, x_c)
    if not isinstance(idx, Tensor):
        idx = Tensor(np.asarray(idx))
    return F.trilinear_sample(grid.values, idx)


def positional_encoding(x_c, aabb, octaves=POSENC_OCTAVES) -> Tensor:
    """sin/cos features at ``octaves`` dyadic frequencies of x_c normalized
    into [-1, 1] over the canonical AABB."""
    lo, hi = (np.asarray(a, dtype=np.float64) for a in aabb)
    if not isinstance(x_c, Tensor):
        x_c = Tensor(np.asarray(x_c))
    xn = (x_c - lo) * (2.0 / (hi - lo)) - 1.0
    parts = []
    for o in range(octaves):
        freq = (2.0 ** o) * np.pi
        parts.append(F.sin(xn * freq))
        parts.append(F.cos(xn * freq))
    return F.concat(parts, axis=1)


@dataclass
class FieldOutput:
    alpha: Tensor  # (P,)
    color: Tensor  # (P,3)
    gammas: Tensor  # (P,N+1) softmax-normalized, last column is gamma'
    color_pred: Tensor  # (P,3) the network's own color c'
    fg: Tensor  # (P,)


class ImplicitHeads:
    """G1 (per-view embedding), G2 (aggregation: occupancy + intermediate +
    color branch), G3 (per-source blending logits)."""

    def __init__(self, feature_dim, voxel_channels, rng=None, embed_dim=32,
                 inter_dim=32, hidden=64, posenc_octaves=POSENC_OCTAVES):
        rng = rng or np.random.default_rng(0)
        self.embed_dim = embed_dim
        self.inter_dim = inter_dim
        self.posenc_octaves = posenc_octaves
        pe_dim = 6 * posenc_octaves
        self.g1 = MLP([feature_dim, hidden, hidden, embed_dim], rng)
        self.g2_trunk = MLP([voxel_channels + pe_dim + embed_dim, hidden, hidden,
                             1 + inter_dim], rng)
        self.g2_color = MLP([inter_dim, inter_dim, 3], rng)
        self.g3 = MLP([inter_dim + embed_dim, inter_dim, 1], rng)

    def params(self, prefix="heads"):
        out = {}
        out.update(self.g1.params(f"{prefix}.g1"))
        out.update(self.g2_trunk.params(f"{prefix}.g2_trunk"))
        out.update(self.g2_color.params(f"{prefix}.g2_color"))
        out.update(self.g3.params(f"{prefix}.g3"))
        return out

    def embed_views(self, features):
        """Apply G1 independently per view; input list of (P,C) tensors."""
        if not features:
            raise FieldError("embed_views needs at least one view")
        return [self.g1(f) for f in features]

    def aggregate(self, voxel_feat, posenc, mean_embed, fg):
        """G2: occupancy gated by fg, plus intermediate feature and c'."""
        h = self.g2_trunk(F.concat([voxel_feat, posenc, mean_embed], axis=1))
        logit = h[:, 0]
        inter = h[:, 1:]
        alpha = fg * F.sigmoid(logit)
        color_pred = F.sigmoid(self.g2_color(inter))
        return alpha, inter, color_pred

    def blend_color(self, inter, embeds, rgbs, mean_embed, color_pred):
        """G3 logits per source plus one for c'; softmax-convex combination."""
        logits = [self.g3(F.concat([inter, e], axis=1)) for e in embeds]
        logits.append(self.g3(F.concat([inter, mean_embed], axis=1)))
        gammas = F.softmax(F.concat(logits, axis=1), axis=1)  # (P,N+1)
        color = gammas[:, len(embeds):len(embeds) + 1] * color_pred
        for n, rgb in enumerate(rgbs):
            color = color + gammas[:, n:n + 1] * rgb
        return color, gammas


def evaluate_field(heads: ImplicitHeads, grid: CanonicalFeatureGrid, x_c, fg,
                   conditions) -> FieldOutput:
    """Full per-point head evaluation given deformation outputs and
    per-source (feature, rgb) conditioning."""
    feats = [c[0] for c in conditions]
    rgbs = [c[1] for c in conditions]
    embeds = heads.embed_views(feats)
    mean_embed = F.mean_pool(embeds)
    vf = voxel_feature(grid, x_c)
    pe = positional_encoding(x_c, grid.aabb, heads.posenc_octaves)
    alpha, inter, color_pred = heads.aggregate(vf, pe, mean_embed, fg)
    color, gammas = heads.blend_color(inter, embeds, rgbs, mean_embed, color_pred)
    return FieldOutput(alpha=alpha, color=color, gammas=gammas,
                       color_pred=color_pred, fg=fg)
