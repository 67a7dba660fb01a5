"""Bundles all learnable components with their configuration and exposes the
per-point field evaluation used by the renderer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import F, Tensor
from .deformation import (
    CanonicalWeightVolume,
    ShapeCodeTable,
    WeightVolumeDecoder,
    canonical_aabb,
    target_blend_weights,
    target_blend_weights_np,
    to_canonical,
)
from .encoder import ImageEncoder, SourceView, source_condition
from .fields import CanonicalFeatureGrid, ImplicitHeads, evaluate_field
from .skeleton import Pose, Skeleton, default_humanoid, relative_transforms


@dataclass
class ModelConfig:
    num_identities: int = 1
    code_dim: int = 32
    weight_volume_resolution: int = 32
    feature_channels: int = 16
    feature_resolution: int = 32
    encoder_widths: tuple = (16, 32, 64)
    embed_dim: int = 32
    inter_dim: int = 32
    head_hidden: int = 64
    posenc_octaves: int = 6
    decoder_channels: tuple = (24, 16)
    prior_sigma: float = 0.12
    canonical_pad: float = 0.35
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


class Model:
    """Shape-code table + weight-volume decoder + feature grid + image
    encoder + implicit heads over a fixed skeleton."""

    def __init__(self, config: ModelConfig, skeleton: Skeleton = None):
        self.config = config
        self.skeleton = skeleton or default_humanoid()
        self.aabb = canonical_aabb(self.skeleton, pad=config.canonical_pad)
        rng = np.random.default_rng(config.seed)
        self.shape_table = ShapeCodeTable(config.num_identities, config.code_dim, rng)
        self.decoder = WeightVolumeDecoder(
            config.code_dim, self.skeleton.num_joints,
            config.weight_volume_resolution, self.aabb, self.skeleton, rng,
            hidden_channels=config.decoder_channels, prior_sigma=config.prior_sigma)
        self.grid = CanonicalFeatureGrid(self.aabb, config.feature_channels,
                                         config.feature_resolution, rng)
        self.encoder = ImageEncoder(rng, widths=config.encoder_widths)
        self.heads = ImplicitHeads(self.encoder.out_channels,
                                   config.feature_channels, rng,
                                   embed_dim=config.embed_dim,
                                   inter_dim=config.inter_dim,
                                   hidden=config.head_hidden,
                                   posenc_octaves=config.posenc_octaves)

    # -- parameters ----------------------------------------------------------

    def params(self):
        out = {}
        out.update(self.shape_table.params())
        out.update(self.decoder.params())
        out.update(self.grid.params())
        out.update(self.encoder.params())
        out.update(self.heads.params())
        return out

    def decoder_param_names(self):
        return set(self.decoder.params().keys())

    def canonical_pose(self) -> Pose:
        return Pose.identity(self.skeleton.num_joints)

    # -- pose machinery ------------------------------------------------------

    def transforms_to_canonical(self, target_pose: Pose):
        return relative_transforms(target_pose, self.canonical_pose(), self.skeleton)

    def transforms_to_source(self, target_pose: Pose, source_pose: Pose):
        return relative_transforms(target_pose, source_pose, self.skeleton)

    def make_source_view(self, sample, target_pose: Pose) -> SourceView:
        fmap = self.encoder.encode(sample.image, sample.camera)
        return SourceView(camera=sample.camera, image=sample.image, fmap=fmap,
                          M_trg2src=self.transforms_to_source(target_pose, sample.pose))

    def decode_volume(self, code: Tensor) -> CanonicalWeightVolume:
        return self.decoder.decode(code)

    # -- field evaluation ----------------------------------------------------

    def eval_points(self, x, volume: CanonicalWeightVolume, M_trg2can, sources):
        """Occupancy and color at target-space points x (P,3).

        Returns (alpha (P,), color (P,3), FieldOutput).
        """
        w, fg = target_blend_weights(volume, x, M_trg2can)
        x_c = to_canonical(x, w, M_trg2can)
        conds = source_condition(x, w, sources)
        out = evaluate_field(self.heads, self.grid, x_c, fg, conds)
        return out.alpha, out.color, out

    def foreground_score_np(self, x, volume: CanonicalWeightVolume, M_trg2can):
        """Graph-free fg used for empty-space gating."""
        _, fg = target_blend_weights_np(volume.values.data, volume.aabb, x, M_trg2can)
        return fg
