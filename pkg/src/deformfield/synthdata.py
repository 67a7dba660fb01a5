"""Procedural articulated capsule-figures with an analytic oracle renderer.

Provides exact ground truth for the learned pipeline: unlit albedo renders
on a white background, oracle blend weights, and ring-camera multi-view /
multi-pose datasets written as PNG + JSON manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Camera, look_at_camera
from .skeleton import Pose, Skeleton, default_humanoid, forward_kinematics, \
    relative_transforms, transform_points

MANIFEST_VERSION = 1

# Base humanoid capsules: (bone, endpoint_a, endpoint_b, radius) in canonical space.
BASE_CAPSULES = [
    (0, (0.00, 0.88, 0.00), (0.00, 1.02, 0.00), 0.120),  # pelvis
    (1, (0.00, 1.05, 0.00), (0.00, 1.42, 0.00), 0.130),  # torso
    (2, (0.00, 1.48, 0.00), (0.00, 1.60, 0.00), 0.090),  # head
    (3, (0.18, 1.40, 0.00), (0.45, 1.40, 0.00), 0.048),  # left upper arm
    (4, (0.45, 1.40, 0.00), (0.70, 1.40, 0.00), 0.042),  # left lower arm
    (5, (-0.18, 1.40, 0.00), (-0.45, 1.40, 0.00), 0.048),  # right upper arm
    (6, (-0.45, 1.40, 0.00), (-0.70, 1.40, 0.00), 0.042),  # right lower arm
    (7, (0.10, 0.90, 0.00), (0.10, 0.06, 0.00), 0.062),  # left leg
    (8, (-0.10, 0.90, 0.00), (-0.10, 0.06, 0.00), 0.062),  # right leg
]


@dataclass
class Capsule:
    bone: int
    a: np.ndarray
    b: np.ndarray
    radius: float
    albedo: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(3)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must be in [0,1]")


@dataclass
class FigureSpec:
    identity: int
    seed: int
    capsules: list  # list[Capsule]

    def posed_capsules(self, skeleton: Skeleton, pose: Pose):
        """Capsule endpoints rigidly attached to their bones, in pose space."""
        M = relative_transforms(Pose.identity(skeleton.num_joints), pose, skeleton)
        out = []
        for c in self.capsules:
            out.append((transform_points(M[c.bone], c.a),
                        transform_points(M[c.bone], c.b), c.radius, c.albedo, c.bone))
        return out

    def to_dict(self):
        return {
            "identity": self.identity,
            "seed": self.seed,
            "capsules": [{"bone": c.bone, "a": c.a.tolist(), "b": c.b.tolist(),
                          "radius": c.radius, "albedo": c.albedo.tolist()}
                         for c in self.capsules],
        }

    @classmethod
    def from_dict(cls, d):
        caps = [Capsule(c["bone"], c["a"], c["b"], c["radius"], c["albedo"])
                for c in d["capsules"]]
        return cls(identity=d["identity"], seed=d["seed"], capsules=caps)


@dataclass
class SceneSample:
    image: np.ndarray  # (H,W,3) in [0,1]
    mask: np.ndarray  # (H,W) in {0,1}
    camera: Camera
    pose: Pose
    identity: int
    split: str = "train"


@dataclass
class SampleRecord:
    image_path: str
    mask_path: str
    camera: Camera
    pose: Pose
    split: str


@dataclass
class IdentityRecord:
    identity: int
    figure: FigureSpec
    samples: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: str
    seed: int
    identities: list = field(default_factory=list)

    def load_sample(self, identity_idx, sample_idx) -> SceneSample:
        rec = self.identities[identity_idx]
        s = rec.samples[sample_idx]
        img = np.asarray(Image.open(os.path.join(self.root, s.image_path)),
                         dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(os.path.join(self.root, s.mask_path)),
                          dtype=np.float64) / 255.0
        return SceneSample(img, (mask > 0.5).astype(np.float64), s.camera, s.pose,
                           rec.identity, s.split)


def make_figure(seed, scale=1.0, jitter=0.3, identity=None) -> FigureSpec:
    """Deterministic per-identity figure: base capsules with limb radius and
    length jitter within +-``jitter`` and a seeded albedo palette.

    ``jitter=0`` with ``scale=1`` reproduces the base humanoid exactly.
    Palette channels stay <= 0.95 so the mask is recoverable from white.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    caps = []
    for bone, a, b, r in BASE_CAPSULES:
        rf = 1.0 + rng.uniform(-jitter, jitter)
        lf = 1.0 + rng.uniform(-jitter, jitter)
        a = np.asarray(a)
        b = a + (np.asarray(b) - a) * lf
        albedo = rng.uniform(0.05, 0.95, size=3)
        caps.append(Capsule(bone, a * 1.0, b, r * rf * scale, albedo))
    return FigureSpec(identity=seed if identity is None else identity,
                      seed=seed, capsules=caps)


def _intersect_capsule(o, dirs, a, b, r):
    """Nearest positive hit t of rays (o, dirs (N,3)) with one capsule; inf on miss."""
    t_best = np.full(dirs.shape[0], np.inf)
    ba = b - a
    baba = float(ba @ ba)
    if baba > 1e-16:
        oa = o - a
        bard = dirs @ ba
        baoa = float(oa @ ba)
        rdoa = dirs @ oa
        oaoa = float(oa @ oa)
        A = baba - bard * bard
        B = baba * rdoa - baoa * bard
        C = baba * oaoa - baoa * baoa - r * r * baba
        h = B * B - A * C
        ok = (h >= 0) & (np.abs(A) > 1e-14)
        t = np.full_like(t_best, np.inf)
        sq = np.sqrt(np.where(ok, h, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cand = (-B - sq) / A
        y = baoa + t_cand * bard
        body = ok & (t_cand > 1e-6) & (y >= 0.0) & (y <= baba)
        t[body] = t_cand[body]
        t_best = np.minimum(t_best, t)
    for c in (a, b):
        oc = o - c
        Bc = dirs @ oc
        Cc = float(oc @ oc) - r * r
        disc = Bc * Bc - Cc
        ok = disc >= 0
        t_cand = -Bc - np.sqrt(np.where(ok, disc, 0.0))
        hit = ok & (t_cand > 1e-6)
        t = np.where(hit, t_cand, np.inf)
        t_best = np.minimum(t_best, t)
        if baba <= 1e-16:
            break
    return t_best


def render_oracle(figure: FigureSpec, pose: Pose, camera: Camera,
                  skeleton: Skeleton = None, supersample=False) -> SceneSample:
    """Analytic unlit render: nearest capsule hit wins, white background.

    One ray per pixel center; ``supersample`` averages a 2x2 grid per pixel.
    """
    skeleton = skeleton or default_humanoid()
    if supersample:
        cam2 = Camera(camera.fx * 2, camera.fy * 2, camera.cx * 2, camera.cy * 2,
                      camera.width * 2, camera.height * 2,
                      camera.rotation, camera.translation)
        hi = render_oracle(figure, pose, cam2, skeleton, supersample=False)
        H, W = camera.height, camera.width
        img = hi.image.reshape(H, 2, W, 2, 3).mean(axis=(1, 3))
        mask = (hi.mask.reshape(H, 2, W, 2).mean(axis=(1, 3)) >= 0.5).astype(np.float64)
        return SceneSample(img, mask, camera, pose, figure.identity)

    H, W = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    u = (ii + 0.5).ravel()
    v = (jj + 0.5).ravel()
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy, np.ones_like(u)], axis=1)
    dirs = d_cam @ camera.rotation
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = camera.center

    t_best = np.full(H * W, np.inf)
    color = np.ones((H * W, 3))
    for (a, b, r, albedo, _) in figure.posed_capsules(skeleton, pose):
        t = _intersect_capsule(origin, dirs, a, b, r)
        closer = t < t_best
        t_best[closer] = t[closer]
        color[closer] = albedo
    mask = np.isfinite(t_best).astype(np.float64)
    return SceneSample(color.reshape(H, W, 3), mask.reshape(H, W),
                       camera, pose, figure.identity)


def _segment_distance(x, a, b):
    """Distance from points x (P,3) to segment ab."""
    ba = b - a
    denom = float(ba @ ba)
    if denom < 1e-16:
        return np.linalg.norm(x - a, axis=1)
    t = np.clip(((x - a) @ ba) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ba
    return np.linalg.norm(x - proj, axis=1)


def oracle_blend_weights(figure: FigureSpec, x, pose: Pose,
                         skeleton: Skeleton = None, sigma=0.05):
    """Ground-truth blend weights over the skeleton's K bones.

    w_k proportional to exp(-d_k^2 / sigma^2) where d_k is the signed distance
    to bone k's posed capsule surface (negative inside); rows sum to 1.
    Bones without a capsule get weight 0.
    """
    skeleton = skeleton or default_humanoid()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    K = skeleton.num_joints
    logw = np.full((x.shape[0], K), -np.inf)
    for (a, b, r, _, bone) in figure.posed_capsules(skeleton, pose):
        d = _segment_distance(x, a, b) - r
        cand = -(d * d) / (sigma * sigma)
        logw[:, bone] = np.logaddexp(logw[:, bone], cand)
    m = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - m)
    return w / w.sum(axis=1, keepdims=True)


def figure_aabb(figure: FigureSpec, pose: Pose, skeleton: Skeleton = None, dilate=0.2):
    """AABB of the posed capsules, dilated by ``dilate`` of its diagonal extent."""
    skeleton = skeleton or default_humanoid()
    pts = []
    rs = []
    for (a, b, r, _, _) in figure.posed_capsules(skeleton, pose):
        pts += [a, b]
        rs += [r, r]
    pts = np.asarray(pts)
    rs = np.asarray(rs)[:, None]
    lo = (pts - rs).min(axis=0)
    hi = (pts + rs).max(axis=0)
    pad = dilate * (hi - lo).max() * 0.5
    return lo - pad, hi + pad


@dataclass
class SynthConfig:
    num_identities: int = 1
    num_views: int = 4
    num_poses: int = 1
    image_size: int = 64
    seed: int = 0
    ring_radius: float = 2.2
    look_at_height: float = 0.85
    max_angle_deg: float = 45.0
    focal_scale: float = 1.15  # focal length = focal_scale * image_size
    canonical_first_pose: bool = True
    jitter: float = 0.3
    test_views: tuple = ()

    def __post_init__(self):
        if min(self.num_identities, self.num_views, self.num_poses,
               self.image_size) < 1:
            raise ValueError("counts and image size must be >= 1")


def ring_camera(view_idx, num_views, cfg: SynthConfig) -> Camera:
    angle = 2.0 * np.pi * view_idx / num_views
    eye = np.array([cfg.ring_radius * np.sin(angle), cfg.look_at_height + 0.1,
                    cfg.ring_radius * np.cos(angle)])
    target = np.array([0.0, cfg.look_at_height, 0.0])
    f = cfg.focal_scale * cfg.image_size
    c = cfg.image_size / 2.0
    return look_at_camera(eye, target, np.array([0.0, 1.0, 0.0]),
                          f, f, c, c, cfg.image_size, cfg.image_size)


def sample_pose(rng, skeleton: Skeleton, max_angle_deg) -> Pose:
    max_rad = np.deg2rad(max_angle_deg)
    rot = rng.uniform(-max_rad, max_rad, size=(skeleton.num_joints, 3)) / np.sqrt(3.0)
    return Pose(np.zeros(3), rot)


def save_png(path, arr, grayscale=False):
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L" if grayscale else "RGB").save(path)


def _camera_dict(cam: Camera):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "rotation": cam.rotation.reshape(-1).tolist(),
            "translation": cam.translation.tolist()}


def _camera_from_dict(d):
    return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                  np.asarray(d["rotation"]).reshape(3, 3), np.asarray(d["translation"]))


def generate_dataset(cfg: SynthConfig, out_dir, skeleton: Skeleton = None) -> DatasetManifest:
    """Render all (identity, view, pose) combinations and write the manifest."""
    skeleton = skeleton or default_humanoid()
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    manifest = DatasetManifest(root=out_dir, seed=cfg.seed)
    for i in range(cfg.num_identities):
        fig_seed = int(rng.integers(0, 2 ** 31 - 1))
        figure = make_figure(fig_seed, jitter=cfg.jitter, identity=i)
        rec = IdentityRecord(identity=i, figure=figure)
        poses = []
        for p in range(cfg.num_poses):
            if p == 0 and cfg.canonical_first_pose:
                poses.append(Pose.identity(skeleton.num_joints))
            else:
                poses.append(sample_pose(rng, skeleton, cfg.max_angle_deg))
        for p, pose in enumerate(poses):
            for v in range(cfg.num_views):
                cam = ring_camera(v, cfg.num_views, cfg)
                sample = render_oracle(figure, pose, cam, skeleton)
                stem = f"id{i:03d}_p{p:03d}_v{v:03d}"
                img_path = f"{stem}.png"
                mask_path = f"{stem}_mask.png"
                save_png(os.path.join(out_dir, img_path), sample.image)
                save_png(os.path.join(out_dir, mask_path), sample.mask, grayscale=True)
                split = "test" if v in cfg.test_views else "train"
                rec.samples.append(SampleRecord(img_path, mask_path, cam, pose, split))
        manifest.identities.append(rec)

    doc = {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "num_joints": skeleton.num_joints,
        "identities": [{
            "id": rec.identity,
            "figure_params": rec.figure.to_dict(),
            "samples": [{
                "image_path": s.image_path,
                "mask_path": s.mask_path,
                "camera": _camera_dict(s.camera),
                "pose": {"root": s.pose.root_translation.tolist(),
                         "rotations": s.pose.joint_rotation.tolist()},
                "split": s.split,
            } for s in rec.samples],
        } for rec in manifest.identities],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1)
    return manifest


def load_manifest(path) -> DatasetManifest:
    root = path if os.path.isdir(path) else os.path.dirname(path)
    mpath = os.path.join(root, "manifest.json")
    with open(mpath) as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')}")
    manifest = DatasetManifest(root=root, seed=doc["seed"])
    for rec in doc["identities"]:
        figure = FigureSpec.from_dict(rec["figure_params"])
        irec = IdentityRecord(identity=rec["id"], figure=figure)
        for s in rec["samples"]:
            pose = Pose(np.asarray(s["pose"]["root"]), np.asarray(s["pose"]["rotations"]))
            irec.samples.append(SampleRecord(s["image_path"], s["mask_path"],
                                             _camera_from_dict(s["camera"]), pose,
                                             s["split"]))
        manifest.identities.append(irec)
    return manifest
