"""Losses, Adam optimization, the patch-based training loop, and the
binary checkpoint container."""

from __future__ import annotations

import io
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import F, Tensor, no_grad, parameter
from .model import Model, ModelConfig
from .renderer import render, render_rays
from .deformation import pose_aabb
from .geometry import generate_rays

CHECKPOINT_MAGIC = b"DFWC"
CHECKPOINT_VERSION = 1

ALPHA_CLAMP = 1e-5


class TrainingError(Exception):
    pass


@dataclass
class LossWeights:
    rec: float = 0.2
    opacity: float = 0.01

    def __post_init__(self):
        if self.rec < 0 or self.opacity < 0:
            raise TrainingError("loss weights must be nonnegative")


# -- losses --------------------------------------------------------------


def loss_reconstruction(rendered, target):
    """Mean over rays of squared L2 color distance."""
    if rendered.shape != np.asarray(target).shape:
        raise TrainingError(f"shape mismatch {rendered.shape} vs {np.asarray(target).shape}")
    diff = rendered - np.asarray(target)
    return F.mean(F.sum(diff * diff, axis=-1))


class PerceptualFilterBank:
    """Fixed seeded 3x3 conv over RGB (16 channels) + relu: a frozen stand-in
    for a pretrained shallow feature extractor. Never trained."""

    def __init__(self, seed=0, channels=16):
        self.seed = seed
        self.channels = channels
        rng = np.random.default_rng(seed)
        w = rng.normal(0, 1.0, size=(channels, 3, 3, 3))
        w -= w.mean(axis=(1, 2, 3), keepdims=True)  # zero-mean taps: edge-like
        self.weight = w / np.sqrt((w ** 2).sum(axis=(1, 2, 3), keepdims=True))
        self.bias = np.zeros(channels)

    def response(self, patch):
        """patch: (h,w,3) Tensor or array -> (channels, h, w) Tensor."""
        if not isinstance(patch, Tensor):
            patch = Tensor(np.asarray(patch))
        x = patch.transpose(2, 0, 1).reshape(1, 3, patch.shape[0], patch.shape[1])
        out = F.relu(F.conv2d(x, Tensor(self.weight), Tensor(self.bias), padding=1))
        return out.reshape(out.shape[1], out.shape[2], out.shape[3])


def loss_perceptual(rendered_patches, target_patches, bank: PerceptualFilterBank):
    """Sum over patches of mean squared filter-response distance."""
    if len(rendered_patches) != len(target_patches) or not rendered_patches:
        raise TrainingError("patch count mismatch or empty")
    total = None
    for rp, tp in zip(rendered_patches, target_patches):
        d = bank.response(rp) - bank.response(tp)
        term = F.mean(d * d)
        total = term if total is None else total + term
    return total


def loss_opacity(alphas):
    """Binarization prior: mean of log(a) + log(1-a) with a clamped into
    [1e-5, 1-1e-5] to keep the objective bounded."""
    a = F.clamp(alphas, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    return F.mean(F.log(a) + F.log(1.0 - a))


def loss_total(l_perc, l_rec, l_opac, weights: LossWeights):
    return l_perc + weights.rec * l_rec + weights.opacity * l_opac


# -- Adam ----------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction and per-parameter-group rates."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 group_lr=None):
        """``params``: dict name -> Tensor. ``group_lr``: dict name -> lr
        overriding the default for specific parameters."""
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.group_lr = dict(group_lr or {})
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            if g.shape != t.data.shape:
                raise TrainingError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.group_lr.get(name, self.lr)
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self):
        return {"step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for k in self.m:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()


# -- checkpoint container ------------------------------------------------


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors, config, step=0, optimizer_state=None, extra=None):
    """Single binary container: magic, version, JSON header with a tensor
    directory, then raw little-endian payloads."""
    names = list(tensors.keys())
    directory = []
    offset = 0
    payloads = []
    items = [(n, tensors[n].data if isinstance(tensors[n], Tensor) else np.asarray(tensors[n]))
             for n in names]
    opt_items = []
    if optimizer_state is not None:
        for kind in ("m", "v"):
            for k, arr in optimizer_state[kind].items():
                opt_items.append((f"__opt__.{kind}.{k}", arr))
        items += opt_items
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        directory.append({"name": name, "shape": list(arr.shape),
                          "dtype": str(arr.dtype), "offset": offset,
                          "nbytes": arr.nbytes})
        payloads.append(arr)
        offset += arr.nbytes
    header = {
        "config": config,
        "step": step,
        "tensors": directory,
        "optimizer_step": None if optimizer_state is None else optimizer_state["step"],
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for arr in payloads:
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    """-> (tensors dict name->ndarray, config dict, step, optimizer_state|None, extra)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
    except Exception as e:
        raise CheckpointError(f"corrupt header: {e}")
    base = 12 + hlen
    tensors = {}
    opt_m = {}
    opt_v = {}
    for ent in header["tensors"]:
        start = base + ent["offset"]
        end = start + ent["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"truncated payload for {ent['name']}")
        arr = np.frombuffer(blob[start:end],
                            dtype=np.dtype(ent["dtype"]).newbyteorder("<"))
        arr = arr.reshape(ent["shape"]).astype(ent["dtype"])
        name = ent["name"]
        if name.startswith("__opt__.m."):
            opt_m[name[len("__opt__.m."):]] = arr
        elif name.startswith("__opt__.v."):
            opt_v[name[len("__opt__.v."):]] = arr
        else:
            tensors[name] = arr
    opt_state = None
    if header.get("optimizer_step") is not None:
        opt_state = {"step": header["optimizer_step"], "m": opt_m, "v": opt_v}
    return tensors, header["config"], header["step"], opt_state, header.get("extra", {})


def save_model(path, model: Model, step=0, optimizer: Adam = None, extra=None):
    save_checkpoint(path, model.params(), {"model": model.config.to_dict()},
                    step=step,
                    optimizer_state=optimizer.state_dict() if optimizer else None,
                    extra=extra)


def load_model(path):
    """-> (Model with restored parameters, step, optimizer_state, extra)."""
    tensors, config, step, opt_state, extra = load_checkpoint(path)
    model = Model(ModelConfig.from_dict(config["model"]))
    params = model.params()
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:4]}")
    for name, t in params.items():
        if tuple(tensors[name].shape) != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        t.data = tensors[name].astype(t.data.dtype)
    return model, step, opt_state, extra


# -- training loop -------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 5e-4
    decoder_lr: float = 5e-5
    betas: tuple = (0.9, 0.999)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    patches_per_step: int = 4
    patch_size: int = 16
    samples_per_ray: int = 64
    max_sources: int = 3
    fg_bias: float = 0.5  # fraction of patch centers forced onto the mask
    fg_gate: float = 1e-3
    seed: int = 0
    log_every: int = 25
    eval_every: int = 0  # 0 disables periodic holdout PSNR
    perceptual_seed: int = 0
    use_perceptual: bool = True


def _pick_patch(rng, mask, patch, fg_biased):
    H, W = mask.shape
    if fg_biased:
        ys, xs = np.nonzero(mask > 0.5)
        if len(ys):
            i = rng.integers(len(ys))
            cy, cx = ys[i], xs[i]
            y0 = int(np.clip(cy - patch // 2, 0, H - patch))
            x0 = int(np.clip(cx - patch // 2, 0, W - patch))
            return y0, x0
    return int(rng.integers(0, H - patch + 1)), int(rng.integers(0, W - patch + 1))


def train_step(model: Model, manifest, opt: Adam, cfg: TrainConfig, rng,
               bank: PerceptualFilterBank, train_index):
    """One optimization step; returns a dict of loss parts."""
    ident_idx, samples = train_index[rng.integers(len(train_index))]
    tgt_i = int(rng.integers(len(samples)))
    others = [s for j, s in enumerate(samples) if j != tgt_i]
    n_src = int(rng.integers(1, min(cfg.max_sources, len(others)) + 1))
    src_idx = rng.choice(len(others), size=n_src, replace=False)

    target = manifest.load_sample(ident_idx, samples[tgt_i])
    sources = [manifest.load_sample(ident_idx, others[j]) for j in src_idx]
    identity_id = manifest.identities[ident_idx].identity

    code = model.shape_table.row(identity_id)
    volume = model.decode_volume(code)
    M_trg2can = model.transforms_to_canonical(target.pose)
    src_views = [model.make_source_view(s, target.pose) for s in sources]
    aabb = pose_aabb(model.skeleton, target.pose)

    rendered_patches = []
    target_patches = []
    alphas = []
    rec_terms = []
    ps = cfg.patch_size
    for p in range(cfg.patches_per_step):
        biased = rng.uniform() < cfg.fg_bias
        y0, x0 = _pick_patch(rng, target.mask, ps, biased)
        jj, ii = np.meshgrid(np.arange(y0, y0 + ps), np.arange(x0, x0 + ps),
                             indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
        rays = generate_rays(target.camera, pixels, aabb)
        colors, aux = render_rays(model, volume, M_trg2can, src_views, rays,
                                  cfg.samples_per_ray, rng=rng, fg_gate=cfg.fg_gate)
        gt = target.image[y0:y0 + ps, x0:x0 + ps].reshape(-1, 3)
        rec_terms.append(loss_reconstruction(colors, gt))
        rendered_patches.append(colors.reshape(ps, ps, 3))
        target_patches.append(target.image[y0:y0 + ps, x0:x0 + ps])
        if aux["alphas"] is not None:
            alphas.append(aux["alphas"].reshape(-1))

    l_rec = rec_terms[0]
    for t in rec_terms[1:]:
        l_rec = l_rec + t
    l_rec = l_rec * (1.0 / len(rec_terms))
    l_opac = loss_opacity(F.concat(alphas, axis=0)) if alphas else Tensor(np.zeros(()))
    if cfg.use_perceptual:
        l_perc = loss_perceptual(rendered_patches, target_patches, bank)
    else:
        l_perc = Tensor(np.zeros(()))
    total = loss_total(l_perc, l_rec, l_opac, cfg.loss_weights)

    if not np.isfinite(total.data):
        raise TrainingError(
            f"non-finite loss (rec={float(l_rec.data)}, perc={float(l_perc.data)}, "
            f"opac={float(l_opac.data)}) for identity {identity_id}")

    opt.zero_grad()
    total.backward()
    opt.step()
    return {"l_rec": float(l_rec.data), "l_perc": float(l_perc.data),
            "l_opacity": float(l_opac.data), "l_total": float(total.data)}


def holdout_psnr(model: Model, manifest, entries, samples_per_ray, fg_gate,
                 max_sources=3):
    """Mean PSNR over (identity_idx, target_sample_idx, source_sample_idxs)."""
    from .inference import psnr
    vals = []
    for ident_idx, tgt_idx, src_idxs in entries:
        target = manifest.load_sample(ident_idx, tgt_idx)
        sources = [manifest.load_sample(ident_idx, j) for j in src_idxs[:max_sources]]
        identity_id = manifest.identities[ident_idx].identity
        code = model.shape_table.row(identity_id)
        img = render(model, code, target.camera, target.pose, sources,
                     samples_per_ray=samples_per_ray, fg_gate=fg_gate)
        vals.append(psnr(img, target.image))
    return float(np.mean(vals))


def train(model: Model, manifest, cfg: TrainConfig, log_path=None,
          holdout_entries=None, psnr_target=None):
    """Patch-based training over all train-split samples in the manifest.

    Per step: one identity, one target sample, 1..max_sources distinct
    source samples of the same identity, foreground-biased patches, Adam.
    Returns (optimizer, list of per-step metric dicts). ``psnr_target``
    enables early stop once the periodic holdout PSNR reaches it.
    """
    train_index = []
    for ii, rec in enumerate(manifest.identities):
        idxs = [j for j, s in enumerate(rec.samples) if s.split == "train"]
        if len(idxs) >= 2:
            train_index.append((ii, idxs))
    if not train_index:
        raise TrainingError("manifest has no identity with >= 2 training samples")

    rng = np.random.default_rng(cfg.seed)
    bank = PerceptualFilterBank(cfg.perceptual_seed)
    group_lr = {name: cfg.decoder_lr for name in model.decoder_param_names()}
    opt = Adam(model.params(), lr=cfg.lr, betas=cfg.betas, group_lr=group_lr)

    logs = []
    log_file = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        for step in range(1, cfg.steps + 1):
            metrics = train_step(model, manifest, opt, cfg, rng, bank, train_index)
            metrics["step"] = step
            if cfg.eval_every and holdout_entries and step % cfg.eval_every == 0:
                metrics["psnr_holdout"] = holdout_psnr(
                    model, manifest, holdout_entries, cfg.samples_per_ray, cfg.fg_gate)
            logs.append(metrics)
            if log_file and (step % cfg.log_every == 0 or step == cfg.steps):
                log_file.write(json.dumps(metrics) + "\n")
                log_file.flush()
            if psnr_target is not None and metrics.get("psnr_holdout", -1) >= psnr_target:
                break
    finally:
        if log_file:
            log_file.close()
    return opt, logs
