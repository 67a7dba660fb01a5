"""Command-line surface: dataset generation, training, rendering,
animation, shape-code fitting, evaluation and the gradient-check suite."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="override run seed")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fixed-seed execution")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default: DEFORMFIELD_THREADS or all cores)")
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")


def _apply_common(args):
    from .autodiff import set_precision
    from .config import ConfigError, load_run_config

    overrides = []
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        overrides.append((k.strip(), v.strip()))
    cfg = load_run_config(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    if args.deterministic:
        cfg.deterministic = True
        cfg.threads = 1
    if args.threads is not None:
        cfg.threads = args.threads
    elif cfg.threads == 0:
        cfg.threads = int(os.environ.get("DEFORMFIELD_THREADS", "0"))

    set_precision(cfg.precision)
    if cfg.threads > 0:
        _limit_threads(cfg.threads)
    return cfg


def _limit_threads(n):
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_model(path):
    from .training import load_model
    return load_model(path)


def _sources_from_manifest(manifest, ident_idx, source_idxs):
    return [manifest.load_sample(ident_idx, j) for j in source_idxs]


def _parse_int_list(text):
    return [int(p) for p in text.split(",") if p.strip()]


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args):
    from .synthdata import SynthConfig, generate_dataset

    cfg = _apply_common(args)
    data = cfg.data
    data.num_identities = args.ids
    data.num_views = args.views
    data.num_poses = args.poses
    data.image_size = args.size
    data.seed = cfg.seed
    if args.test_views:
        data.test_views = tuple(_parse_int_list(args.test_views))
    manifest = generate_dataset(data, args.out)
    n = sum(len(rec.samples) for rec in manifest.identities)
    print(f"wrote {n} samples to {args.out}")
    return 0


def cmd_train(args):
    from .model import Model
    from .synthdata import load_manifest
    from .training import save_model, train

    cfg = _apply_common(args)
    manifest = load_manifest(os.path.join(args.data, "manifest.json"))
    cfg.model.num_identities = len(manifest.identities)
    cfg.model.seed = cfg.seed
    cfg.train.seed = cfg.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    model = Model(cfg.model)
    opt, logs = train(model, manifest, cfg.train, log_path=args.log)
    save_model(args.out, model, step=cfg.train.steps, optimizer=opt,
               extra={"run_config": cfg.to_dict()})
    last = logs[-1] if logs else {}
    print(f"trained {len(logs)} steps, final loss "
          f"{last.get('l_total', float('nan')):.5f} -> {args.out}")
    return 0


def cmd_render(args):
    from .renderer import render
    from .synthdata import load_manifest, save_png

    cfg = _apply_common(args)
    model, step, _, _ = _load_model(args.ckpt)
    manifest = load_manifest(os.path.join(args.data, "manifest.json"))
    ident = args.identity
    target = manifest.load_sample(ident, args.view)
    src_idxs = _parse_int_list(args.sources) if args.sources else \
        [j for j in range(len(manifest.identities[ident].samples))
         if j != args.view][:3]
    sources = _sources_from_manifest(manifest, ident, src_idxs)
    code = model.shape_table.row(manifest.identities[ident].identity)
    img = render(model, code, target.camera, target.pose, sources,
                 samples_per_ray=cfg.samples_per_ray, fg_gate=cfg.fg_gate)
    save_png(args.out, img)
    print(f"rendered identity {ident} view {args.view} -> {args.out}")
    return 0


def cmd_animate(args):
    from .inference import PoseSequence, save_frames, synthesize
    from .skeleton import Pose
    from .synthdata import load_manifest

    cfg = _apply_common(args)
    model, _, _, _ = _load_model(args.ckpt)
    manifest = load_manifest(os.path.join(args.data, "manifest.json"))
    ident = args.identity
    rec = manifest.identities[ident]
    src_idxs = _parse_int_list(args.sources) if args.sources else \
        list(range(min(3, len(rec.samples))))
    sources = _sources_from_manifest(manifest, ident, src_idxs)
    code = model.shape_table.row(rec.identity)

    rng = np.random.default_rng(cfg.seed)
    K = model.skeleton.num_joints
    start = np.zeros((K, 3))
    end = rng.uniform(-1.0, 1.0, size=(K, 3)) * np.deg2rad(args.max_angle)
    poses = [Pose(root_translation=np.zeros(3),
                  joint_rotation=start + (end - start) * (i / max(args.frames - 1, 1)))
             for i in range(args.frames)]
    seq = PoseSequence(poses=poses, fps=args.fps)
    frames = synthesize(model, code, sources, sources[0].camera, seq,
                        samples_per_ray=cfg.samples_per_ray, fg_gate=cfg.fg_gate)
    os.makedirs(args.out, exist_ok=True)
    paths = save_frames(frames, args.out)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


def cmd_optimize_shape(args):
    from .inference import optimize_shape_code
    from .synthdata import load_manifest
    from .training import save_checkpoint

    cfg = _apply_common(args)
    model, step, _, _ = _load_model(args.ckpt)
    manifest = load_manifest(os.path.join(args.data, "manifest.json"))
    ident = args.identity
    rec = manifest.identities[ident]
    src_idxs = _parse_int_list(args.sources) if args.sources else \
        list(range(min(3, len(rec.samples))))
    sources = _sources_from_manifest(manifest, ident, src_idxs)
    result = optimize_shape_code(model, sources, steps=args.steps,
                                 samples_per_ray=cfg.samples_per_ray,
                                 fg_gate=cfg.fg_gate, seed=cfg.seed,
                                 trained_steps=step)
    save_checkpoint(args.out, {"code": result.code},
                    {"source_identity": rec.identity,
                     "initial_mse": result.initial_mse,
                     "final_mse": result.final_mse}, step=args.steps)
    print(f"fitted code: MSE {result.initial_mse:.6f} -> {result.final_mse:.6f} "
          f"({args.steps} steps) -> {args.out}")
    return 0


def cmd_eval(args):
    from .inference import evaluate_multiview
    from .synthdata import load_manifest

    cfg = _apply_common(args)
    model, _, _, _ = _load_model(args.ckpt)
    manifest = load_manifest(os.path.join(args.data, "manifest.json"))
    report = evaluate_multiview(model, manifest, args.views,
                                samples_per_ray=cfg.samples_per_ray,
                                fg_gate=cfg.fg_gate)
    if args.out:
        report.save(args.out)
    print(json.dumps({"num_sources": args.views,
                      "mean_psnr": report.mean_psnr,
                      "mean_ssim": report.mean_ssim,
                      "frames": len(report.psnr_frames)}))
    return 0


def cmd_gradcheck_suite(args):
    from .gradsuite import run_suite

    _apply_common(args)
    results = run_suite(seeds=range(args.seeds))
    failures = [(n, s, r.max_rel_err) for n, s, r in results if not r.passed]
    print(f"{len(results) - len(failures)}/{len(results)} gradient checks passed")
    for name, seed, err in failures:
        print(f"FAIL {name} (seed {seed}): max rel err {err:.3e}", file=sys.stderr)
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deformfield",
        description="Animatable neural-field renderer for articulated figures")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--ids", type=int, default=1)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--poses", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--test-views", default=None, help="comma list of view ids")
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", default=None, help="JSON-lines metrics log path")
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("render", help="render one dataset view")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--identity", type=int, default=0)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--sources", default=None, help="comma list of sample ids")
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = subs.add_parser("animate", help="render a pose sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--identity", type=int, default=0)
    p.add_argument("--sources", default=None)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--fps", type=float, default=24.0)
    p.add_argument("--max-angle", type=float, default=30.0)
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_animate)

    p = subs.add_parser("optimize-shape", help="fit a code for a new identity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--identity", type=int, default=0)
    p.add_argument("--sources", default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_optimize_shape)

    p = subs.add_parser("eval", help="multiview PSNR/SSIM report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--views", type=int, default=3, help="number of source views")
    p.add_argument("-o", "--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck-suite", help="verify all gradients")
    p.add_argument("--seeds", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck_suite)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
