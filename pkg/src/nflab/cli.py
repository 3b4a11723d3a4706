"""Command-line interface.

Subcommands: gen-scene renders the analytic scene into a dataset
directory, train fits the two-network model from a TOML config, render
and eval consume checkpoints, bench runs the experiment matrix, and
gradcheck verifies analytic gradients against finite differences.

Configs are TOML files; a handful of flags override file values. Every
command validates its inputs before writing anything, so a failed
invocation leaves no partial outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bench import BENCH_NETWORK, ExperimentSpec, run_benchmark
from .diffcore import gradient_check, ops
from .errors import ParseError
from .fields.config import INTERP_MODES, VARIANTS, NetworkConfig
from .fields.network import forward, init_params
from .rays import SampleSet
from .render import render_image
from .scenes import gen_dataset, load_blender
from .trainer.checkpoint import load_checkpoint
from .trainer.loop import TrainConfig, Trainer
from .trainer.metrics import psnr, ssim


class CliError(ValueError):
    """Bad invocation or config; message says what to fix."""


# ------------------------------------------------------------------ helpers


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise CliError(f"malformed config {p}: {e}") from e


def _build_dataclass(cls, section: dict, name: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - valid)
    if unknown:
        raise CliError(f"unknown key(s) in [{name}]: {', '.join(unknown)}; "
                       f"valid keys: {', '.join(sorted(valid))}")
    return cls(**section)


def _field(config: NetworkConfig, params: Dict[str, np.ndarray]):
    def field_fn(samples, graph=None, scope=None):
        return forward(config, params, samples, graph=graph, scope=scope)
    return field_fn


def _split_params(tensors: Dict[str, np.ndarray]
                  ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    coarse = {k[len("coarse."):]: v for k, v in tensors.items()
              if k.startswith("coarse.")}
    fine = {k[len("fine."):]: v for k, v in tensors.items()
            if k.startswith("fine.")}
    if not coarse or not fine:
        raise CliError("checkpoint lacks coarse/fine parameter groups")
    return coarse, fine


def _load_model(args):
    """Checkpoint plus the scene it was trained on, flags winning over
    the metadata recorded at save time."""
    tensors, meta = load_checkpoint(args.checkpoint)
    net = NetworkConfig(**meta["net_config"])
    tcfg = meta.get("train_config", {})
    scene = args.scene or meta.get("scene_root")
    if not scene:
        raise CliError("checkpoint records no scene root; pass --scene")
    near = float(meta.get("scene_near", 2.0))
    far = float(meta.get("scene_far", 6.0))
    background = tuple(tcfg.get("background", (1.0, 1.0, 1.0)))
    coarse, fine = _split_params(tensors)
    return net, tcfg, scene, near, far, background, coarse, fine


def _save_png(rgb: np.ndarray, path: Path) -> None:
    buf = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(buf, mode="RGB").save(path)


# --------------------------------------------------------------- subcommands


def cmd_gen_scene(args) -> int:
    splits = {name: count for name, count in
              (("train", args.train), ("val", args.val), ("test", args.test))
              if count > 0}
    if not splits:
        raise CliError("at least one split must have a positive frame count")
    out = Path(args.out)
    gen_dataset(out, splits=splits, width=args.width, height=args.height,
                n_samples=args.samples)
    counts = ", ".join(f"{k}={v}" for k, v in splits.items())
    print(f"wrote {args.width}x{args.height} dataset ({counts}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    scene_sec = dict(cfg.get("scene", {}))
    net_sec = dict(cfg.get("network", {}))
    train_sec = dict(cfg.get("train", {}))
    if args.scene is not None:
        scene_sec["root"] = args.scene
    if args.iterations is not None:
        train_sec["iterations"] = args.iterations
    if args.seed is not None:
        train_sec["seed"] = args.seed

    root = scene_sec.pop("root", None)
    if root is None:
        raise CliError("no scene: set root under [scene] or pass --scene")
    near = float(scene_sec.pop("near", 2.0))
    far = float(scene_sec.pop("far", 6.0))
    if scene_sec:
        raise CliError(f"unknown key(s) in [scene]: "
                       f"{', '.join(sorted(scene_sec))}")
    if "background" in train_sec:
        train_sec["background"] = tuple(train_sec["background"])
    net = _build_dataclass(NetworkConfig, net_sec, "network")
    tcfg = _build_dataclass(TrainConfig, train_sec, "train")

    cams, imgs = load_blender(root, "train", near=near, far=far,
                              background=tcfg.background)
    try:
        val_cams, val_imgs = load_blender(root, "val", near=near, far=far,
                                          background=tcfg.background)
    except ParseError:
        val_cams, val_imgs = [], None
        print("note: scene has no val split, skipping evaluation",
              file=sys.stderr)

    trainer = Trainer(net, tcfg, cams, imgs, val_cameras=val_cams,
                      val_images=val_imgs, log_path=args.log)
    trainer.run()
    last = trainer.history[-1]
    line = (f"trained {trainer.iteration} iterations, "
            f"final loss {last['loss']:.6f}")
    if "val_psnr" in last:
        line += (f", val psnr {last['val_psnr']:.2f} dB, "
                 f"val ssim {last['val_ssim']:.4f}")
    print(line)
    if args.checkpoint is not None:
        trainer.save(args.checkpoint, extra_meta={
            "scene_root": str(Path(root).resolve()),
            "scene_near": near, "scene_far": far})
        print(f"checkpoint written to {args.checkpoint}")
    return 0


def cmd_render(args) -> int:
    (net, tcfg, scene, near, far, background,
     coarse, fine) = _load_model(args)
    cams, _ = load_blender(scene, args.split, near=near, far=far,
                           background=background)
    if not 0 <= args.camera_index < len(cams):
        raise CliError(f"camera index {args.camera_index} out of range, "
                       f"split {args.split!r} has {len(cams)} cameras")
    render = render_image(cams[args.camera_index], _field(net, coarse),
                          _field(net, fine),
                          n_coarse=int(tcfg.get("n_coarse", 16)),
                          n_fine=int(tcfg.get("n_fine", 32)),
                          background=background, rng=None,
                          chunk=int(tcfg.get("chunk", 1024)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_png(render.rgb, out)
    raw = out.with_suffix(".npy")
    np.save(raw, render.rgb.astype(np.float32))
    print(f"wrote {out} and {raw}")
    return 0


def cmd_eval(args) -> int:
    (net, tcfg, scene, near, far, background,
     coarse, fine) = _load_model(args)
    cams, imgs = load_blender(scene, args.split, near=near, far=far,
                              background=background)
    if args.views is not None:
        cams, imgs = cams[:args.views], imgs[:args.views]
    if not cams:
        raise CliError(f"split {args.split!r} has no views")
    ps, ss = [], []
    for i, (cam, img) in enumerate(zip(cams, imgs)):
        render = render_image(cam, _field(net, coarse), _field(net, fine),
                              n_coarse=int(tcfg.get("n_coarse", 16)),
                              n_fine=int(tcfg.get("n_fine", 32)),
                              background=background, rng=None,
                              chunk=int(tcfg.get("chunk", 1024)))
        ps.append(psnr(render.rgb, img))
        ss.append(ssim(render.rgb, img))
        print(f"view {i}: psnr {ps[-1]:.2f} dB  ssim {ss[-1]:.4f}")
    print(f"mean over {len(ps)} views: psnr {float(np.mean(ps)):.2f} dB  "
          f"ssim {float(np.mean(ss)):.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    sec = dict(cfg.get("bench", {}))
    net_over = dict(sec.pop("network", {}))
    spec_dicts = sec.pop("spec", [])
    if not spec_dicts:
        raise CliError("config has no [[bench.spec]] entries")
    timed = bool(sec.pop("timed", True)) and not args.no_timing
    parallel = bool(sec.pop("parallel", False)) or args.parallel
    eval_views = sec.pop("eval_views", None)
    near = float(sec.pop("near", 2.0))
    far = float(sec.pop("far", 6.0))
    if sec:
        raise CliError(f"unknown key(s) in [bench]: "
                       f"{', '.join(sorted(sec))}")
    valid = {f.name for f in dataclasses.fields(NetworkConfig)}
    unknown = sorted(set(net_over) - valid)
    if unknown:
        raise CliError(f"unknown key(s) in [bench.network]: "
                       f"{', '.join(unknown)}")
    network = dataclasses.replace(BENCH_NETWORK, **net_over)
    specs = [_build_dataclass(ExperimentSpec, d, f"bench.spec #{i}")
             for i, d in enumerate(spec_dicts)]

    text = run_benchmark(specs, network=network, timed=timed,
                         parallel=parallel, eval_views=eval_views,
                         near=near, far=far,
                         log=lambda m: print(m, file=sys.stderr))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)

    rows = list(csv.reader(io.StringIO(text)))
    header, data = rows[0], rows[1:]
    failed = [r[0] for r in data if len(r) > len(header)]
    print(f"wrote {len(data)} rows to {out}")
    if failed:
        print(f"{len(failed)} spec(s) failed: {', '.join(failed)}",
              file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = NetworkConfig(variant=args.variant, kernel=args.kernel,
                        interpolation=args.interp, width=args.width,
                        pos_freqs=2, dir_freqs=1,
                        down_levels=args.down_levels, dtype="float64")
    rng = np.random.default_rng(args.seed)
    n_rays, n = args.rays, args.samples
    depths = np.sort(rng.uniform(2.0, 6.0, (n_rays, n)), axis=1)
    dirs = rng.normal(size=(n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = rng.normal(size=(n_rays, 3))
    samples = SampleSet(
        depths=depths,
        positions=origins[:, None, :] + depths[..., None] * dirs[:, None, :],
        view_dirs=dirs, near=np.full(n_rays, 2.0), far=np.full(n_rays, 6.0))
    params = init_params(cfg, args.seed + 1)
    names = sorted(params)

    def fn(*tensors):
        out = forward(cfg, dict(zip(names, tensors)), samples,
                      graph=tensors[0].graph)
        return ops.add(ops.tmean(out.rgb), ops.tmean(out.sigma))

    report = gradient_check(fn, [params[n] for n in names],
                            tolerance=args.tolerance,
                            max_per_input=args.per_param,
                            rng=np.random.default_rng(0))
    print(f"max relative error: {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance:.1e}, "
          f"{report.n_checked} elements checked)")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nflab",
        description="differentiable volume rendering laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene",
                       help="render the analytic scene into a dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--train", type=int, default=24, metavar="N",
                   help="training frames")
    g.add_argument("--val", type=int, default=4, metavar="N")
    g.add_argument("--test", type=int, default=4, metavar="N")
    g.add_argument("--samples", type=int, default=512,
                   help="reference samples per ray")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="fit a model from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--scene", help="dataset directory (overrides config)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", help="write final model state here")
    t.add_argument("--log", help="append per-iteration CSV rows here")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one camera from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera-index", type=int, required=True)
    r.add_argument("--out", required=True, help="output PNG path")
    r.add_argument("--scene", help="dataset directory (default: recorded "
                   "in the checkpoint)")
    r.add_argument("--split", default="test")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene")
    e.add_argument("--split", default="val")
    e.add_argument("--views", type=int, help="limit to the first N views")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run the experiment matrix to CSV")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True, help="output CSV path")
    b.add_argument("--parallel", action="store_true",
                   help="run specs on worker processes (disables timing)")
    b.add_argument("--no-timing", action="store_true",
                   help="skip the per-iteration timing columns")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck",
                       help="compare analytic gradients to finite differences")
    c.add_argument("--variant", required=True, choices=VARIANTS)
    c.add_argument("--kernel", type=int, default=3)
    c.add_argument("--interp", default="position-aware",
                   choices=INTERP_MODES)
    c.add_argument("--width", type=int, default=16)
    c.add_argument("--samples", type=int, default=16)
    c.add_argument("--rays", type=int, default=2)
    c.add_argument("--down-levels", type=int, default=3)
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--per-param", type=int, default=4,
                   help="elements checked per parameter tensor")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
