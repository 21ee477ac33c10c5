"""Command line: ``spikesplat simulate | train | render | eval``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import List, Optional

import numpy as np

from .errors import FormatError, SpikeSplatError, ValidationError

THREADS_ENV = "SPIKESPLAT_THREADS"
LOG_COLUMNS = ("iter", "loss", "l1", "dssim", "spike_accuracy", "gaussian_count")


class UsageError(SpikeSplatError):
    pass


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _default_threads():
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return _positive_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
    return None


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _HelpFormatter(argparse.HelpFormatter):
    """Append the default to every flag that has one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required:
            return text + " (required)"
        if action.default is None or action.default is argparse.SUPPRESS or "%(default)" in text \
                or isinstance(action, argparse._StoreTrueAction):
            return text
        return text + " (default: %(default)s)"


class _Parser(argparse.ArgumentParser):
    """Argument errors become a single diagnostic line with exit status 2."""

    def error(self, message):
        self.exit(2, f"{self.prog}: usage error: {message}\n")

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML file with defaults for this command; flags win")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"cap on kernel worker threads (default from ${THREADS_ENV})")


def _noise_flags(p):
    g = p.add_argument_group("sensor noise")
    g.add_argument("--noiseless", action="store_true", help="disable shot, dark and response noise")
    g.add_argument("--photon-gain", type=float, default=1000.0,
                   help="expected photons per step at intensity 1")
    g.add_argument("--dark-rate", type=float, default=1e-3, help="mean dark charge per step")
    g.add_argument("--rnu-sigma", type=float, default=0.02, help="relative spread of pixel sensitivity")
    g.add_argument("--no-calibrate", action="store_true",
                   help="write a uniform response map instead of calibrating one")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="spikesplat", formatter_class=fmt,
                                     description="Gaussian splatting reconstruction from spike-camera streams.")
    sub = parser.add_subparsers(dest="command", metavar="{simulate,train,render,eval}")
    sub.required = True

    p = sub.add_parser("simulate", formatter_class=fmt, help="synthesize spike streams for a scene",
                       description="Render ground truth and simulate a spike camera per view.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--fixture", choices=("blobs3", "checker-sphere"), default="blobs3",
                     help="built-in procedural scene")
    src.add_argument("--images", help="directory of ground-truth images (needs --poses)")
    p.add_argument("--poses", help="pose JSON; orbit cameras are used for fixtures when omitted")
    p.add_argument("--views", type=_positive_int, default=20, help="training views for fixtures")
    p.add_argument("--test-views", type=int, default=5, help="held-out views for fixtures")
    p.add_argument("--width", type=_positive_int, default=64, help="image width for fixtures")
    p.add_argument("--height", type=_positive_int, default=64, help="image height for fixtures")
    p.add_argument("--n", "--window", dest="n", type=_positive_int, default=256,
                   help="readout steps per stream")
    p.add_argument("--threshold", type=float, default=1.0, help="firing threshold")
    p.add_argument("--timestep-hz", type=float, default=20000.0, help="readout rate stored in the streams")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    _noise_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    _common(p)

    p = sub.add_parser("train", formatter_class=fmt, help="optimize Gaussians against spike streams",
                       description="Train a Gaussian scene on a simulated or converted dataset directory.")
    p.add_argument("--data", required=True, help="dataset directory (see simulate)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=_positive_int, default=2000, help="total optimizer steps")
    p.add_argument("--loss-mode", choices=("full_spike", "l1_only", "intensity", "no_noise_embed"),
                   default="full_spike", help="training objective")
    p.add_argument("--lam", type=float, default=0.2, help="D-SSIM weight")
    p.add_argument("--lr-mean", type=float, default=1.6e-4, help="initial position learning rate")
    p.add_argument("--lr-mean-final", type=float, default=1.6e-6, help="position learning rate at the last step")
    p.add_argument("--lr-rot", type=float, default=1e-3, help="rotation learning rate")
    p.add_argument("--lr-scale", type=float, default=5e-3, help="log-scale learning rate")
    p.add_argument("--lr-opacity", type=float, default=5e-2, help="opacity logit learning rate")
    p.add_argument("--lr-sh", type=float, default=2.5e-3, help="SH color learning rate")
    p.add_argument("--densify-interval", type=_positive_int, default=100, help="steps between densify passes")
    p.add_argument("--densify-grad-threshold", type=float, default=2e-4, help="mean screen gradient that triggers clone or split")
    p.add_argument("--prune-opacity-threshold", type=float, default=5e-3, help="Gaussians below this opacity are removed")
    p.add_argument("--densify-until", type=int, default=None,
                   help="last densify iteration (default: half the iterations)")
    p.add_argument("--a0-mode", choices=("zero", "seeded-uniform", "stream-phase"), default="stream-phase",
                   help="initial accumulator for the simulated neurons")
    p.add_argument("--surrogate", choices=("rectangular", "fast-sigmoid"), default="rectangular",
                   help="spike derivative stand-in")
    p.add_argument("--reset-grad", action=argparse.BooleanOptionalAction, default=True,
                   help="differentiate through the reset path")
    p.add_argument("--luminance", choices=("uniform", "bt601"), default="uniform",
                   help="RGB to intensity weights")
    p.add_argument("--sh-degree", type=int, default=1, help="spherical harmonic degree of colors")
    p.add_argument("--init-count", type=_positive_int, default=200,
                   help="random Gaussians when the dataset has no points.ply")
    p.add_argument("--seed", type=int, default=0, help="initialization and view order seed")
    p.add_argument("--nondeterministic", action="store_true",
                   help="allow the parallel (order-dependent) backward pass")
    p.add_argument("--checkpoint-every", type=int, default=500, help="0 disables periodic checkpoints")
    p.add_argument("--ckpt-dtype", choices=("f32", "f64"), default="f64", help="checkpoint float width")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=_positive_int, default=100, help="progress print interval")
    _common(p)

    p = sub.add_parser("render", formatter_class=fmt, help="render intensity images from a checkpoint",
                       description="Render one intensity image per pose.")
    p.add_argument("--checkpoint", required=True, help="trainer checkpoint")
    p.add_argument("--poses", required=True, help="pose JSON to render")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm", help="image file type")
    _common(p)

    p = sub.add_parser("eval", formatter_class=fmt, help="PSNR/SSIM of rendered vs ground-truth images",
                       description="Compare two image directories file by file (sorted by name).")
    p.add_argument("--rendered", required=True, help="directory of rendered images")
    p.add_argument("--gt", required=True, help="directory of ground-truth images")
    p.add_argument("--out", default=None, help="CSV path (default: <rendered>/metrics.csv)")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _subparser(parser, name) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def load_config(path, sub: argparse.ArgumentParser, command: str) -> dict:
    """Read ``[command]`` (or top-level) keys; names are flag names with ``-`` or ``_``."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config {path}: {exc}")
    table = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    for key, val in doc.items():
        if isinstance(val, dict):
            if key != command:
                raise UsageError(f"config {path}: unknown section [{key}]")
            table.update(val)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out = {}
    for key, val in table.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"config {path}: unknown key {key!r} for {command}")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            if not isinstance(val, bool):
                raise UsageError(f"config {path}: {key} must be true or false")
        elif act.type is not None and val is not None:
            try:
                val = act.type(val)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config {path}: bad value for {key}: {exc}")
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config {path}: {key} must be one of {sorted(act.choices)}")
        out[dest] = val
    return out


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        sub.set_defaults(**load_config(args.config, sub, args.command))
        args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = _default_threads()
    return args


def resolved_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def _set_threads(n):
    if n is None:
        return
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .fixtures import calibrate_sensor, orbit_views, render_fixture, simulate_views
    from .io_dataset import list_images, read_image, read_poses, save_dataset_dir
    from .spike_core import NoiseConfig, NonUniformityMap

    if args.noiseless:
        noise = NoiseConfig.noiseless(seed=args.seed)
    else:
        noise = NoiseConfig(photon_gain=args.photon_gain, dark_rate=args.dark_rate,
                            rnu_sigma=args.rnu_sigma, seed=args.seed)
    test_views, test_images = [], []
    if args.images:
        if not args.poses:
            raise UsageError("--images needs --poses")
        if not os.path.exists(args.poses):
            raise UsageError(f"poses file {args.poses} does not exist")
        views = read_poses(args.poses)
        files = list_images(args.images)
        if len(files) != len(views):
            raise ValidationError(f"{len(files)} images but {len(views)} poses")
        images = []
        for path in files:
            img = read_image(path)
            images.append(img if img.ndim == 2 else img.mean(axis=2))
    else:
        if args.poses:
            if not os.path.exists(args.poses):
                raise UsageError(f"poses file {args.poses} does not exist")
            views = read_poses(args.poses)
        else:
            views = orbit_views(args.views, args.width, args.height)
            if args.test_views > 0:
                test_views = orbit_views(args.test_views, args.width, args.height, phase=0.5,
                                         elevations=(10.0, 25.0, -5.0))
        images = [render_fixture(args.fixture, v) for v in views]
        test_images = [render_fixture(args.fixture, v) for v in test_views]
    h, w = images[0].shape
    true_rnu = None
    if noise.rnu_sigma > 0:
        true_rnu = NonUniformityMap.synthesize(h, w, noise.rnu_sigma,
                                               np.random.default_rng([noise.seed, 7]))
    streams = simulate_views(images, args.n, args.threshold, noise, true_rnu, args.timestep_hz)
    if args.no_calibrate:
        rnu = NonUniformityMap.uniform(h, w)
    else:
        rnu = calibrate_sensor((h, w), args.n, args.threshold, noise, true_rnu)
    cfg = {k: v for k, v in resolved_config(args).items() if k not in ("out", "config", "threads")}
    save_dataset_dir(args.out, views, streams, images, rnu, test_views, test_images, true_rnu, cfg)
    print(f"wrote {len(streams)} streams to {args.out}")
    return 0


def _train_config(args):
    from .loss_metrics import LossConfig
    from .trainer import LUMINANCE, TrainConfig

    return TrainConfig(
        iterations=args.iterations, lr_mean=args.lr_mean, lr_mean_final=args.lr_mean_final,
        lr_rot=args.lr_rot, lr_scale=args.lr_scale, lr_opacity=args.lr_opacity, lr_sh=args.lr_sh,
        densify_interval=args.densify_interval, densify_grad_threshold=args.densify_grad_threshold,
        prune_opacity_threshold=args.prune_opacity_threshold, densify_until_iter=args.densify_until,
        loss=LossConfig(mode=args.loss_mode, lam=args.lam), a0_mode=args.a0_mode,
        surrogate=args.surrogate, reset_grad=args.reset_grad, seed=args.seed,
        luminance_weights=LUMINANCE[args.luminance], sh_degree=args.sh_degree,
        deterministic=not args.nondeterministic, init_count=args.init_count)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def cmd_train(args) -> int:
    from .io_dataset import load_dataset_dir, read_checkpoint, write_checkpoint
    from .trainer import Trainer, restore_trainer, trainer_checkpoint

    cfg = _train_config(args)
    data = load_dataset_dir(args.data)
    cfg.window, cfg.threshold = data.window, data.threshold
    trainer = Trainer(data, cfg)
    if args.resume:
        restore_trainer(trainer, read_checkpoint(args.resume))
    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    dtype = np.float32 if args.ckpt_dtype == "f32" else np.float64
    log_path = os.path.join(args.out, "loss.csv")
    fresh = not (args.resume and os.path.exists(log_path))
    with open(log_path, "w" if fresh else "a", newline="") as f:
        if fresh:
            f.write(f"# loss_mode={cfg.loss.mode} lam={cfg.loss.lam!r} seed={cfg.seed}\n")
            f.write(",".join(LOG_COLUMNS) + "\n")
        writer = csv.writer(f, lineterminator="\n")

        def on_step(it, res):
            writer.writerow([it] + [_fmt(v) for v in (res.loss, res.l1, res.dssim, res.spike_accuracy)]
                            + [res.gaussian_count])
            if it % args.log_every == 0:
                print(f"iter {it}: loss {res.loss:.5f} gaussians {res.gaussian_count}", flush=True)
            if args.checkpoint_every and it % args.checkpoint_every == 0 and it < cfg.iterations:
                write_checkpoint(trainer_checkpoint(trainer, dtype),
                                 os.path.join(args.out, "checkpoints", f"iter_{it:06d}.ckpt"))

        trainer.train(callback=on_step)
    write_checkpoint(trainer_checkpoint(trainer, dtype), os.path.join(args.out, "final.ckpt"))
    if trainer.adam.skipped:
        print(f"warning: {trainer.adam.skipped} non-finite gradient rows skipped", file=sys.stderr)
    if data.test_views:
        ev = trainer.evaluate()
        print(f"held-out PSNR {ev['mean_psnr']:.3f} dB, SSIM {ev['mean_ssim']:.4f}")
    return 0


def cmd_render(args) -> int:
    from .io_dataset import read_checkpoint, read_poses, write_image
    from .rasterizer import render_scene
    from .trainer import config_from_checkpoint, luminance, scene_from_checkpoint

    ckpt = read_checkpoint(args.checkpoint)
    cfg = config_from_checkpoint(ckpt)
    scene = scene_from_checkpoint(ckpt)
    views = read_poses(args.poses)
    os.makedirs(args.out, exist_ok=True)
    for i, v in enumerate(views):
        img = luminance(render_scene(scene, v, cfg.dilation, cfg.tile_size).image, cfg.luminance_weights)
        write_image(img, os.path.join(args.out, f"view_{i:03d}.{args.format}"))
    print(f"rendered {len(views)} views to {args.out}")
    return 0


def evaluate_dirs(rendered_dir, gt_dir):
    from .io_dataset import list_images, read_image
    from .loss_metrics import psnr, ssim_image

    a, b = list_images(rendered_dir), list_images(gt_dir)
    if len(a) != len(b):
        raise ValidationError(f"{len(a)} rendered images but {len(b)} ground-truth images")
    if not a:
        raise ValidationError(f"no images in {rendered_dir}")
    rows = []
    for pa, pb in zip(a, b):
        x, y = read_image(pa), read_image(pb)
        if x.shape != y.shape:
            raise ValidationError(f"{os.path.basename(pa)}: shape {x.shape} vs {y.shape}")
        rows.append((os.path.basename(pa), psnr(x, y), ssim_image(x, y)))
    return rows


def format_table(rows) -> str:
    body = [(n, f"{p:.3f}" if math.isfinite(p) else "inf", f"{s:.4f}") for n, p, s in rows]
    mp, ms = float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))
    body.append(("mean", f"{mp:.3f}" if math.isfinite(mp) else "inf", f"{ms:.4f}"))
    head = ("view", "psnr_db", "ssim")
    widths = [max(len(r[i]) for r in body + [head]) for i in range(3)]
    line = lambda r: "  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])
    return "\n".join([line(head)] + [line(r) for r in body])


def cmd_eval(args) -> int:
    rows = evaluate_dirs(args.rendered, args.gt)
    out = args.out or os.path.join(args.rendered, "metrics.csv")
    mp, ms = float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["view", "psnr_db", "ssim"])
        for name, p, s in rows:
            w.writerow([name, _fmt(float(p)) if math.isfinite(p) else "inf", _fmt(float(s))])
        w.writerow(["mean", _fmt(mp) if math.isfinite(mp) else "inf", _fmt(ms)])
    print(format_table(rows))
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
        print(json.dumps({"command": args.command, "config": resolved_config(args)}, sort_keys=True,
                         default=str))
        _set_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"spikesplat: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FormatError, SpikeSplatError, ValueError) as exc:
        print(f"spikesplat: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ValidationError) else 1
    except OSError as exc:
        print(f"spikesplat: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
