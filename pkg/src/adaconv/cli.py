"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DatasetParams, MotionSpec, build_dataset, generate_synthetic_sequence, \
    load_clip_triples, read_manifest
from .diagnostics import dump_kernel_heatmap
from .errors import AdaConvError
from .frames import load_frame, numbered_frames, save_frame
from .infer import interpolate_recursive
from .metrics import interpolation_error, psnr
from .net import NetworkConfig, init_network, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_loop

log = logging.getLogger("adaconv")

CONFIGS = {"desk": NetworkConfig.desk, "paper": NetworkConfig.paper}
STORED_PATCH = {"desk": NetworkConfig.desk().receptive_field + 6, "paper": 150}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _pixels(text):
    out = []
    for item in text.split(";"):
        if not item.strip():
            continue
        try:
            x, y = (int(v) for v in item.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad pixel {item!r}, expected x,y") from None
        out.append((x, y))
    if not out:
        raise argparse.ArgumentTypeError("no pixels given")
    return out


def build_parser():
    p = Parser(prog="adaconv", description="Frame interpolation by adaptive convolution.")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    s = sub.add_parser("synth-data", help="render synthetic clips as numbered PNG frames")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=50)
    s.add_argument("--max-shift", type=float, default=8.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--frames", type=int, default=5, help="frames per clip")

    s = sub.add_parser("extract", help="curate training samples from clip directories")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-weighted", type=int, default=2000)
    s.add_argument("--n-final", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", choices=sorted(CONFIGS), default="desk")
    s.add_argument("--candidates", type=int, default=1, help="candidate centres per triple group")

    s = sub.add_parser("train", help="train a kernel network")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", choices=sorted(CONFIGS), default="desk")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int)
    s.add_argument("--validation-fraction", type=float, default=0.1)
    s.add_argument("--checkpoint-every", type=int, default=0)

    s = sub.add_parser("interpolate", help="synthesize the middle frame(s)")
    s.add_argument("--model", required=True)
    s.add_argument("--frame1", required=True)
    s.add_argument("--frame2", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--recursive", type=int, default=1, metavar="DEPTH")
    s.add_argument("--pixelwise", action="store_true")
    s.add_argument("--threads", type=int)

    s = sub.add_parser("evaluate", help="print interpolation error (plain RMS, 0-255) and PSNR")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)

    s = sub.add_parser("inspect", help="dump kernel heatmaps for chosen pixels")
    s.add_argument("--model", required=True)
    s.add_argument("--frame1", required=True)
    s.add_argument("--frame2", required=True)
    s.add_argument("--pixels", required=True, type=_pixels, help="x,y[;x,y...]")
    s.add_argument("--out", required=True)
    return p


def cmd_synth_data(args):
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    limit = int(np.floor(args.max_shift))
    for c in range(args.clips):
        while True:
            dx, dy = (int(v) for v in rng.integers(-limit, limit + 1, 2))
            if np.hypot(dx, dy) <= args.max_shift:
                break
        spec = MotionSpec(args.size, args.size, (dx, dy), triples=args.frames - 2,
                          max_shift=args.max_shift)
        triples = generate_synthetic_sequence(spec, int(rng.integers(0, 2 ** 31)))
        frames = [triples[0].f1] + [t.f2 for t in triples] + [triples[-1].f3]
        clip = out / f"clip_{c:03d}"
        clip.mkdir(parents=True, exist_ok=True)
        for j, f in enumerate(frames):
            save_frame(clip / f"frame_{j:04d}.png", f)
    print(f"wrote {args.clips} clips to {out}")


def cmd_extract(args):
    root = Path(args.frames)
    clips = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    if not clips and numbered_frames(root):
        clips = [root]
    triples = [t for d in clips for t in load_clip_triples(d)]
    params = DatasetParams(n_weighted=args.n_weighted, n_final=args.n_final,
                           patch_size=STORED_PATCH[args.config],
                           candidates_per_group=args.candidates)
    manifest = build_dataset(triples, args.out, params, args.seed)
    print(f"selected {len(manifest)} samples from {len(triples)} triple groups")


def cmd_train(args):
    manifest = read_manifest(Path(args.data) / "manifest.txt")
    net = init_network(CONFIGS[args.config](), seed=args.seed)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch, seed=args.seed, lam=args.lam,
                      validation_fraction=args.validation_fraction,
                      checkpoint_every=args.checkpoint_every, checkpoint_path=args.out)
    with _threads(args.threads):
        result = train_loop(net, manifest, cfg, on_log=print)
    save_checkpoint(net, args.out)
    if result.validation is not None:
        print(f"validation color {result.validation[0]:.6f} total {result.validation[1]:.6f}")


def recursive_names(out, depth):
    out = Path(out)
    n = 2 ** depth
    return [out.with_name(f"{out.stem}_t{round(100 * j / n):02d}{out.suffix}") for j in range(1, n)]


def cmd_interpolate(args):
    if args.recursive < 1:
        raise UsageError("--recursive must be >= 1")
    net = load_checkpoint(args.model)
    i1, i2 = load_frame(args.frame1), load_frame(args.frame2)
    with _threads(args.threads):
        frames = interpolate_recursive(net, i1, i2, args.recursive, args.pixelwise)
    paths = [Path(args.out)] if args.recursive == 1 else recursive_names(args.out, args.recursive)
    for path, frame in zip(paths, frames):
        save_frame(path, np.clip(frame, 0, 1))
        print(f"wrote {path}")


def cmd_evaluate(args):
    pred, truth = load_frame(args.pred), load_frame(args.truth)
    print(f"ie {interpolation_error(pred, truth):.6f} psnr {psnr(pred, truth):.6f}")


def cmd_inspect(args):
    net = load_checkpoint(args.model)
    i1, i2 = load_frame(args.frame1), load_frame(args.frame2)
    try:
        paths = dump_kernel_heatmap(net, i1, i2, args.pixels, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(paths)} files to {args.out}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "extract": cmd_extract,
    "train": cmd_train,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (AdaConvError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
