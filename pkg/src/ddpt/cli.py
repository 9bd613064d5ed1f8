"""Command-line interface: denoise, add-noise, eval, synth, bench.

Data goes to stdout or files; progress and the per-sweep objective trace go
to stderr.  Exit codes: 0 success, 1 I/O or file-format failure, 2 usage or
numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import patchio
from .errors import DimensionError, FormatError, NumericalError
from .inference import recover_all, run_vb
from .initkit import init_state
from .model import (
    attach_uniform_responsibilities,
    default_hyperparameters,
    load_state,
    sample_noisy_patches,
    save_state,
)
from .noisebench import KINDS, NoiseSpec, add_noise, format_metric_line, psnr, ssim

DEFAULT_GRID = "gaussian:15,30,45;heterogeneous:3,4,5;laplace:15,30,45;uniform:15,30,45;combined"
BENCH_HEADER = "image\tfamily\tlevel\tpsnr_in\tssim_in\tpsnr_out\tssim_out"


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model options")
    group.add_argument("--patch-size", type=int, default=8,
                       help="square patch side (default: 8)")
    group.add_argument("--stride", type=int, default=3,
                       help="patch grid stride (default: 3)")
    group.add_argument("--groups", type=int, default=30,
                       help="group truncation level (default: 30)")
    group.add_argument("--noise-comps", type=int, default=10,
                       help="noise components per group (default: 10)")
    group.add_argument("--alpha", type=float, default=3.0,
                       help="group-layer stick concentration (default: 3)")
    group.add_argument("--beta", type=float, default=1e-3,
                       help="noise-layer stick concentration (default: 1e-3)")
    group.add_argument("--max-sweeps", type=int, default=100,
                       help="coordinate-ascent sweep cap (default: 100)")
    group.add_argument("--tol", type=float, default=1e-6,
                       help="relative objective tolerance (default: 1e-6)")
    group.add_argument("--seed", type=int, default=0,
                       help="seed for every stochastic step (default: 0)")
    group.add_argument("--threads", type=int, default=None,
                       help="worker threads; results do not depend on the count "
                            "(default: all cores)")
    group.add_argument("--paper-literal-sticks", action="store_true",
                       help="use the uncorrected stick terms in the responsibility "
                            "updates (monotone objective not guaranteed)")
    group.add_argument("--no-recenter", action="store_true",
                       help="skip shifting the marginal noise mean into the group offsets")


def _hyper_from_args(args, d: int):
    hyper = default_hyperparameters(d)
    hyper.alpha = float(args.alpha)
    hyper.beta = float(args.beta)
    hyper.max_groups = int(args.groups)
    hyper.max_noise = int(args.noise_comps)
    return hyper


def _read_image(path):
    """Read PGM (2-D) or PPM (3-D) by magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        return patchio.read_pgm(path)
    if magic == b"P6":
        return patchio.read_ppm(path)
    raise FormatError(f"unsupported image format in {path}")


def _write_image(image, path):
    if image.ndim == 2:
        patchio.write_pgm(image, path)
    else:
        patchio.write_ppm(image, path)


def _threads(args) -> int:
    return args.threads if args.threads is not None else (os.cpu_count() or 1)


def _denoise_channel(channel, args, seed, save_model=None, load_model=None):
    patches = patchio.extract_patches(channel, args.patch_size, args.stride)
    if load_model is not None:
        state = load_state(load_model)
        if state.hyper.d != patches.d:
            raise DimensionError("loaded model dimension disagrees with the patch size")
        attach_uniform_responsibilities(state, patches.n)
        hyper = state.hyper
    else:
        hyper = _hyper_from_args(args, patches.d)
        state = init_state(patches.data, hyper, seed=seed)
    state.paper_literal_sticks = bool(args.paper_literal_sticks)
    state, projections, trace = run_vb(
        patches.data, hyper, state,
        max_sweeps=args.max_sweeps, tol=args.tol, seed=seed,
        recenter=not args.no_recenter, threads=_threads(args),
        trace_stream=sys.stderr)
    print(f"final elbo {trace[-1]:.10g} after {len(trace) - 1} sweeps", file=sys.stderr)
    if save_model is not None:
        save_state(state, save_model)
    estimates = recover_all(state, projections)
    return patchio.aggregate_patches(estimates, patches.anchors, args.patch_size,
                                     patches.height, patches.width)


def cmd_denoise(args) -> int:
    image = _read_image(args.input)
    if image.ndim == 2:
        out = _denoise_channel(image, args, args.seed,
                               save_model=args.save_model, load_model=args.load_model)
    else:
        channels = []
        for c in range(image.shape[2]):
            save = None if args.save_model is None else f"{args.save_model}.c{c}"
            load = None if args.load_model is None else f"{args.load_model}.c{c}"
            channels.append(_denoise_channel(image[:, :, c], args,
                                             args.seed * 3 + c, save, load))
        out = np.stack(channels, axis=2)
    _write_image(out, args.output)
    return 0


def cmd_add_noise(args) -> int:
    image = _read_image(args.input)
    spec = NoiseSpec(kind=args.kind, level=args.level, seed=args.seed,
                     clip=not args.no_clip, laplace_scale_param=args.laplace_scale)
    if image.ndim == 2:
        out = add_noise(image, spec)
    else:
        out = np.stack([add_noise(image[:, :, c],
                                  NoiseSpec(kind=args.kind, level=args.level,
                                            seed=args.seed * 3 + c,
                                            clip=not args.no_clip,
                                            laplace_scale_param=args.laplace_scale))
                        for c in range(image.shape[2])], axis=2)
    _write_image(out, args.output)
    return 0


def cmd_eval(args) -> int:
    reference = _read_image(args.reference)
    test = _read_image(args.test)
    if reference.shape != test.shape:
        raise DimensionError("reference and test images differ in shape")
    if reference.ndim == 3:
        reference = reference.mean(axis=2)
        test = test.mean(axis=2)
    print(format_metric_line(str(args.test), psnr(reference, test), ssim(reference, test)))
    return 0


def cmd_synth(args) -> int:
    hyper = _hyper_from_args(args, args.dim)
    ranks = [int(r) for r in str(args.ranks).split(",")]
    if len(ranks) == 1:
        ranks = ranks * args.synth_groups
    noise_counts = [args.synth_noise] * args.synth_groups
    data, z, z_noise = sample_noisy_patches(hyper, args.synth_groups, noise_counts,
                                            ranks, args.n, args.seed)
    np.save(f"{args.out}_data.npy", data)
    np.save(f"{args.out}_group_labels.npy", z)
    np.save(f"{args.out}_noise_labels.npy", z_noise)
    print(f"wrote {args.n} samples to {args.out}_*.npy", file=sys.stderr)
    return 0


def _parse_grid(spec: str):
    entries = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            family, levels = part.split(":", 1)
            family = family.strip()
            for level in levels.split(","):
                entries.append((family, float(level)))
        else:
            entries.append((part, 0.0))
    for family, _ in entries:
        if family not in KINDS:
            raise ValueError(f"unknown noise family {family!r} in grid")
    return entries


def cmd_bench(args) -> int:
    if not args.images:
        raise ValueError("bench needs at least one image")
    grid = _parse_grid(args.grid)
    print(BENCH_HEADER)
    for path in args.images:
        reference = _read_image(path)
        if reference.ndim == 3:
            reference = reference.mean(axis=2)
        for row, (family, level) in enumerate(grid):
            spec = NoiseSpec(kind=family, level=level if level > 0 else 1.0,
                             seed=args.seed * 1000 + row, clip=True)
            if family == "combined":
                spec = NoiseSpec(kind="combined", seed=args.seed * 1000 + row, clip=True)
            noisy = add_noise(reference, spec)
            out = _denoise_channel(noisy, args, args.seed * 1000 + row)
            level_txt = f"{level:g}" if family != "combined" else "-"
            print(f"{path}\t{family}\t{level_txt}\t{psnr(reference, noisy):.4f}\t"
                  f"{ssim(reference, noisy):.4f}\t{psnr(reference, out):.4f}\t"
                  f"{ssim(reference, out):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddpt",
        description="Blind image denoising with a two-layer nonparametric mixture")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise", help="denoise a PGM/PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--save-model", default=None,
                   help="write the fitted model state to this path")
    p.add_argument("--load-model", default=None,
                   help="start from a saved model state instead of clustering")
    _add_model_options(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("add-noise", help="contaminate an image with synthetic noise")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--kind", default="gaussian",
                   help=f"one of {', '.join(KINDS)} (default: gaussian)")
    p.add_argument("--level", type=float, default=25.0,
                   help="sigma / b / a depending on the family (default: 25)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-clip", action="store_true",
                   help="skip clamping the noisy image to [0, 255]")
    p.add_argument("--laplace-scale", action="store_true",
                   help="treat the Laplace level as the scale parameter, "
                        "not the standard deviation")
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("eval", help="report PSNR and SSIM between two images")
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="sample patches from the generative model")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dim", type=int, default=16, help="patch vector dimension")
    p.add_argument("--synth-groups", type=int, default=3)
    p.add_argument("--synth-noise", type=int, default=2,
                   help="noise components per group")
    p.add_argument("--ranks", default="2", help="per-group ranks, comma separated")
    _add_model_options(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run a noise grid over images and report metrics")
    p.add_argument("--images", nargs="*", default=[])
    p.add_argument("--grid", default=DEFAULT_GRID,
                   help="semicolon-separated family:level,... entries")
    _add_model_options(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, FormatError) as exc:
        print(f"ddpt: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"ddpt: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, DimensionError) as exc:
        print(f"ddpt: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 2


if __name__ == "__main__":
    sys.exit(main())
